import json
import zipfile

import numpy as np
import pytest

from app.errors import ArchiveIntegrityError, ArchiveVersionError, DataIOError, DatasetValidationError
from app.models.dataset import Scaler
from app.models.schemas import ArchiveMeta, MetricsReport, SynthConfig, TableSchema
from app.mtal.discriminator import build_discriminator
from app.mtal.generator import build_generator, predict_potential_outcomes
from app.storage.archive import load_model, save_model
from app.storage.loaders import (
    load_dataset,
    load_ihdp,
    load_synthetic,
    load_table,
    write_synthetic,
)
from app.storage.reports import write_report
from app.synth.basket import generate_basket_dataset


def _ihdp_rows(rng, n=6, d=3):
    t = np.array([0, 1] * (n // 2), dtype=float)
    mu0 = rng.normal(size=n)
    mu1 = mu0 + 4.0
    y0 = mu0 + 0.1 * rng.normal(size=n)
    y1 = mu1 + 0.1 * rng.normal(size=n)
    yf = np.where(t == 1, y1, y0)
    ycf = np.where(t == 1, y0, y1)
    x = rng.normal(size=(n, d))
    return np.column_stack([t, yf, ycf, mu0, mu1, x])


def _write_rows(path, rows, header=None):
    lines = [header] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_ihdp_csv_maps_treatment_to_groups(tmp_path, rng):
    rows = _ihdp_rows(rng)
    path = tmp_path / "ihdp_npci_1.csv"
    _write_rows(path, rows)
    dataset = load_ihdp(path)
    assert (dataset.n, dataset.d, dataset.k) == (6, 3, 2)
    assert dataset.group_labels == ("control", "treated")
    np.testing.assert_array_equal(dataset.group, [0, 1, 0, 1, 0, 1])
    np.testing.assert_allclose(dataset.noiseless_outcomes[:, 1] - dataset.noiseless_outcomes[:, 0], 4.0)
    treated = rows[:, 0] == 1
    np.testing.assert_array_equal(dataset.potential_outcomes[treated, 1], rows[treated, 1])
    np.testing.assert_array_equal(dataset.potential_outcomes[treated, 0], rows[treated, 2])


def test_load_ihdp_skips_header_and_reads_directory(tmp_path, rng):
    header = "treatment,y_factual,y_cfactual,mu0,mu1,x1,x2,x3"
    _write_rows(tmp_path / "ihdp_npci_1.csv", _ihdp_rows(rng), header)
    second = _ihdp_rows(rng)
    _write_rows(tmp_path / "ihdp_npci_2.csv", second)
    dataset = load_ihdp(tmp_path, 1)
    np.testing.assert_array_equal(dataset.covariates, second[:, 5:])
    assert load_ihdp(tmp_path, 0).n == 6
    with pytest.raises(DataIOError, match="第 2 个重复"):
        load_ihdp(tmp_path, 2)


def test_load_ihdp_npz(tmp_path, rng):
    reps = [_ihdp_rows(rng) for _ in range(3)]
    stacked = np.stack(reps, axis=-1)
    path = tmp_path / "ihdp.npz"
    np.savez(
        path,
        x=stacked[:, 5:, :], t=stacked[:, 0, :], yf=stacked[:, 1, :],
        ycf=stacked[:, 2, :], mu0=stacked[:, 3, :], mu1=stacked[:, 4, :],
    )
    dataset = load_dataset(path, 2)
    np.testing.assert_array_equal(dataset.factual_outcome, reps[2][:, 1])
    with pytest.raises(DataIOError):
        load_ihdp(path, 3)


def test_load_ihdp_rejects_bad_treatment(tmp_path, rng):
    rows = _ihdp_rows(rng)
    rows[2, 0] = 2.0
    path = tmp_path / "bad.csv"
    _write_rows(path, rows)
    with pytest.raises(DataIOError, match="第 3 行"):
        load_ihdp(path)


def test_load_table_orders_numeric_labels_numerically(tmp_path):
    path = tmp_path / "trial.csv"
    path.write_text(
        "age,dose,group,y_factual\n"
        "1.0,0.5,10,0.3\n"
        "2.0,0.1,2,0.7\n"
        "3.0,0.2,3,0.1\n"
        "4.0,0.4,2,0.2\n",
        encoding="utf-8",
    )
    dataset = load_table(path, TableSchema())
    assert dataset.group_labels == ("2", "3", "10")
    assert dataset.group.tolist() == [2, 0, 1, 0]
    assert dataset.feature_names == ("age", "dose")
    assert dataset.potential_outcomes is None


def test_load_table_text_labels_and_explicit_columns(tmp_path):
    path = tmp_path / "trial.tsv"
    path.write_text(
        "id\tx\ttumor\tresp\n"
        "a\t1.5\tnsclc\t1\n"
        "b\t2.5\tcolorectal\t0\n",
        encoding="utf-8",
    )
    schema = TableSchema(covariate_columns=["x"], group_column="tumor", outcome_column="resp", delimiter="\t")
    dataset = load_table(path, schema)
    assert dataset.group_labels == ("colorectal", "nsclc")
    assert dataset.covariates[:, 0].tolist() == [1.5, 2.5]


def test_load_table_reports_row_and_column_of_bad_value(tmp_path):
    path = tmp_path / "trial.csv"
    path.write_text("x1,group,y_factual\n1.0,a,0.5\n,b,0.1\n", encoding="utf-8")
    with pytest.raises(DataIOError, match="第 2 行.*'x1'"):
        load_table(path, TableSchema())
    with pytest.raises(DataIOError, match="缺少列"):
        load_table(path, TableSchema(outcome_column="response"))


def test_load_table_checks_consistency(tmp_path):
    path = tmp_path / "trial.csv"
    path.write_text("x1,group,y_factual,y0,y1\n1.0,0,0.5,0.5,0.9\n2.0,1,0.1,0.3,0.2\n", encoding="utf-8")
    with pytest.raises(DatasetValidationError):
        load_table(path, TableSchema(potential_outcome_columns=["y0", "y1"]))


def test_synthetic_run_directory_round_trip(tmp_path):
    synthetic = generate_basket_dataset(SynthConfig.basket(groups=3, units=8, block_dim=2, bias=0.5, seed=1))
    outputs = write_synthetic(synthetic, tmp_path / "sim")
    assert set(outputs) == {"dataset", "potential_outcomes", "kl"}
    loaded = load_synthetic(tmp_path / "sim")
    np.testing.assert_allclose(loaded.covariates, synthetic.dataset.covariates, rtol=1e-12)
    np.testing.assert_array_equal(loaded.group, synthetic.dataset.group)
    np.testing.assert_allclose(loaded.potential_outcomes, synthetic.dataset.potential_outcomes, rtol=1e-12)


def _models(seed=0, d=3, k=2):
    rng = np.random.default_rng(seed)
    gen = build_generator(d, k, 2, 4, 1e-3, 0.0, rng)
    disc = build_discriminator(d, k, 2, 4, 1e-3, 0.0, rng)
    meta = ArchiveMeta(architecture={}, config={"beta": 0.01}, scaler=Scaler.identity(d).to_dict(), seed=seed)
    return gen, disc, meta


def test_archive_round_trip_reproduces_predictions(tmp_path, rng):
    gen, disc, meta = _models()
    checksum = save_model(gen, disc, meta, tmp_path / "model.zip")
    loaded = load_model(tmp_path / "model.zip")
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(
        predict_potential_outcomes(loaded.generator, x).values, predict_potential_outcomes(gen, x).values
    )
    assert loaded.meta.architecture["k"] == 2 and loaded.meta.config == {"beta": 0.01}
    assert loaded.discriminator.heads[0].widths == [4, 2]
    assert save_model(loaded.generator, loaded.discriminator, loaded.meta, tmp_path / "again.zip") == checksum


def test_archive_bytes_are_deterministic(tmp_path):
    gen, disc, meta = _models()
    save_model(gen, disc, meta, tmp_path / "a.zip")
    save_model(gen, disc, meta, tmp_path / "b.zip")
    assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()


def _rewrite(src, dst, transform):
    with zipfile.ZipFile(src) as old, zipfile.ZipFile(dst, "w") as new:
        for name in old.namelist():
            new.writestr(name, transform(name, old.read(name)))


def test_archive_detects_tampered_parameters(tmp_path):
    gen, disc, meta = _models()
    save_model(gen, disc, meta, tmp_path / "model.zip")
    target = "params/generator/head0.out.bias.npy"

    def tamper(name, payload):
        return payload[:-8] + np.float64(42.0).tobytes() if name == target else payload

    _rewrite(tmp_path / "model.zip", tmp_path / "tampered.zip", tamper)
    with pytest.raises(ArchiveIntegrityError, match="校验和"):
        load_model(tmp_path / "tampered.zip")


def test_archive_rejects_other_versions_and_truncation(tmp_path):
    gen, disc, meta = _models()
    save_model(gen, disc, meta, tmp_path / "model.zip")

    def bump(name, payload):
        if name != "meta.json":
            return payload
        header = json.loads(payload)
        header["version"] = 99
        return json.dumps(header).encode()

    _rewrite(tmp_path / "model.zip", tmp_path / "future.zip", bump)
    with pytest.raises(ArchiveVersionError):
        load_model(tmp_path / "future.zip")

    data = (tmp_path / "model.zip").read_bytes()
    (tmp_path / "short.zip").write_bytes(data[: len(data) // 2])
    with pytest.raises(ArchiveIntegrityError):
        load_model(tmp_path / "short.zip")
    with pytest.raises(DataIOError):
        load_model(tmp_path / "missing.zip")


def test_write_report_csv_and_json(tmp_path):
    reports = [
        MetricsReport(dataset_id="ihdp-0", model_id="mtal", replicate=0, seed=1, metrics={"pehe": 0.5}),
        MetricsReport(dataset_id="ihdp-0", model_id="knn", replicate=0, metrics={"pehe": 0.9}),
    ]
    csv_path = write_report(reports, tmp_path / "report.csv")
    lines = (tmp_path / "report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "dataset_id,model_id,replicate,seed,metric,value"
    assert len(lines) == 3 and csv_path.endswith("report.csv")

    write_report(reports, tmp_path / "report.json")
    payload = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert payload["columns"][-1] == "value"
    assert payload["rows"][1]["model_id"] == "knn"
    assert payload["rows"][1]["seed"] is None


def test_write_empty_report_keeps_columns(tmp_path):
    write_report([], tmp_path / "empty.json")
    payload = json.loads((tmp_path / "empty.json").read_text(encoding="utf-8"))
    assert payload == {
        "columns": ["dataset_id", "model_id", "replicate", "seed", "metric", "value"],
        "rows": [],
    }
    with pytest.raises(DataIOError):
        write_report([], tmp_path / "empty.xml")
