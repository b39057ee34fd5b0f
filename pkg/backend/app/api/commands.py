"""子命令处理函数，每个函数返回进程退出码"""

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.api.experiments import penalty_heat_table, run_panel
from app.api.manifest import ManifestRecorder, read_manifest
from app.errors import ConfigError, DataError, DataIOError
from app.evaluation.baselines import knn_impute, mean_impute
from app.evaluation.metrics import (
    ate_error,
    mse_potential,
    multi_metric,
    pehe,
    reports_to_frame,
    summarize_reports,
    tgor,
    tgor_borrowed,
)
from app.models.dataset import Dataset, Scaler, Split, factual_matrix
from app.models.schemas import (
    ArchiveMeta,
    KnnConfig,
    MetricsReport,
    SweepGrid,
    SynthConfig,
    TableSchema,
    TrainConfig,
    build_config,
)
from app.mtal.gradcheck import run_gradient_check
from app.mtal.sweep import best_config, run_sweep, sample_grid
from app.mtal.training import impute_counterfactuals, split_for, train
from app.storage.archive import load_model, save_model
from app.storage.loaders import dataset_fingerprint, load_dataset, schema_fingerprint, write_synthetic
from app.storage.reports import write_report, write_table
from app.synth.basket import generate_basket_dataset
from app.synth.correlation import correlation_preset

logger = logging.getLogger(__name__)

TRUTH_METRICS = ("pehe", "ate", "mse")
ALL_METRICS = TRUTH_METRICS + ("tgor",)

SIMULATE_DEFAULTS = {
    "groups": 2,
    "units": 500,
    "block_dim": 10,
    "bias": 0.0,
    "rho_max": 0.5,
    "rho_min": 0.1,
    "gamma": 1.0,
    "cross_block_delta": 0.0,
    "preset": None,
}


def _config_file(path: Optional[str]) -> Dict:
    if not path:
        return {}
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataIOError(f"配置文件不存在: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件 {path} 不是合法 JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"配置文件 {path} 顶层必须是对象")
    return values


def _load_input(args: argparse.Namespace, recorder: ManifestRecorder) -> Dataset:
    """按 --schema 列定义（可选）读取数据集并记入清单"""
    schema = None
    if getattr(args, "schema", None):
        schema = build_config(TableSchema, **_config_file(args.schema))
        recorder.input("schema", args.schema)
    recorder.input("dataset", args.dataset)
    return load_dataset(args.dataset, args.replicate, schema)


def _merge(base: Dict, overrides: Dict) -> Dict:
    merged = dict(base)
    merged.update({key: value for key, value in overrides.items() if value is not None})
    return merged


def train_config_from(args: argparse.Namespace) -> TrainConfig:
    """配置文件打底，命令行参数覆盖"""
    values = _config_file(getattr(args, "config", None))
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    overrides = {
        "beta": getattr(args, "beta", None),
        "lam": getattr(args, "lam", None),
        "alpha": getattr(args, "alpha", None),
        "layers": getattr(args, "layers", None),
        "width": getattr(args, "width", None),
        "units_per_group": getattr(args, "units_per_group", None),
        "generator_steps": getattr(args, "generator_steps", None),
        "max_epochs": getattr(args, "max_epochs", None),
        "patience": getattr(args, "patience", None),
        "warmup_epochs": getattr(args, "warmup_epochs", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "dropout_rate": getattr(args, "dropout", None),
        "seed": getattr(args, "seed", None),
    }
    if getattr(args, "no_feature_selection", False):
        overrides["feature_selection"] = False
    return build_config(TrainConfig, **_merge(values, overrides))


def synth_config_from(args: argparse.Namespace) -> SynthConfig:
    values = _merge(SIMULATE_DEFAULTS, _config_file(args.config))
    values = _merge(values, {
        "groups": args.groups,
        "units": args.units,
        "block_dim": args.block_dim,
        "bias": args.bias,
        "rho_max": args.rho_max,
        "rho_min": args.rho_min,
        "gamma": args.gamma,
        "cross_block_delta": args.delta,
        "preset": args.preset,
    })
    unknown = set(values) - set(SIMULATE_DEFAULTS)
    if unknown:
        raise ConfigError(f"simulate 配置含未知字段: {sorted(unknown)}")
    preset = values.pop("preset")
    config = SynthConfig.basket(seed=args.seed, **values)
    if preset:
        spec = correlation_preset(preset, config.spec.block_dims, gamma=values["gamma"])
        config = config.model_copy(update={"spec": spec})
    return config


def cmd_simulate(args: argparse.Namespace) -> int:
    """生成合成篮子试验数据：数据表、真实潜在结果表、KL 表与运行清单"""
    recorder = ManifestRecorder("simulate", args.argv)
    config = synth_config_from(args)
    recorder.config(config.model_dump(mode="json"))
    recorder.seed("outcome_seed", config.outcome_seed)
    recorder.seed("covariate_seed", config.covariate_seed)

    synthetic = generate_basket_dataset(config)
    outputs = write_synthetic(synthetic, args.out)
    for name, path in outputs.items():
        recorder.output(name, path)
    manifest = recorder.write(args.out)

    print(f"合成数据: K={config.group_count}, n={synthetic.dataset.n}, d={synthetic.dataset.d}")
    print(synthetic.kl_table.to_string(index=False))
    for path in list(outputs.values()) + [manifest]:
        print(f"  -> {path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """训练 MTAL，写出模型存档、训练历史与运行清单"""
    recorder = ManifestRecorder("train", args.argv)
    dataset = _load_input(args, recorder)
    config = train_config_from(args)
    recorder.config(config.model_dump(mode="json"))
    recorder.seed("seed", config.seed)

    result = train(dataset, config)
    out = Path(args.out)
    meta = ArchiveMeta(
        architecture={},
        config=config.model_dump(mode="json"),
        scaler=result.scaler.to_dict(),
        seed=config.seed,
        dataset_fingerprint=dataset_fingerprint(dataset),
        schema_fingerprint=schema_fingerprint(dataset),
        split={name: getattr(result.split, name).tolist() for name in ("train", "validation", "test")},
        feature_names=list(dataset.feature_names) if dataset.feature_names else None,
        group_labels=list(dataset.group_labels) if dataset.group_labels else None,
    )
    save_model(result.generator, result.discriminator, meta, out / "model.zip")
    history = pd.DataFrame(
        result.history.to_dict()["records"],
        columns=["epoch", "generator_loss", "discriminator_loss", "validation_mse", "discriminator_accuracy"],
    )
    recorder.output("model", out / "model.zip")
    recorder.output("history", write_table(history, out / "history.csv"))
    manifest = recorder.write(out)

    print(f"训练完成: {len(result.history)} 轮，最佳轮次 {result.history.best_epoch}，早停 {result.history.stopped_early}")
    print(f"判别器准确率自峰值下降 {result.history.accuracy_drop():.3f}")
    print(f"  -> {out / 'model.zip'}")
    print(f"  -> {out / 'history.csv'}")
    print(f"  -> {manifest}")
    return 0


def _requested_metrics(names: Optional[str], dataset: Dataset) -> List[str]:
    if not names or names == "auto":
        return list(ALL_METRICS) if dataset.potential_outcomes is not None else ["tgor"]
    requested = [n.strip() for n in names.split(",") if n.strip()]
    unknown = [n for n in requested if n not in ALL_METRICS]
    if unknown:
        raise ConfigError(f"未知指标 {unknown}，可选: {', '.join(ALL_METRICS)}")
    return requested


def compute_metrics(
    dataset: Dataset,
    estimate: np.ndarray,
    names: List[str],
    response_threshold: Optional[float] = None
) -> Tuple[Dict[str, float], Dict[str, str]]:
    """
    按名称计算指标

    Args:
        dataset: 评估用数据集（已取好子集）
        estimate: n × k 估计矩阵；未推断的单元格为 NaN
        names: pehe / ate / mse / tgor 的子集
        response_threshold: TGOR 二值化阈值

    Returns:
        (指标字典, 元数据字典)
    """
    metrics: Dict[str, float] = {}
    metadata: Dict[str, str] = {}
    k = dataset.group_count
    effect_truth = dataset.noiseless_outcomes if dataset.noiseless_outcomes is not None else dataset.potential_outcomes
    for name in names:
        if name in TRUTH_METRICS and dataset.potential_outcomes is None:
            raise DataError(f"指标 {name} 需要真实潜在结果，但数据集 {dataset.name} 没有提供")
        if name in TRUTH_METRICS and not np.all(np.isfinite(estimate)):
            raise DataError(f"指标 {name} 需要完整的估计矩阵，请使用能推断反事实结果的估计器")
        if name in ("pehe", "ate"):
            metadata["truth"] = "noiseless" if dataset.noiseless_outcomes is not None else "noisy"
            if k == 2 and name == "pehe":
                metrics["pehe"], metrics["sqrt_pehe"] = pehe(effect_truth, estimate)
            elif k == 2:
                metrics["ate"] = ate_error(effect_truth, estimate)
            elif name == "pehe":
                metrics["mpehe"] = multi_metric(effect_truth, estimate, "pehe")
                metrics["sqrt_mpehe"] = float(np.sqrt(metrics["mpehe"]))
            else:
                metrics["mate"] = multi_metric(effect_truth, estimate, "ate")
        elif name == "mse":
            metrics["mse"] = mse_potential(dataset.potential_outcomes, estimate)
        elif name == "tgor":
            complete = bool(np.all(np.isfinite(estimate)))
            if complete:
                metrics["tgor_mu"] = tgor(estimate, dataset, "mutation", response_threshold)
            else:
                logger.info("估计矩阵只含事实结果，只计算 TGOR_tu")
            labels = dataset.group_labels or tuple(str(t) for t in range(k))
            for t in range(k):
                if not np.any(dataset.group == t):
                    logger.warning(f"第 {t} 组在评估子集中没有样本，跳过 TGOR_tu")
                    continue
                metrics[f"tgor_tu_{labels[t]}"] = tgor(estimate, dataset, t, response_threshold)
                if complete:
                    metrics[f"tgor_borrowed_{labels[t]}"] = tgor_borrowed(estimate, t, response_threshold)
    return metrics, metadata


def _estimate(
    estimator: str,
    dataset: Dataset,
    split: Split,
    model=None,
    neighbors: int = 5
) -> np.ndarray:
    if estimator == "mtal":
        scaler = Scaler.from_dict(model.meta.scaler)
        return impute_counterfactuals(model.generator, dataset, scaler).values
    if estimator == "knn":
        return knn_impute(dataset, split, build_config(KnnConfig, neighbor_count=neighbors)).values
    if estimator == "mean":
        return mean_impute(dataset, split).values
    if estimator == "factual":
        return factual_matrix(dataset)
    raise ConfigError(f"未知估计器: {estimator}")


def _evaluation_split(args: argparse.Namespace, dataset: Dataset, model) -> Tuple[Split, str]:
    """存档的数据集指纹匹配时沿用训练划分，默认评估测试集；否则评估全部单元"""
    if model is None:
        return split_for(dataset, build_config(TrainConfig, seed=args.seed)), args.subset or "test"
    meta = model.meta
    if meta.split is not None and meta.dataset_fingerprint == dataset_fingerprint(dataset):
        split = Split(**{name: np.asarray(idx, dtype=np.int64) for name, idx in meta.split.items()})
        return split, args.subset or "test"
    if meta.schema_fingerprint and meta.schema_fingerprint != schema_fingerprint(dataset):
        logger.warning("数据集的列结构与训练时不同")
    logger.info("数据集与训练时不同，评估全部单元")
    config = build_config(TrainConfig, **meta.config)
    split = split_for(dataset, config)
    return split, args.subset or "all"


def cmd_evaluate(args: argparse.Namespace) -> int:
    """推断反事实并计算指标，写出 MetricsReport 表"""
    recorder = ManifestRecorder("evaluate", args.argv)
    dataset = _load_input(args, recorder)
    recorder.seed("seed", args.seed)

    model = None
    if args.model:
        model = load_model(args.model)
        recorder.input("model", args.model)
    estimators = [args.estimator or ("mtal" if model is not None else "knn")]
    if args.baselines:
        estimators += [e for e in ("knn", "mean") if e not in estimators]
    if "mtal" in estimators and model is None:
        raise ConfigError("mtal 估计器需要 --model 模型存档")

    split, subset = _evaluation_split(args, dataset, model)
    indices = split.subset(subset)
    if indices.size == 0:
        raise DataError(f"评估子集 {subset} 为空")
    names = _requested_metrics(args.metrics, dataset)
    evaluated = dataset.subset(indices)

    reports = []
    for estimator in estimators:
        estimate = _estimate(estimator, dataset, split, model, args.neighbors)[indices]
        metrics, metadata = compute_metrics(evaluated, estimate, names, args.response_threshold)
        metadata.update({"subset": subset, "estimator": estimator})
        reports.append(build_config(
            MetricsReport,
            dataset_id=dataset.name,
            model_id=estimator,
            replicate=args.replicate,
            seed=args.seed,
            metrics=metrics,
            metadata=metadata,
        ))

    out = Path(args.out)
    path = write_report(reports, out / f"report.{args.format}", args.format)
    recorder.config({"metrics": names, "estimators": estimators, "subset": subset})
    recorder.output("report", path)
    manifest = recorder.write(out)

    print(reports_to_frame(reports).to_string(index=False))
    print(f"  -> {path}")
    print(f"  -> {manifest}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """在随机小网络上核对反向传播梯度；任一检查失败时返回非零"""
    recorder = ManifestRecorder("gradcheck", args.argv)
    seeds = list(range(args.seed, args.seed + args.count))
    rows = []
    for seed in seeds:
        report = run_gradient_check(seed, tolerance=args.tolerance, corrupt=args.corrupt)
        print(report.summary())
        for check, error in report.max_errors.items():
            rows.append({"seed": seed, "check": check, "max_relative_error": error, "passed": error < args.tolerance})
    table = pd.DataFrame(rows, columns=["seed", "check", "max_relative_error", "passed"])
    out = Path(args.out)
    recorder.seed("seed", args.seed)
    recorder.config({"count": args.count, "tolerance": args.tolerance, "corrupt": args.corrupt})
    recorder.output("gradcheck", write_table(table, out / "gradcheck.csv"))
    recorder.write(out)

    failed = int((~table["passed"]).sum())
    worst = float(table["max_relative_error"].max())
    if failed:
        print(f"[失败] {failed} 项检查超出阈值 {args.tolerance:g}，最大相对误差 {worst:.3e}")
        return 1
    print(f"[通过] {len(seeds)} 个种子全部通过，最大相对误差 {worst:.3e}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """按网格训练并按验证集事实 MSE 排序；有格点失败时返回非零"""
    recorder = ManifestRecorder("sweep", args.argv)
    dataset = _load_input(args, recorder)
    base = train_config_from(args)
    grid = build_config(SweepGrid, **_config_file(args.grid)) if args.grid else SweepGrid()
    seeds = args.seeds or [args.seed]
    cells = sample_grid(grid, base, args.sample, seed=args.seed)
    recorder.config({"base": base.model_dump(mode="json"), "grid": grid.model_dump(), "sample": args.sample})
    recorder.seed("seed", args.seed)

    table = run_sweep(dataset, cells, seeds, workers=args.workers)
    out = Path(args.out)
    recorder.output("sweep", write_table(table, out / "sweep.csv"))
    failures = int((table["error"] != "").sum())
    if failures < len(table):
        best = best_config(table, base)
        best_path = out / "best_config.json"
        best_path.write_text(json.dumps(best.model_dump(mode="json", by_alias=True), indent=2) + "\n", encoding="utf-8")
        recorder.output("best_config", best_path)
        print(f"最佳配置: {best.model_dump(by_alias=True)}")
    recorder.write(out)

    print(table.head(10).to_string(index=False))
    print(f"  -> {out / 'sweep.csv'}")
    if failures:
        print(f"[失败] {failures} 个格点训练失败，详见 error 列")
        return 1
    return 0


def cmd_experiment(args: argparse.Namespace) -> int:
    """生成一个绘图面板所需的表格（原始结果与均值 ± 标准差汇总）"""
    recorder = ManifestRecorder("experiment", args.argv)
    base = train_config_from(args)
    seeds = args.seeds or list(range(args.seed, args.seed + 10))
    recorder.config({"panel": args.panel, "base": base.model_dump(mode="json"), "units": args.units,
                     "block_dim": args.block_dim, "bias": args.bias, "seeds": seeds})
    raw, summary = run_panel(args.panel, seeds, base, args.units, args.block_dim, args.bias)

    out = Path(args.out)
    recorder.output("raw", write_table(raw, out / f"{args.panel}_raw.csv"))
    recorder.output("summary", write_table(summary, out / f"{args.panel}_summary.csv"))
    if args.panel == "penalty":
        heat = penalty_heat_table(summary).reset_index()
        recorder.output("heat", write_table(heat, out / "penalty_heat.csv"))
    recorder.write(out)

    print(summary.to_string(index=False))
    return 0


def cmd_rerun(args: argparse.Namespace) -> int:
    """按运行清单记录的参数重新执行命令"""
    manifest = read_manifest(args.manifest)
    if manifest.command == "rerun":
        raise ConfigError("不能重放 rerun 命令自身")
    from app.main import run

    logger.info(f"重放 {manifest.command}: {' '.join(manifest.argv)}")
    return run(manifest.argv)


def summarize_report_files(paths: List[str]) -> pd.DataFrame:
    """把多个报告文件合并后按 (数据集, 模型, 指标) 汇总均值 ± 标准差"""
    reports = []
    for path in paths:
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise DataIOError(f"无法读取报告 {path}: {e}") from e
        missing = [c for c in ("dataset_id", "model_id", "replicate", "metric", "value") if c not in frame.columns]
        if missing:
            raise DataIOError(f"{path} 不是指标报告，缺少列 {missing}")
        for (dataset_id, model_id, replicate), group in frame.groupby(
            ["dataset_id", "model_id", "replicate"], sort=False
        ):
            reports.append(MetricsReport(
                dataset_id=str(dataset_id),
                model_id=str(model_id),
                replicate=int(replicate),
                metrics=dict(zip(group["metric"], group["value"].astype(float))),
            ))
    return summarize_reports(reports)


def cmd_summarize(args: argparse.Namespace) -> int:
    """汇总多次重复的报告"""
    summary = summarize_report_files(args.reports)
    if args.out:
        write_table(summary, Path(args.out) / "summary.csv")
    print(summary.to_string(index=False))
    return 0
