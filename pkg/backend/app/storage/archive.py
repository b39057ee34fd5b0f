"""带版本与校验和的模型存档（JSON 元数据加 .npy 参数数组的 zip）"""

import hashlib
import io
import json
import logging
import zipfile
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Union

import numpy as np
from numpy.typing import NDArray

from app.errors import ArchiveIntegrityError, ArchiveVersionError, DataIOError
from app.models.schemas import ArchiveMeta
from app.mtal.discriminator import TFDiscriminator, build_discriminator
from app.mtal.generator import OutcomeGenerator, build_generator

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "mtal-model"
ARCHIVE_VERSION = 1
META_ENTRY = "meta.json"
# 固定时间戳，保证同样的模型写出相同的字节
ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


@dataclass
class LoadedModel:
    generator: OutcomeGenerator
    discriminator: TFDiscriminator
    meta: ArchiveMeta


def architecture_of(gen: OutcomeGenerator, disc: TFDiscriminator) -> Dict[str, object]:
    head = gen.heads[0]
    disc_head = disc.heads[0]
    return {
        "d": gen.input_dim,
        "k": gen.group_count,
        "layers": len(head.representation_layers),
        "width": head.representation_layers[0].out_dim,
        "feature_selection": head.selection is not None,
        "dropout_rate": gen.dropout_rate,
        "lam": gen.lam,
        "alpha": gen.alpha,
        "disc_layers": len(disc_head.layers),
        "disc_top_width": disc_head.widths[0],
        "disc_feature_selection": disc_head.selection is not None,
        "disc_dropout_rate": disc.dropout_rate,
        "disc_lam": disc.lam,
        "disc_alpha": disc.alpha,
    }


def _parameter_entries(gen: OutcomeGenerator, disc: TFDiscriminator) -> Dict[str, NDArray[np.float64]]:
    entries = {f"params/generator/{name}.npy": value for name, value in gen.parameters().items()}
    entries.update({f"params/discriminator/{name}.npy": value for name, value in disc.parameters().items()})
    return entries


def parameters_checksum(entries: Dict[str, NDArray[np.float64]]) -> str:
    """按条目名排序，对名称、形状与原始字节做 sha256"""
    digest = hashlib.sha256()
    for name in sorted(entries):
        array = np.ascontiguousarray(entries[name], dtype=np.float64)
        digest.update(name.encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def _write_entry(archive: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=ZIP_TIMESTAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    archive.writestr(info, payload)


def save_model(
    gen: OutcomeGenerator,
    disc: TFDiscriminator,
    meta: ArchiveMeta,
    path: Union[str, Path]
) -> str:
    """
    写出自描述的模型存档

    Args:
        gen: 生成器
        disc: 判别器
        meta: 训练配置、标准化器、种子、数据集指纹等元数据
        path: 存档路径

    Returns:
        参数校验和
    """
    entries = _parameter_entries(gen, disc)
    checksum = parameters_checksum(entries)
    header = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "checksum": checksum,
        "entries": sorted(entries),
        "meta": meta.model_copy(update={"architecture": architecture_of(gen, disc)}).model_dump(mode="json"),
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as archive:
            _write_entry(archive, META_ENTRY, json.dumps(header, indent=2, sort_keys=True, ensure_ascii=False).encode())
            for name in sorted(entries):
                buffer = io.BytesIO()
                np.lib.format.write_array(buffer, np.ascontiguousarray(entries[name]), allow_pickle=False)
                _write_entry(archive, name, buffer.getvalue())
    except OSError as e:
        raise DataIOError(f"无法写入模型存档 {path}: {e}") from e
    logger.info(f"模型存档已写入 {path} (sha256={checksum[:12]})")
    return checksum


def _rebuild(arch: Dict[str, object]):
    rng = np.random.default_rng(0)
    gen = build_generator(
        int(arch["d"]), int(arch["k"]), int(arch["layers"]), int(arch["width"]),
        float(arch["lam"]), float(arch["alpha"]), rng,
        dropout_rate=float(arch["dropout_rate"]), feature_selection=bool(arch["feature_selection"]),
    )
    disc = build_discriminator(
        int(arch["d"]), int(arch["k"]), int(arch["disc_layers"]), int(arch["disc_top_width"]),
        float(arch["disc_lam"]), float(arch["disc_alpha"]), rng,
        dropout_rate=float(arch["disc_dropout_rate"]), feature_selection=bool(arch["disc_feature_selection"]),
    )
    return gen, disc


def load_model(path: Union[str, Path]) -> LoadedModel:
    """
    读取并校验模型存档

    Raises:
        ArchiveVersionError: 格式或版本不兼容
        ArchiveIntegrityError: 存档损坏或参数校验和不一致
    """
    path = Path(path)
    if not path.exists():
        raise DataIOError(f"模型存档不存在: {path}")
    try:
        with zipfile.ZipFile(path, "r") as archive:
            header = json.loads(archive.read(META_ENTRY).decode())
            if header.get("format") != ARCHIVE_FORMAT or header.get("version") != ARCHIVE_VERSION:
                raise ArchiveVersionError(
                    f"{path}: 存档格式 {header.get('format')} v{header.get('version')} 与当前 "
                    f"{ARCHIVE_FORMAT} v{ARCHIVE_VERSION} 不兼容"
                )
            entries = {}
            for name in header["entries"]:
                entries[name] = np.lib.format.read_array(io.BytesIO(archive.read(name)), allow_pickle=False)
    except ArchiveVersionError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, zlib.error) as e:
        raise ArchiveIntegrityError(f"{path}: 存档已损坏: {e}") from e

    if parameters_checksum(entries) != header["checksum"]:
        raise ArchiveIntegrityError(f"{path}: 参数校验和不一致，存档可能被篡改或损坏")

    meta = ArchiveMeta.model_validate(header["meta"])
    gen, disc = _rebuild(meta.architecture)
    prefix_gen, prefix_disc = "params/generator/", "params/discriminator/"
    gen.load_parameters({
        name[len(prefix_gen):-4]: value for name, value in entries.items() if name.startswith(prefix_gen)
    })
    disc.load_parameters({
        name[len(prefix_disc):-4]: value for name, value in entries.items() if name.startswith(prefix_disc)
    })
    return LoadedModel(generator=gen, discriminator=disc, meta=meta)