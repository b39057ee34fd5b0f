import json
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Union

from app import __version__
from app.errors import DataIOError
from app.models.schemas import RunManifest

MANIFEST_FILE = "manifest.json"


class ManifestRecorder:
    """记录一次命令运行的配置、种子、输入输出与耗时"""

    def __init__(self, command: str, argv: List[str]):
        self.manifest = RunManifest(
            command=command,
            argv=list(argv),
            version=__version__,
            started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )
        self._start = time.perf_counter()

    def config(self, values: Dict) -> None:
        self.manifest.config.update(values)

    def seed(self, name: str, value: int) -> None:
        self.manifest.seeds[name] = int(value)

    def input(self, name: str, path: Union[str, Path]) -> None:
        self.manifest.inputs[name] = str(path)

    def output(self, name: str, path: Union[str, Path]) -> None:
        self.manifest.outputs[name] = str(path)

    def write(self, out_dir: Union[str, Path]) -> str:
        self.manifest.elapsed_seconds = round(time.perf_counter() - self._start, 3)
        path = Path(out_dir) / MANIFEST_FILE
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(
                json.dumps(self.manifest.model_dump(mode="json"), indent=2, ensure_ascii=False) + "\n",
                encoding="utf-8",
            )
        except OSError as e:
            raise DataIOError(f"无法写入运行清单 {path}: {e}") from e
        return str(path)


def read_manifest(path: Union[str, Path]) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataIOError(f"运行清单不存在: {path}") from e
    except ValueError as e:
        raise DataIOError(f"运行清单格式错误 {path}: {e}") from e
