import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import yaml
from pydantic import ValidationError

from homokin.errors import ConfigError
from homokin.models import ExperimentConfig, RunManifest

TRACKED_PACKAGES = ("homokin", "numpy", "scipy", "pydantic")


def load_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    from homokin.parser import ConfigParser

    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return config_from_dict(ConfigParser.apply_overrides(data, overrides))


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e))


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(exclude_none=True), sort_keys=False, allow_unicode=True)


def save_config(config: ExperimentConfig, path: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; output_dir does not take part"""
    data = config.model_dump(exclude={"output_dir"})
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class RunStorage:
    """运行目录存储：每个运行一个子目录，内含 manifest.json 与 CSV/JSON 输出"""

    MANIFEST = "manifest.json"

    def __init__(self, base_dir: str = "runs"):
        self.base_dir = Path(base_dir)
        self.base_dir.mkdir(parents=True, exist_ok=True)

    def _run_path(self, run_id: str) -> Optional[Path]:
        """run_id 必须是 base_dir 下的单级目录名"""
        if not run_id or run_id in (".", "..") or Path(run_id).name != run_id:
            return None
        path = (self.base_dir / run_id).resolve()
        if path.parent != self.base_dir.resolve():
            return None
        return path

    def _file_path(self, run_id: str, name: str) -> Optional[Path]:
        directory = self._run_path(run_id)
        if directory is None or not name or name in (".", "..") or Path(name).name != name:
            return None
        return directory / name

    def run_dir(self, run_id: str) -> Path:
        path = self._run_path(run_id)
        if path is None:
            raise ValueError(f"invalid run id: {run_id!r}")
        path.mkdir(parents=True, exist_ok=True)
        return path

    def exists(self, run_id: str) -> bool:
        path = self._run_path(run_id)
        return path is not None and (path / self.MANIFEST).exists()

    def save_manifest(self, manifest: RunManifest) -> None:
        path = self.run_dir(manifest.run_id) / self.MANIFEST
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest.model_dump(), f, ensure_ascii=False, indent=2)

    def load_manifest(self, run_id: str) -> Optional[RunManifest]:
        path = self._file_path(run_id, self.MANIFEST)
        if path is None or not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest(**json.load(f))

    def list_runs(self) -> List[RunManifest]:
        runs = []
        for path in sorted(self.base_dir.glob(f"*/{self.MANIFEST}")):
            manifest = self.load_manifest(path.parent.name)
            if manifest is not None:
                runs.append(manifest)
        return runs

    def write_file(self, run_id: str, name: str, content: str) -> str:
        self.run_dir(run_id)
        path = self._file_path(run_id, name)
        if path is None:
            raise ValueError(f"invalid file name: {name!r}")
        path.write_text(content, encoding="utf-8", newline="")
        return str(path)

    def save_json(self, run_id: str, name: str, data) -> str:
        return self.write_file(run_id, name, json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n")

    def read_file(self, run_id: str, name: str) -> Optional[bytes]:
        path = self._file_path(run_id, name)
        if path is None or not path.is_file():
            return None
        return path.read_bytes()

    def list_files(self, run_id: str) -> List[str]:
        directory = self._run_path(run_id)
        if directory is None or not directory.exists():
            return []
        return sorted(p.name for p in directory.iterdir() if p.is_file() and p.name != self.MANIFEST)
