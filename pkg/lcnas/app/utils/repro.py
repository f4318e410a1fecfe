import hashlib
import platform
from importlib import metadata
from pathlib import Path
from typing import Dict, Iterable, Union

from .. import __version__
from ..models.manifest import RunManifest

TRACKED_PACKAGES = ("torch", "numpy", "networkx", "pydantic", "typer")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def toolkit_versions(packages: Iterable[str] = TRACKED_PACKAGES) -> Dict[str, str]:
    versions = {"lcnas": __version__, "python": platform.python_version()}
    for name in packages:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "missing"
    return versions


def list_outputs(run_dir: Path) -> list:
    """Files under ``run_dir`` relative to it, sorted; the manifest itself excluded."""
    return sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                  if p.is_file() and p.name != "manifest.json")


def write_manifest(run_dir: Path, command: str, config_text: str, seeds: Iterable[int] = (),
                   inputs: Dict[str, str] = None, timings: Dict[str, float] = None,
                   extra: Dict = None) -> Path:
    """Write ``manifest.json`` describing everything else in ``run_dir``."""
    manifest = RunManifest(
        command=command,
        config=config_text,
        config_hash=sha256_text(config_text),
        seeds=list(seeds),
        versions=toolkit_versions(),
        inputs=inputs or {},
        outputs=list_outputs(run_dir),
        timings=timings or {},
        extra=extra or {},
    )
    path = run_dir / "manifest.json"
    path.write_text(manifest.to_json())
    return path
