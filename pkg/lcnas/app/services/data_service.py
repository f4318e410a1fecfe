import json
import logging
import time
from pathlib import Path
from typing import Dict, Optional

from ..core.data import Dataset, gen_synthetic, load_features, write_features
from ..models.config import DataConfig, DataSource, SyntheticTaskConfig, ToolkitConfig, dump_config
from ..utils.repro import sha256_file, write_manifest

logger = logging.getLogger(__name__)

FEATURES_NAME = "features.bin"


class DatasetMissing(FileNotFoundError):
    """Configured feature file does not exist."""


class DataService:
    """Dataset loading and generation"""

    @staticmethod
    def load_dataset(data: DataConfig) -> Dataset:
        """Synthetic data from the config, or the configured feature file"""
        if data.source == DataSource.SYNTHETIC:
            return gen_synthetic(data.synthetic, data.delta_mode)
        path = Path(data.path)
        if not path.is_file():
            raise DatasetMissing(f"dataset not found: {path}")
        dataset = load_features(path, data.delta_mode, data.max_length)
        logger.info("Loaded %d utterances from %s", len(dataset), path)
        return dataset

    @staticmethod
    def input_hashes(data: DataConfig) -> Dict[str, str]:
        if data.source == DataSource.PATH and data.path:
            return {"features": sha256_file(data.path)}
        return {}

    @staticmethod
    def generate(synthetic: SyntheticTaskConfig, out_dir: Path,
                 cfg: Optional[ToolkitConfig] = None) -> Path:
        """Write a synthetic feature file plus a JSON sidecar with the labelling thresholds"""
        started = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = cfg or ToolkitConfig()
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"synthetic": synthetic})})
        dataset = gen_synthetic(synthetic, cfg.data.delta_mode)
        path = write_features(dataset, out_dir / FEATURES_NAME)
        sidecar = dict(dataset.metadata, fingerprint=dataset.fingerprint(),
                       utterances=len(dataset))
        (out_dir / "features.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
        write_manifest(out_dir, "gen-data", dump_config(cfg), seeds=[synthetic.seed],
                       timings={"total": time.perf_counter() - started},
                       extra={"fingerprint": sidecar["fingerprint"]})
        logger.info("Wrote %d utterances to %s", len(dataset), path)
        return path
