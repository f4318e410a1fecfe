import logging
import time
from pathlib import Path

from ..core.search import run_search
from ..models.config import ToolkitConfig, dump_config
from ..models.manifest import SearchResult
from ..utils.repro import write_manifest
from .data_service import DataService

logger = logging.getLogger(__name__)


class SearchService:
    """Runs a full search into a run directory"""

    @staticmethod
    def run(cfg: ToolkitConfig, out_dir: Path) -> SearchResult:
        started = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)
        dataset = DataService.load_dataset(cfg.data)
        loaded = time.perf_counter()
        result = run_search(cfg, dataset, out_dir)
        finished = time.perf_counter()
        chosen = result.selected
        write_manifest(
            out_dir, "search", dump_config(cfg), seeds=cfg.search.seeds,
            inputs=dict(DataService.input_hashes(cfg.data), data=dataset.fingerprint()),
            timings={"data": loaded - started, "search": finished - loaded},
            extra={
                "selected": chosen.record.run_id,
                "genotype_hash": chosen.record.genotype_hash,
                "latency_ms": chosen.latency.total_ms,
            },
        )
        logger.info("Search finished in %.1fs; artifacts in %s", finished - started, out_dir)
        return result
