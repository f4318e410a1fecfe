import logging
import time
from pathlib import Path
from typing import List, Optional, Tuple

from ..core.data import split_for_search
from ..core.engine import seed_everything
from ..core.latency import network_latency
from ..core.network import build_eval_net
from ..core.training import logistic_baseline, train_eval_net
from ..models.config import ToolkitConfig, dump_config
from ..models.genotype import Genotype, encode_genotype
from ..models.search_space import SpaceMismatchError, get_space
from ..utils.repro import sha256_text, write_manifest
from .data_service import DataService

logger = logging.getLogger(__name__)


class TrainService:
    """Evaluation-network training"""

    @staticmethod
    def train_eval(g: Genotype, cfg: ToolkitConfig, out_dir: Path, resume: bool = False,
                   expected_space: Optional[str] = None) -> List[Tuple]:
        """Train ``g`` at the configured (L, C) on the weight+alpha halves; validate on the holdout.

        ``expected_space`` rejects a genotype from another search space before
        any data is loaded.
        """
        started = time.perf_counter()
        space = get_space(g.space)
        if expected_space is not None and get_space(expected_space).name != g.space:
            raise SpaceMismatchError(f"genotype is for {g.space}, not {expected_space}")
        net_cfg = cfg.network
        dataset = DataService.load_dataset(cfg.data)
        seed_everything(cfg.train.seed)
        net = build_eval_net(g, net_cfg.cells, net_cfg.channels, dataset.classes,
                             hidden=net_cfg.hidden, causal_stem=net_cfg.causal_stem)
        weight_set, alpha_set, val_set = split_for_search(dataset, cfg.data.split_seed,
                                                          cfg.data.holdout)
        train_set = weight_set.merged(alpha_set)

        if not resume:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "genotype.json").write_text(encode_genotype(g))
        rows = train_eval_net(net, train_set, val_set, cfg.train, out_dir, resume=resume)
        trained = time.perf_counter()

        baseline = logistic_baseline(train_set, val_set, window=cfg.train.baseline_window,
                                     seed=cfg.train.seed)
        latency = network_latency(net.plan, g, space, dataset.feature_lookahead_frames)
        (out_dir / "latency.json").write_text(latency.to_json())
        write_manifest(
            out_dir, "train-eval", dump_config(cfg), seeds=[cfg.train.seed],
            inputs=dict(DataService.input_hashes(cfg.data), data=dataset.fingerprint(),
                        genotype=sha256_text(encode_genotype(g))),
            timings={"train": trained - started, "total": time.perf_counter() - started},
            extra={
                "latency": latency.model_dump(mode="json"),
                "baseline_val_acc": baseline,
                "final_val_acc": float(rows[-1][4]) if rows else None,
            },
        )
        return rows
