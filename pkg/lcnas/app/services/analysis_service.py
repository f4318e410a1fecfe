import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..core.latency import SYMMETRIC_DELTA_LOOKAHEAD, network_latency
from ..core.network import EvalNet, build_eval_net
from ..core.verifier import certify
from ..models.config import VerifyConfig
from ..models.genotype import Genotype, GenotypeParseError, parse_genotype, sample_genotype
from ..models.plan import build_macro_plan
from ..models.reports import LatencyReport, ProbeReport
from ..models.search_space import get_space
from ..utils.validation import require_valid

logger = logging.getLogger(__name__)


class AnalysisService:
    """Static latency analysis and empirical certification"""

    @staticmethod
    def load_genotype(path: Path) -> Genotype:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise GenotypeParseError(f"cannot read {path}: {e.strerror}") from None
        return parse_genotype(text)

    @staticmethod
    def latency(g: Genotype, cells: int, channels: int, causal_stem: bool = False,
                frame_period_ms: float = 10.0, symmetric_deltas: bool = False) -> LatencyReport:
        """Validate then analyse ``g`` stacked into an L-cell plan"""
        space = get_space(g.space)
        require_valid(g, space)
        plan = build_macro_plan(cells, channels, causal_stem=causal_stem,
                                frame_period_in=frame_period_ms)
        lookahead = SYMMETRIC_DELTA_LOOKAHEAD if symmetric_deltas else 0
        return network_latency(plan, g, space, feature_lookahead_frames=lookahead)

    @staticmethod
    def build_for_probe(g: Genotype, cells: int, channels: int, classes: int = 8,
                        causal_stem: bool = False) -> EvalNet:
        net = build_eval_net(g, cells, channels, classes, causal_stem=causal_stem)
        net.eval()
        return net

    @staticmethod
    def verify(g: Genotype, cells: int, channels: int, cfg: VerifyConfig,
               causal_stem: bool = False, classes: int = 8) -> Tuple[LatencyReport, ProbeReport]:
        """Certify the latency claim of ``g`` with a freshly initialized network"""
        report = AnalysisService.latency(g, cells, channels, causal_stem)
        net = AnalysisService.build_for_probe(g, cells, channels, classes, causal_stem)
        probe = certify(net, report, trials=cfg.trials, tolerance=cfg.tolerance,
                        seed=cfg.seed, double=cfg.double_precision)
        return report, probe

    @staticmethod
    def verify_random(space_name: str, count: int, cells: int, channels: int, cfg: VerifyConfig,
                      causal_stem: bool = False, seed: Optional[int] = None
                      ) -> List[Tuple[Genotype, ProbeReport]]:
        """Certify ``count`` random genotypes drawn from a preset"""
        space = get_space(space_name)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        results = []
        for i in range(count):
            g = sample_genotype(space, rng)
            _, probe = AnalysisService.verify(g, cells, channels, cfg, causal_stem)
            logger.info("Random genotype %d/%d: %s", i + 1, count, probe.summary())
            results.append((g, probe))
        return results
