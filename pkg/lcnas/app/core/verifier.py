"""Empirical lookahead probe and certification against the static latency report.

Output frame ``j`` of a network with total time reduction ``r`` is taken to
be final once input frames through ``r * j + r - 1`` are known. The probe
replaces every input frame after ``t + k`` with random values and looks for
any change in output frames final by ``t``; the smallest ``k`` with no change
in any trial is the measured lookahead.
"""
import copy
import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from ..models.reports import LatencyReport, ProbeReport, Verdict
from .engine import deterministic_kernels
from .network import EvalNet

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 8
PERTURBATION_SCALE = 10.0


class ProbeError(RuntimeError):
    """Probe cannot run (training mode, mismatched report) or cannot bound the lookahead."""


class LookaheadOverflow(ProbeError):
    def __init__(self, max_frames: int):
        super().__init__(f"lookahead exceeds {max_frames} frames")
        self.max_frames = max_frames


class Probe:
    """Fixed random inputs for one network; re-used across candidate horizons."""

    def __init__(self, net: nn.Module, max_frames: int, trials: int = 5, tolerance: float = 0.0,
                 seed: int = 0, margin: int = DEFAULT_MARGIN, time_reduction: int = 4,
                 time_dim: int = 1, in_channels: int = 3, freq_bins: int = 40,
                 batch_size: int = 2, double: bool = True):
        if net.training:
            raise ProbeError("network is in training mode; batch statistics couple time steps")
        self.net = copy.deepcopy(net).double() if double else net
        self.dtype = torch.float64 if double else torch.float32
        self.max_frames = max_frames
        self.trials = trials
        self.tolerance = tolerance
        self.time_reduction = time_reduction
        self.time_dim = time_dim
        r = time_reduction
        # last input frame of output frame ``margin``; everything up to it is certified
        self.t = r * margin + r - 1
        self.last_output = margin
        self.frames = r * (max_frames + 2 * margin)
        gen = torch.Generator().manual_seed(seed)
        shape = (batch_size, in_channels, self.frames, freq_bins)
        self.inputs = [torch.randn(shape, generator=gen, dtype=self.dtype) for _ in range(trials)]
        self.noise = [PERTURBATION_SCALE * torch.randn(shape, generator=gen, dtype=self.dtype)
                      for _ in range(trials)]
        self._baselines: Optional[List[torch.Tensor]] = None

    def _run(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            out = self.net(x)
        return out.narrow(self.time_dim, 0, self.last_output + 1)

    def baselines(self) -> List[torch.Tensor]:
        if self._baselines is None:
            self._baselines = [self._run(x) for x in self.inputs]
        return self._baselines

    def deviation(self, first: int, last: Optional[int] = None) -> Tuple[float, bool]:
        """Largest in-horizon change when input frames ``first..last`` are replaced."""
        last = self.frames - 1 if last is None else last
        worst, changed = 0.0, False
        for x, noise, base in zip(self.inputs, self.noise, self.baselines()):
            x2 = x.clone()
            x2[:, :, first:last + 1] = noise[:, :, first:last + 1]
            diff = (self._run(x2) - base).abs()
            dev = float(diff.max()) if diff.numel() else 0.0
            worst = max(worst, dev)
            changed = changed or dev > self.tolerance
        return worst, changed

    def holds(self, k: int) -> bool:
        """No certified output moves when frames after ``t + k`` change."""
        _, changed = self.deviation(self.t + k + 1)
        return not changed

    def search(self) -> int:
        if not self.holds(self.max_frames):
            raise LookaheadOverflow(self.max_frames)
        lo, hi = 0, self.max_frames
        while lo < hi:
            mid = (lo + hi) // 2
            if self.holds(mid):
                hi = mid
            else:
                lo = mid + 1
        return lo


def measure_lookahead(net: nn.Module, max_frames: int = 64, trials: int = 5,
                      tolerance: float = 0.0, seed: int = 0, **probe_options) -> int:
    """Smallest k such that frames after t + k never move a certified output."""
    with deterministic_kernels():
        return Probe(net, max_frames, trials, tolerance, seed, **probe_options).search()


def certify(net: EvalNet, report: LatencyReport, trials: int = 5, tolerance: float = 0.0,
            seed: int = 0, max_frames: Optional[int] = None, double: bool = True) -> ProbeReport:
    """Check the static claim against the probe, with a sensitivity witness at the horizon."""
    if net.genotype_hash != report.genotype_hash:
        raise ProbeError(f"report is for genotype {report.genotype_hash[:12]}, "
                         f"network was built from {net.genotype_hash[:12]}")
    if net.plan.total_cells != report.total_cells:
        raise ProbeError(f"report covers {report.total_cells} cells, network has "
                         f"{net.plan.total_cells}")
    # delta features are computed before the network and never probed here
    claimed = report.total_input_frames - report.feature_lookahead_frames
    max_frames = max_frames or max(2 * claimed, claimed + DEFAULT_MARGIN)
    notes = []
    with deterministic_kernels():
        probe = Probe(net, max_frames, trials, tolerance, seed,
                      freq_bins=net.plan.freq_bins, in_channels=net.plan.in_channels,
                      double=double)
        try:
            measured = probe.search()
        except LookaheadOverflow:
            measured = max_frames + 1
            notes.append(f"lookahead exceeds the {max_frames}-frame probe window")
        witness_frame = probe.t + claimed
        _, witness = probe.deviation(witness_frame, witness_frame)
        max_dev = 0.0
        if claimed <= max_frames:
            max_dev, _ = probe.deviation(probe.t + claimed + 1)

    if not witness:
        notes.append(f"perturbing frame t+{claimed} changed no certified output")
    if measured != claimed:
        notes.append(f"measured {measured} frames, report claims {claimed}")
    verdict = Verdict.PASS if measured == claimed and witness else Verdict.FAIL
    result = ProbeReport(genotype_hash=report.genotype_hash, claimed_frames=claimed,
                         measured_frames=measured, trials=trials, max_deviation=max_dev,
                         witness_fired=witness, verdict=verdict, notes=notes)
    logger.info("Certify %s: %s", report.genotype_hash[:12], result.summary())
    return result
