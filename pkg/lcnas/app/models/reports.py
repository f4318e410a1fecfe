import enum
import json
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .genotype import CellType


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    rule: str
    cell: CellType
    message: str
    node: Optional[int] = None
    edge: Optional[Tuple[int, int]] = None

    def __str__(self):
        where = f"{self.cell.value} cell"
        if self.edge is not None:
            where += f" edge {self.edge[0]}->{self.edge[1]}"
        elif self.node is not None:
            where += f" node {self.node}"
        return f"[{self.rule}] {where}: {self.message}"


class ValidationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    violations: Tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def rules(self) -> List[str]:
        return sorted({v.rule for v in self.violations})


class CellLatency(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    cell_type: CellType
    latency_ms: float
    latency_frames: int
    input_frame_period_ms: float


class PathHop(BaseModel):
    """One edge of a reduction cell's critical path."""
    model_config = ConfigDict(frozen=True)

    cell_index: int
    src: int
    dst: int
    op: str
    cost_ms: float


class LatencyReport(BaseModel):
    """Algorithmic latency of a genotype stacked into a macro plan.

    Frames (at the input frame rate) are the ground truth; ms are derived.
    """
    model_config = ConfigDict(frozen=True)

    genotype_hash: str
    space: str
    total_cells: int
    frame_period_in: float
    stem_ms: float
    feature_lookahead_frames: int = 0
    total_ms: float
    total_input_frames: int
    per_cell: Tuple[CellLatency, ...]
    critical_path: Tuple[PathHop, ...] = ()

    @model_validator(mode='after')
    def units_agree(self):
        if abs(self.total_input_frames * self.frame_period_in - self.total_ms) > 1e-9:
            raise ValueError('total_ms must equal total_input_frames * frame_period_in')
        return self

    @property
    def reduction_latencies_ms(self) -> List[float]:
        return [c.latency_ms for c in self.per_cell if c.cell_type == CellType.REDUCTION]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def summary(self) -> str:
        parts = [f"{self.stem_ms:g}"] + [f"{ms:g}" for ms in self.reduction_latencies_ms]
        lines = [
            f"space: {self.space}   cells: {self.total_cells}   genotype: {self.genotype_hash[:12]}",
            f"total latency: {self.total_ms:g}ms ({self.total_input_frames} input frames)",
            f"breakdown (stem + reductions): {' + '.join(parts)}",
        ]
        if self.feature_lookahead_frames:
            lines.append(f"feature lookahead: {self.feature_lookahead_frames} frames")
        for hop in self.critical_path:
            lines.append(f"  cell {hop.cell_index}: {hop.src}->{hop.dst} {hop.op} +{hop.cost_ms:g}ms")
        return "\n".join(lines)


class Verdict(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"


class ProbeReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    genotype_hash: str
    claimed_frames: int
    measured_frames: int
    trials: int
    max_deviation: float
    witness_fired: bool
    verdict: Verdict
    notes: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == Verdict.PASS

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def summary(self) -> str:
        return (f"{self.verdict.value.upper()}: claimed {self.claimed_frames} frames, "
                f"measured {self.measured_frames} frames over {self.trials} trials "
                f"(sensitivity witness {'fired' if self.witness_fired else 'silent'}, "
                f"max deviation {self.max_deviation:.3g})")
