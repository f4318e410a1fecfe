import enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .operations import (
    OperationKind, OpFamily,
    zero, max_pool, avg_pool, sep_conv, dil_conv, conv_pair,
)


class SpaceName(str, enum.Enum):
    MEDIUM_LATENCY = "medium_latency"
    LOW_LATENCY = "low_latency"


class SpaceMismatchError(ValueError):
    """A genotype, plan or alpha matrix was built for a different search space."""


class SearchSpaceSpec(BaseModel):
    """Candidate operation set plus the cell template it is searched over.

    Operations are stored non-causal; cells ask for the causal variant.
    """
    model_config = ConfigDict(frozen=True)

    name: str
    operations: Tuple[OperationKind, ...]
    nodes: int = 7
    intermediate_count: int = 4
    retain_k: int = 2

    @field_validator('operations')
    @classmethod
    def operations_unique(cls, v):
        names = [op.name for op in v]
        if len(set(names)) != len(names):
            raise ValueError('Operation names must be unique within a space')
        return v

    @model_validator(mode='after')
    def template_consistent(self):
        # two inputs + intermediates + one concatenation output
        if self.nodes != self.intermediate_count + 3:
            raise ValueError('nodes must equal intermediate_count + 3')
        if not 1 <= self.retain_k <= 2:
            raise ValueError('retain_k must be 1 or 2 (node 2 only has two predecessors)')
        return self

    @property
    def op_names(self) -> List[str]:
        return [op.name for op in self.operations]

    @property
    def output_node(self) -> int:
        return self.nodes - 1

    @property
    def intermediate_nodes(self) -> range:
        return range(2, 2 + self.intermediate_count)

    @property
    def edge_count(self) -> int:
        return sum(2 + i for i in range(self.intermediate_count))

    def edge_endpoints(self) -> List[Tuple[int, int]]:
        """(from, to) pairs in alpha-row order: grouped by target, then source."""
        return [(src, dst) for dst in self.intermediate_nodes for src in range(dst)]

    def edge_index(self, src: int, dst: int) -> int:
        if dst not in self.intermediate_nodes or not 0 <= src < dst:
            raise IndexError(f"No edge {src}->{dst} in a {self.nodes}-node cell")
        offset = sum(2 + i for i in range(dst - 2))
        return offset + src

    def op_index(self, name: str) -> int:
        try:
            return self.op_names.index(name)
        except ValueError:
            raise KeyError(f"Operation {name!r} is not in space {self.name}") from None

    def resolve(self, name: str, causal: bool) -> OperationKind:
        """Map a symbolic op name to this space's operation, with causality applied."""
        for op in self.operations:
            if op.name == name:
                return op.as_causal(causal)
        # identity is not in either preset but stays available as a code path
        if name == OpFamily.IDENTITY.value:
            return OperationKind(family=OpFamily.IDENTITY, causal=causal)
        raise KeyError(f"Operation {name!r} is not in space {self.name}")

    def contains(self, op: OperationKind) -> bool:
        return op.as_causal(False) in self.operations


def _low_latency_ops() -> Tuple[OperationKind, ...]:
    return (
        zero(),
        max_pool(3),
        avg_pool(3),
        sep_conv(3),
        sep_conv(5),
        dil_conv(3, 2),
        conv_pair(3),
        conv_pair(5),
    )


def _medium_latency_ops() -> Tuple[OperationKind, ...]:
    # ReLU-Conv-BN stacked twice in separable convs; wider dilated conv and 7-tap pair
    return (
        zero(),
        max_pool(3),
        avg_pool(3),
        sep_conv(3, stack=2),
        sep_conv(5, stack=2),
        dil_conv(3, 2),
        dil_conv(5, 2),
        conv_pair(7),
    )


LOW_LATENCY = SearchSpaceSpec(name=SpaceName.LOW_LATENCY.value, operations=_low_latency_ops())
MEDIUM_LATENCY = SearchSpaceSpec(name=SpaceName.MEDIUM_LATENCY.value,
                                 operations=_medium_latency_ops())

PRESETS: Dict[str, SearchSpaceSpec] = {
    LOW_LATENCY.name: LOW_LATENCY,
    MEDIUM_LATENCY.name: MEDIUM_LATENCY,
}


def get_space(name: str) -> SearchSpaceSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise SpaceMismatchError(
            f"Unknown search space {name!r}; expected one of {sorted(PRESETS)}"
        ) from None


class CandidateSet(BaseModel):
    """Per-edge surviving op indices (into ``space.operations``) for both cell types.

    This is the reduced space a progressive search stage works with.
    """
    model_config = ConfigDict(frozen=True)

    causal: Tuple[Tuple[int, ...], ...]
    reduction: Tuple[Tuple[int, ...], ...]

    @model_validator(mode='after')
    def uniform_width(self):
        widths = {len(row) for row in self.causal + self.reduction}
        if len(widths) != 1:
            raise ValueError('Every edge must keep the same number of candidates')
        if 0 in widths:
            raise ValueError('Edges must keep at least one candidate')
        return self

    @property
    def ops_per_edge(self) -> int:
        return len(self.causal[0])

    def rows(self, cell_type: str) -> Tuple[Tuple[int, ...], ...]:
        return self.causal if cell_type == "causal" else self.reduction

    @classmethod
    def full(cls, space: SearchSpaceSpec) -> "CandidateSet":
        row = tuple(range(len(space.operations)))
        rows = tuple(row for _ in range(space.edge_count))
        return cls(causal=rows, reduction=rows)


def eval_preset(size: str, space: Optional[str] = None) -> Tuple[int, int]:
    """(L, C) for the evaluation network sizes used in the reported experiments."""
    presets = {
        "small": {SpaceName.LOW_LATENCY.value: (17, 25), SpaceName.MEDIUM_LATENCY.value: (17, 22)},
        "medium": {SpaceName.LOW_LATENCY.value: (26, 30), SpaceName.MEDIUM_LATENCY.value: (26, 30)},
        "large": {SpaceName.LOW_LATENCY.value: (26, 56), SpaceName.MEDIUM_LATENCY.value: (26, 50)},
    }
    if size not in presets:
        raise KeyError(f"Unknown evaluation preset {size!r}")
    return presets[size][space or SpaceName.LOW_LATENCY.value]
