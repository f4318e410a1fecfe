from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .genotype import CellType
from .operations import OperationKind, OpFamily, stem_conv


class PlanError(ValueError):
    """Macro layout cannot be built (too few cells, bad widths)."""


class HeadSpec(BaseModel):
    """Per-frame classifier: frequency average, fully connected layers, softmax."""
    model_config = ConfigDict(frozen=True)

    hidden: Tuple[int, ...] = (128, 128)
    classes: int = 8

    @field_validator('classes')
    @classmethod
    def at_least_two_classes(cls, v):
        if v < 2:
            raise ValueError('A classifier needs at least 2 classes')
        return v

    @field_validator('hidden')
    @classmethod
    def widths_positive(cls, v):
        if any(w < 1 for w in v):
            raise ValueError('Hidden widths must be positive')
        return v


class MacroPlan(BaseModel):
    """The fixed stacked layout: stem, L cells with two reductions, head."""
    model_config = ConfigDict(frozen=True)

    total_cells: int
    initial_channels: int
    reduction_positions: Tuple[int, int]
    stem: OperationKind = Field(default_factory=stem_conv)
    head: HeadSpec = Field(default_factory=HeadSpec)
    frame_period_in: float = 10.0  # ms
    in_channels: int = 3  # static, delta, delta-delta
    freq_bins: int = 40

    @model_validator(mode='after')
    def layout_rules(self):
        L = self.total_cells
        if L < 3:
            raise ValueError('At least 3 cells are needed to place two reductions')
        if self.initial_channels < 1:
            raise ValueError('initial_channels must be positive')
        if self.reduction_positions != (L // 3, (2 * L) // 3):
            raise ValueError('Reductions sit at floor(L/3) and floor(2L/3)')
        if self.stem.family != OpFamily.CONV:
            raise ValueError('The stem must be a plain convolution')
        return self

    @property
    def causal_stem(self) -> bool:
        return self.stem.causal

    def is_reduction(self, index: int) -> bool:
        return index in self.reduction_positions

    def cell_type(self, index: int) -> CellType:
        return CellType.REDUCTION if self.is_reduction(index) else CellType.CAUSAL

    def reductions_before(self, index: int) -> int:
        """Reduction cells strictly before position ``index``."""
        return sum(1 for r in self.reduction_positions if r < index)

    def channels_at(self, index: int) -> int:
        """Per-node channel width inside cell ``index`` (C, 2C, 4C by segment)."""
        return self.initial_channels * (2 ** (self.reductions_before(index) + self.is_reduction(index)))

    def input_period(self, index: int) -> int:
        """Frame period, in input frames, of the features entering cell ``index``."""
        return 2 ** self.reductions_before(index)

    def cell_types(self) -> List[CellType]:
        return [self.cell_type(i) for i in range(self.total_cells)]


def build_macro_plan(L: int, C: int, classes: int = 8, causal_stem: bool = False,
                     hidden: Tuple[int, ...] = (128, 128),
                     frame_period_in: float = 10.0) -> MacroPlan:
    """Lay out L cells with reductions at the 1/3 and 2/3 depth.

    pre: L >= 3
    pre: C >= 1
    post: __return__.reduction_positions == (L // 3, (2 * L) // 3)
    post: __return__.reduction_positions[0] < __return__.reduction_positions[1]
    """
    if L < 3:
        raise PlanError(f"L={L}: need at least 3 cells for two reduction cells")
    if C < 1:
        raise PlanError(f"C={C}: initial channel count must be positive")
    try:
        return MacroPlan(
            total_cells=L,
            initial_channels=C,
            reduction_positions=(L // 3, (2 * L) // 3),
            stem=stem_conv(causal=causal_stem),
            head=HeadSpec(hidden=tuple(hidden), classes=classes),
            frame_period_in=frame_period_in,
        )
    except ValueError as e:
        raise PlanError(str(e)) from None
