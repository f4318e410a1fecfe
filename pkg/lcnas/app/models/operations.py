import enum
import re
from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class OpFamily(str, enum.Enum):
    ZERO = "zero"
    IDENTITY = "identity"
    MAX_POOL = "max_pool"
    AVG_POOL = "avg_pool"
    SEPARABLE_CONV = "separable_conv"
    DILATED_SEPARABLE_CONV = "dilated_separable_conv"
    FACTORIZED_CONV_PAIR = "factorized_conv_pair"
    # Plain convolution, only ever used by the stem
    CONV = "conv"


# Families that never look at neighbouring frames
KERNEL_FREE = {OpFamily.ZERO, OpFamily.IDENTITY}
POOLING = {OpFamily.MAX_POOL, OpFamily.AVG_POOL}
# Candidates masked by the search-space regularization dropout
REGULARIZED = {OpFamily.DILATED_SEPARABLE_CONV, OpFamily.AVG_POOL}


class OperationKind(BaseModel):
    """One candidate operation on a cell edge.

    Immutable; two kinds compare equal iff every field matches.
    """
    model_config = ConfigDict(frozen=True)

    family: OpFamily
    kernel_time: int = 1
    kernel_freq: int = 1
    dilation: int = 1
    conv_stack_count: int = 1
    causal: bool = False

    @field_validator('kernel_time', 'kernel_freq')
    @classmethod
    def kernel_odd_positive(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError('Kernel sizes must be positive and odd')
        return v

    @field_validator('dilation')
    @classmethod
    def dilation_positive(cls, v):
        if v < 1:
            raise ValueError('Dilation must be positive')
        return v

    @field_validator('conv_stack_count')
    @classmethod
    def stack_count_range(cls, v):
        if v not in (1, 2):
            raise ValueError('conv_stack_count must be 1 or 2')
        return v

    @model_validator(mode='after')
    def family_rules(self):
        if self.dilation > 1 and self.family != OpFamily.DILATED_SEPARABLE_CONV:
            raise ValueError('Only dilated separable convolutions may have dilation > 1')
        if self.conv_stack_count == 2 and self.family != OpFamily.SEPARABLE_CONV:
            raise ValueError('Only separable convolutions may be stacked twice')
        if self.family in KERNEL_FREE and (self.kernel_time, self.kernel_freq) != (1, 1):
            raise ValueError(f'{self.family.value} has no kernel')
        return self

    @property
    def name(self) -> str:
        """Symbolic name used in genotype files, e.g. ``sep_conv_5x5``."""
        fam = self.family
        if fam in KERNEL_FREE:
            return fam.value
        if fam in POOLING:
            return f"{fam.value}_{self.kernel_time}x{self.kernel_freq}"
        if fam == OpFamily.SEPARABLE_CONV:
            return f"sep_conv_{self.kernel_time}x{self.kernel_freq}"
        if fam == OpFamily.DILATED_SEPARABLE_CONV:
            return f"dil_conv_{self.kernel_time}x{self.kernel_freq}"
        if fam == OpFamily.FACTORIZED_CONV_PAIR:
            return f"conv_{self.kernel_time}x1_1x{self.kernel_freq}"
        return f"conv_{self.kernel_time}x{self.kernel_freq}"

    @property
    def has_kernel(self) -> bool:
        return self.family not in KERNEL_FREE

    def as_causal(self, causal: bool = True) -> "OperationKind":
        if self.causal == causal:
            return self
        return self.model_copy(update={"causal": causal})

    def __str__(self):
        return self.name + (" (causal)" if self.causal else "")


_NAME_PATTERNS = [
    (re.compile(r"^(max_pool|avg_pool)_(\d+)x(\d+)$"), "pool"),
    (re.compile(r"^sep_conv_(\d+)x(\d+)$"), OpFamily.SEPARABLE_CONV),
    (re.compile(r"^dil_conv_(\d+)x(\d+)$"), OpFamily.DILATED_SEPARABLE_CONV),
    (re.compile(r"^conv_(\d+)x1_1x(\d+)$"), OpFamily.FACTORIZED_CONV_PAIR),
    (re.compile(r"^conv_(\d+)x(\d+)$"), OpFamily.CONV),
]


def parse_op_name(name: str) -> Optional[Tuple[OpFamily, int, int]]:
    """Split a symbolic op name into (family, kernel_time, kernel_freq).

    Returns None for names that follow no known pattern. Stack count and
    dilation are not encoded in names; the search space supplies them.
    """
    if name in (OpFamily.ZERO.value, OpFamily.IDENTITY.value):
        return OpFamily(name), 1, 1
    for pattern, family in _NAME_PATTERNS:
        match = pattern.match(name)
        if not match:
            continue
        if family == "pool":
            return OpFamily(match.group(1)), int(match.group(2)), int(match.group(3))
        return family, int(match.group(1)), int(match.group(2))
    return None


# Shorthands used to spell the presets
def zero() -> OperationKind:
    return OperationKind(family=OpFamily.ZERO)


def identity() -> OperationKind:
    return OperationKind(family=OpFamily.IDENTITY)


def max_pool(k: int = 3) -> OperationKind:
    return OperationKind(family=OpFamily.MAX_POOL, kernel_time=k, kernel_freq=k)


def avg_pool(k: int = 3) -> OperationKind:
    return OperationKind(family=OpFamily.AVG_POOL, kernel_time=k, kernel_freq=k)


def sep_conv(k: int, stack: int = 1) -> OperationKind:
    return OperationKind(family=OpFamily.SEPARABLE_CONV, kernel_time=k, kernel_freq=k,
                         conv_stack_count=stack)


def dil_conv(k: int, dilation: int = 2) -> OperationKind:
    return OperationKind(family=OpFamily.DILATED_SEPARABLE_CONV, kernel_time=k,
                         kernel_freq=k, dilation=dilation)


def conv_pair(k: int) -> OperationKind:
    return OperationKind(family=OpFamily.FACTORIZED_CONV_PAIR, kernel_time=k, kernel_freq=k)


def stem_conv(causal: bool = False) -> OperationKind:
    return OperationKind(family=OpFamily.CONV, kernel_time=3, kernel_freq=3, causal=causal)
