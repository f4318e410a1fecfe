"""Candidate operations as explicitly padded torch modules.

Every module pads by hand (``Padding``) instead of relying on the convolution's
own symmetric padding, so causal ops can pad the time axis on the left only.
Tensors are (batch, channels, time, freq).

Time-axis stride 2 aligns output frame ``i`` on input frame ``2i + 1``: the
centre of the window for centred ops, its end for causal ones.
"""
import math
from typing import NamedTuple, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models.operations import KERNEL_FREE, OperationKind, OpFamily


class Padding(NamedTuple):
    left: int    # past frames
    right: int   # future frames
    top: int     # freq bins below
    bottom: int  # freq bins above

    def apply(self, x: torch.Tensor, value: float = 0.0) -> torch.Tensor:
        if not any(self):
            return x
        return F.pad(x, (self.top, self.bottom, self.left, self.right), value=value)


def time_padding(kernel: int, dilation: int, causal: bool) -> Tuple[int, int]:
    span = (kernel - 1) * dilation
    if causal:
        return span, 0
    return span // 2, span // 2


def padding_for(op: OperationKind, causal: bool = None) -> Padding:
    """Padding of the op's time/freq kernels.

    post: __return__.right == 0 or not (op.causal if causal is None else causal)
    post: __return__.top == __return__.bottom
    """
    if causal is None:
        causal = op.causal
    if op.family in KERNEL_FREE:
        return Padding(0, 0, 0, 0)
    # factorized pairs run an undilated time kernel then a freq kernel
    dilation = op.dilation
    left, right = time_padding(op.kernel_time, dilation, causal)
    freq = (op.kernel_freq - 1) * dilation // 2
    return Padding(left, right, freq, freq)


def align_time_stride(x: torch.Tensor) -> torch.Tensor:
    """Shift so that a stride-2 window lands on odd input frames."""
    if x.size(2) % 2:
        x = F.pad(x, (0, 0, 0, 1))
    return x[:, :, 1:]


class PaddedConv(nn.Module):
    """Conv2d with an explicit padding spec; no implicit padding."""

    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, int],
                 stride: Tuple[int, int] = (1, 1), dilation: int = 1,
                 causal: bool = False, groups: int = 1):
        super().__init__()
        kt, kf = kernel
        left, right = time_padding(kt, dilation, causal)
        freq = (kf - 1) * dilation // 2
        self.padding = Padding(left, right, freq, freq)
        self.stride = stride
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride=stride, dilation=dilation,
                              groups=groups, bias=False)

    def forward(self, x):
        if self.stride[0] == 2:
            x = align_time_stride(x)
        return self.conv(self.padding.apply(x))


class ReLUConvBN(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, int] = (1, 1),
                 stride: int = 1, causal: bool = False, affine: bool = True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            PaddedConv(c_in, c_out, kernel, stride=(stride, stride), causal=causal),
            nn.BatchNorm2d(c_out, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class StridedPointwise(ReLUConvBN):
    """1x1 stride-2 path: halves time and freq, reads frame 2i+1 only."""

    def __init__(self, c_in: int, c_out: int, affine: bool = True):
        super().__init__(c_in, c_out, (1, 1), stride=2, causal=True, affine=affine)


class SepConv(nn.Module):
    """(ReLU, depthwise, pointwise, BN) repeated ``stack`` times; only the first block strides."""

    def __init__(self, c_in: int, c_out: int, kernel: Tuple[int, int], stride: int = 1,
                 dilation: int = 1, stack: int = 1, causal: bool = False, affine: bool = True):
        super().__init__()
        blocks = []
        for i in range(stack):
            last = i == stack - 1
            width_out = c_out if last else c_in
            s = stride if i == 0 else 1
            blocks += [
                nn.ReLU(inplace=False),
                PaddedConv(c_in, c_in, kernel, stride=(s, s), dilation=dilation,
                           causal=causal, groups=c_in),
                nn.Conv2d(c_in, width_out, 1, bias=False),
                nn.BatchNorm2d(width_out, affine=affine),
            ]
        self.op = nn.Sequential(*blocks)

    def forward(self, x):
        return self.op(x)


class FactorizedPair(nn.Module):
    """Kx1 time conv followed by 1xK freq conv; the time conv carries the time stride."""

    def __init__(self, c_in: int, c_out: int, k_time: int, k_freq: int, stride: int = 1,
                 causal: bool = False, affine: bool = True):
        super().__init__()
        self.op = nn.Sequential(
            nn.ReLU(inplace=False),
            PaddedConv(c_in, c_in, (k_time, 1), stride=(stride, 1), causal=causal),
            PaddedConv(c_in, c_out, (1, k_freq), stride=(1, stride)),
            nn.BatchNorm2d(c_out, affine=affine),
        )

    def forward(self, x):
        return self.op(x)


class Pool(nn.Module):
    """Same-length max/avg pooling; avg divides by the full window, max pads with -inf."""

    def __init__(self, family: OpFamily, channels: int, kernel: int = 3, stride: int = 1,
                 causal: bool = False, norm: bool = False):
        super().__init__()
        self.family = family
        self.kernel = kernel
        self.stride = stride
        left, right = time_padding(kernel, 1, causal)
        self.padding = Padding(left, right, (kernel - 1) // 2, (kernel - 1) // 2)
        self.norm = nn.BatchNorm2d(channels, affine=False) if norm else None

    def forward(self, x):
        if self.stride == 2:
            x = align_time_stride(x)
        if self.family == OpFamily.MAX_POOL:
            out = F.max_pool2d(self.padding.apply(x, float("-inf")), self.kernel, self.stride)
        else:
            out = F.avg_pool2d(self.padding.apply(x), self.kernel, self.stride)
        return self.norm(out) if self.norm is not None else out


class Zero(nn.Module):
    def __init__(self, stride: int = 1):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        b, c, t, f = x.shape
        s = self.stride
        return x.new_zeros(b, c, math.ceil(t / s), math.ceil(f / s))


class Identity(nn.Module):
    def forward(self, x):
        return x


class Stem(nn.Module):
    """3x3 conv + BN mapping static/delta/delta-delta channels to C."""

    def __init__(self, c_in: int, c_out: int, op: OperationKind):
        super().__init__()
        self.kind = op
        self.conv = PaddedConv(c_in, c_out, (op.kernel_time, op.kernel_freq), causal=op.causal)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(self.conv(x))


def build_operation(op: OperationKind, channels: int, stride: int = 1,
                    affine: bool = True, pool_norm: bool = False) -> nn.Module:
    """Instantiate ``op`` mapping ``channels`` to ``channels`` at the given stride."""
    fam = op.family
    kernel = (op.kernel_time, op.kernel_freq)
    if fam == OpFamily.ZERO:
        module = Zero(stride)
    elif fam == OpFamily.IDENTITY:
        module = Identity() if stride == 1 else StridedPointwise(channels, channels, affine)
    elif fam in (OpFamily.MAX_POOL, OpFamily.AVG_POOL):
        module = Pool(fam, channels, op.kernel_time, stride, op.causal, norm=pool_norm)
    elif fam in (OpFamily.SEPARABLE_CONV, OpFamily.DILATED_SEPARABLE_CONV):
        module = SepConv(channels, channels, kernel, stride, op.dilation,
                         op.conv_stack_count, op.causal, affine)
    elif fam == OpFamily.FACTORIZED_CONV_PAIR:
        module = FactorizedPair(channels, channels, op.kernel_time, op.kernel_freq, stride,
                                op.causal, affine)
    elif fam == OpFamily.CONV:
        module = ReLUConvBN(channels, channels, kernel, stride, op.causal, affine)
    else:
        raise ValueError(f"No module for {op.name}")
    module.kind = op
    return module
