"""Candidate operations, the softmax-mixed edge and its partially connected form."""

from __future__ import annotations

import enum
from typing import Optional, Sequence

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, MacCounter, Module, Tensor
from .autodiff import functional as F


class OpKind(enum.Enum):
    """The eight candidate operations, in declaration (tie-break) order."""

    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    SKIP_CONNECT = "skip_connect"
    AVG_POOL_3X3 = "avg_pool_3x3"
    MAX_POOL_3X3 = "max_pool_3x3"
    NONE = "none"

    @property
    def order(self) -> int:
        return _ORDER[self]

    @classmethod
    def from_name(cls, name: str) -> "OpKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown operation name {name!r}") from None


_ORDER = {kind: i for i, kind in enumerate(OpKind)}
PRIMITIVES: tuple[OpKind, ...] = tuple(OpKind)


class ReLUConvBN(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, affine: bool, rng=None):
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(F.relu(x)))


class DilConv(Module):
    """ReLU, depthwise k x k (dilated), pointwise 1 x 1, BN."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, dilation: int, affine: bool, rng=None):
        self.depthwise = Conv2d(c_in, c_in, kernel, stride, padding, dilation, groups=c_in, rng=rng)
        self.pointwise = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.pointwise(self.depthwise(F.relu(x))))


class SepConv(Module):
    """Two depthwise-pointwise-BN stages; only the first one is strided."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, affine: bool, rng=None):
        pad = kernel // 2
        self.first = DilConv(c_in, c_in, kernel, stride, pad, 1, affine, rng=rng)
        self.second = DilConv(c_in, c_out, kernel, 1, pad, 1, affine, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.second(self.first(x))


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Zero(Module):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.zeros_like_strided(x, self.stride)


class FactorizedReduce(Module):
    """Two 1x1 stride-2 convolutions on pixel grids offset by one, concatenated.

    The offset branch pads one row/column at the far edge so both branches
    produce ceil(H/2) x ceil(W/2) maps for odd sizes as well.
    """

    def __init__(self, c_in: int, c_out: int, affine: bool, rng=None):
        if c_out % 2:
            raise ValueError(f"FactorizedReduce needs an even output channel count, got {c_out}")
        self.conv_a = Conv2d(c_in, c_out // 2, 1, stride=2, rng=rng)
        self.conv_b = Conv2d(c_in, c_out // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(x)
        shifted = F.pad2d(x, 0, 1, 0, 1)[:, :, 1:, 1:]
        return self.bn(F.concat_channels([self.conv_a(x), self.conv_b(shifted)]))


class Pool(Module):
    def __init__(self, kind: str, channels: int, stride: int, affine: bool):
        self.kind = kind
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine=affine)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(F.pool2d(x, self.kind, 3, self.stride, 1))


def build_candidate(kind: OpKind, channels: int, stride: int, affine: bool = True, rng=None) -> Module:
    """Instantiate one candidate operation mapping ``channels`` to ``channels``."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if stride not in (1, 2):
        raise ValueError(f"unsupported stride {stride}; expected 1 or 2")
    if kind is OpKind.SEP_CONV_3X3:
        return SepConv(channels, channels, 3, stride, affine, rng)
    if kind is OpKind.SEP_CONV_5X5:
        return SepConv(channels, channels, 5, stride, affine, rng)
    if kind is OpKind.DIL_CONV_3X3:
        return DilConv(channels, channels, 3, stride, 2, 2, affine, rng)
    if kind is OpKind.DIL_CONV_5X5:
        return DilConv(channels, channels, 5, stride, 4, 2, affine, rng)
    if kind is OpKind.SKIP_CONNECT:
        return Identity() if stride == 1 else FactorizedReduce(channels, channels, affine, rng)
    if kind is OpKind.AVG_POOL_3X3:
        return Pool("avg", channels, stride, affine)
    if kind is OpKind.MAX_POOL_3X3:
        return Pool("max", channels, stride, affine)
    if kind is OpKind.NONE:
        return Zero(stride)
    raise ValueError(f"unknown operation {kind!r}")


def sample_mask(channels: int, k_c: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random boolean channel mask with ``channels // k_c`` entries set."""
    if k_c < 1 or channels < 1 or channels % k_c:
        raise ValueError(f"channels={channels} must be a positive multiple of k_c={k_c}")
    mask = np.zeros(channels, dtype=bool)
    if k_c == 1:
        mask[:] = True
        return mask
    mask[rng.permutation(channels)[: channels // k_c]] = True
    return mask


class MixedEdge(Module):
    """All candidates of one edge, built for ``channels // k_c`` channels."""

    def __init__(
        self,
        channels: int,
        stride: int,
        k_c: int = 1,
        primitives: Sequence[OpKind] = PRIMITIVES,
        affine: bool = False,
        rng=None,
    ):
        if channels % k_c:
            raise ValueError(f"edge channels {channels} not divisible by k_c={k_c}")
        self.channels = channels
        self.stride = stride
        self.k_c = k_c
        self.primitives = tuple(primitives)
        self.op_channels = channels // k_c
        self.ops = [build_candidate(kind, self.op_channels, stride, affine, rng) for kind in self.primitives]
        self.op_path_macs = 0

    def forward(self, x: Tensor, alpha_edge: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        if mask is None:
            return mixed_forward(self, x, alpha_edge)
        return pc_mixed_forward(self, x, alpha_edge, mask)


def _mixture(edge: MixedEdge, x: Tensor, alpha_edge: Tensor) -> Tensor:
    if alpha_edge.shape != (len(edge.ops),):
        raise ValueError(f"alpha_edge has shape {alpha_edge.shape}, edge has {len(edge.ops)} operations")
    if not np.all(np.isfinite(alpha_edge.data)):
        raise FloatingPointError("non-finite architecture weights")
    weights = F.softmax(alpha_edge)
    with MacCounter() as counter:
        outs = [op(x) for op in edge.ops]
    edge.op_path_macs = counter.macs
    return F.weighted_sum(outs, weights)


def mixed_forward(edge: MixedEdge, x: Tensor, alpha_edge: Tensor) -> Tensor:
    """Softmax(alpha)-weighted sum of every candidate applied to ``x``."""
    if x.shape[1] != edge.op_channels:
        raise ValueError(f"mixed_forward: input has {x.shape[1]} channels, operations expect {edge.op_channels}")
    return _mixture(edge, x, alpha_edge)


def pc_mixed_forward(edge: MixedEdge, x: Tensor, alpha_edge: Tensor, mask: np.ndarray) -> Tensor:
    """Partially connected mixed edge.

    Selected channels go through the mixture, the rest bypass it (pooled
    2x2 at stride 2 so shapes agree). The two groups are concatenated and
    channel-shuffled with ``k_c`` groups.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[1],) or x.shape[1] != edge.channels:
        raise ValueError(f"mask of shape {mask.shape} does not match {edge.channels}-channel edge / input {x.shape}")
    selected = np.flatnonzero(mask)
    if selected.size != edge.op_channels:
        raise ValueError(f"mask selects {selected.size} channels, expected {edge.op_channels}")
    mixed = _mixture(edge, F.take_channels(x, selected), alpha_edge)
    if edge.k_c == 1:
        return mixed
    bypass = F.take_channels(x, np.flatnonzero(~mask))
    if edge.stride == 2:
        bypass = F.pool2d(bypass, "avg", 2, 2, 0, ceil_mode=True)
    return F.channel_shuffle(F.concat_channels([mixed, bypass]), edge.k_c)
