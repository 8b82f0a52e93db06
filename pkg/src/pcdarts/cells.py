"""Search-mode and discrete cells."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autodiff import Module, Tensor
from .autodiff import functional as F
from .genotype import ArchParams, CellSpec, Genotype
from .ops import PRIMITIVES, FactorizedReduce, MixedEdge, OpKind, ReLUConvBN, build_candidate, sample_mask


def _preprocess(c_pp: int, c_p: int, c: int, reduction_prev: bool, affine: bool, rng):
    pre0 = FactorizedReduce(c_pp, c, affine, rng) if reduction_prev else ReLUConvBN(c_pp, c, 1, 1, 0, affine, rng)
    pre1 = ReLUConvBN(c_p, c, 1, 1, 0, affine, rng)
    return pre0, pre1


def _reconcile(s0: Tensor, s1: Tensor) -> None:
    if s0.shape[0] != s1.shape[0] or s0.shape[2:] != s1.shape[2:]:
        raise ValueError(f"cell inputs cannot be reconciled: preprocessed shapes {s0.shape} and {s1.shape}")


class SearchCell(Module):
    """Every edge is a partially connected mixed edge; nodes are edge-normalised sums."""

    def __init__(
        self,
        spec: CellSpec,
        c_pp: int,
        c_p: int,
        c: int,
        reduction: bool,
        reduction_prev: bool,
        k_c: int = 2,
        primitives: Sequence[OpKind] = PRIMITIVES,
        rng=None,
    ):
        self.spec = spec
        self.reduction = reduction
        self.cell_type = "reduce" if reduction else "normal"
        self.channels = c
        self.k_c = k_c
        self.pre0, self.pre1 = _preprocess(c_pp, c_p, c, reduction_prev, False, rng)
        self.edges = [
            MixedEdge(c, 2 if reduction and i <= 2 else 1, k_c, primitives, affine=False, rng=rng) for i, _ in spec.edges
        ]

    @property
    def out_channels(self) -> int:
        return len(self.spec.intermediate) * self.channels

    def forward(self, s0: Tensor, s1: Tensor, arch: ArchParams, mask_rng: Optional[np.random.Generator] = None) -> Tensor:
        if mask_rng is None and self.k_c > 1:
            raise ValueError(f"k_c={self.k_c} needs a generator for channel masks")
        alpha = arch.alpha[self.cell_type]
        beta = arch.beta[self.cell_type]
        states = {1: self.pre0(s0), 2: self.pre1(s1)}
        _reconcile(states[1], states[2])
        for j in self.spec.intermediate:
            rows = self.spec.incoming(j)
            weights = F.softmax(beta[rows[0] : rows[-1] + 1])
            outs = []
            for e in rows:
                src = self.spec.edges[e][0]
                mask = None
                if mask_rng is not None:
                    mask = sample_mask(self.channels, self.k_c, mask_rng)
                outs.append(self.edges[e](states[src], alpha[e], mask))
            states[j] = F.weighted_sum(outs, weights)
        return F.concat_channels([states[j] for j in self.spec.intermediate])


class DiscreteCell(Module):
    """Each intermediate node sums its K chosen operations, with drop-path in training."""

    def __init__(
        self,
        genotype: Genotype,
        c_pp: int,
        c_p: int,
        c: int,
        reduction: bool,
        reduction_prev: bool,
        affine: bool = True,
        rng=None,
    ):
        self.reduction = reduction
        self.cell_type = "reduce" if reduction else "normal"
        self.channels = c
        self.pre0, self.pre1 = _preprocess(c_pp, c_p, c, reduction_prev, affine, rng)
        nodes = genotype.cell(self.cell_type)
        self.concat = genotype.reduce_concat if reduction else genotype.normal_concat
        self.sources = [[src for _, src in pairs] for pairs in nodes]
        self.kinds = [[op for op, _ in pairs] for pairs in nodes]
        self.ops = [
            build_candidate(op, c, 2 if reduction and src <= 2 else 1, affine, rng)
            for pairs in nodes
            for op, src in pairs
        ]

    @property
    def out_channels(self) -> int:
        return len(self.concat) * self.channels

    def forward(self, s0: Tensor, s1: Tensor, drop_path_p: float = 0.0, rng: Optional[np.random.Generator] = None) -> Tensor:
        states = {1: self.pre0(s0), 2: self.pre1(s1)}
        _reconcile(states[1], states[2])
        k = 0
        for offset, sources in enumerate(self.sources):
            total = None
            for src in sources:
                h = self.ops[k](states[src])
                k += 1
                if self.training and drop_path_p > 0.0:
                    h = F.drop_path(h, drop_path_p, rng)
                total = h if total is None else F.add(total, h)
            states[offset + 3] = total
        return F.concat_channels([states[j] for j in self.concat])


def cell_forward(
    cell: Module,
    s_prev2: Tensor,
    s_prev: Tensor,
    arch: Optional[ArchParams] = None,
    drop_path_p: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run a cell in whichever mode it was built for."""
    if isinstance(cell, SearchCell):
        if arch is None:
            raise ValueError("search-mode cells need architecture parameters")
        return cell(s_prev2, s_prev, arch, rng)
    if isinstance(cell, DiscreteCell):
        return cell(s_prev2, s_prev, drop_path_p, rng)
    raise TypeError(f"not a cell: {type(cell).__name__}")
