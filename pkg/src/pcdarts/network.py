"""Stem, stacked cells and classifier for the search and train-from-scratch stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential, Tensor, count_parameters, no_grad
from .autodiff import functional as F
from .cells import DiscreteCell, SearchCell
from .genotype import ArchParams, Genotype

MIN_FRAMES = 32
BONAFIDE = 1
SPOOF = 0


@dataclass(frozen=True)
class NetworkConfig:
    layers: int = 4
    channels: int = 16
    stage: str = "search"
    num_classes: int = 2
    drop_path_p: float = 0.0
    nodes: int = 7
    k_c: int = 2

    def __post_init__(self):
        if self.stage not in ("search", "scratch"):
            raise ValueError(f"stage must be 'search' or 'scratch', got {self.stage!r}")
        if self.channels < 2 or self.channels % 2:
            raise ValueError(f"channels must be an even number >= 2, got {self.channels}")
        a, b = self.reduction_positions_for(self.layers)
        if self.layers < 2 or a == b:
            raise ValueError(f"layers={self.layers} cannot host two distinct reduction cells")
        if not 0.0 <= self.drop_path_p < 1.0:
            raise ValueError(f"drop_path_p must lie in [0, 1), got {self.drop_path_p}")

    @staticmethod
    def reduction_positions_for(layers: int) -> tuple[int, int]:
        return layers // 3, 2 * layers // 3

    @property
    def reduction_positions(self) -> tuple[int, int]:
        return self.reduction_positions_for(self.layers)


class Stem(Module):
    """Three 3x3 stride-2 convolutions, channels C/2 -> C -> C, ReLU between layers."""

    def __init__(self, channels: int, rng=None):
        half = channels // 2
        self.body = Sequential(
            Conv2d(1, half, 3, 2, 1, rng=rng),
            BatchNorm2d(half),
            ReLU(),
            Conv2d(half, channels, 3, 2, 1, rng=rng),
            BatchNorm2d(channels),
            ReLU(),
            Conv2d(channels, channels, 3, 2, 1, rng=rng),
            BatchNorm2d(channels),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"stem expects a (batch, 1, features, frames) input, got {x.shape}")
        if x.shape[3] < MIN_FRAMES or x.shape[2] < 8:
            raise ValueError(f"input of {x.shape[2]}x{x.shape[3]} is too small for three stride-2 layers (need >= {MIN_FRAMES} frames)")
        return self.body(x)


class _Network(Module):
    def _build_stack(self, cfg: NetworkConfig, make_cell):
        c = cfg.channels
        c_pp, c_p = c, c
        reductions = set(cfg.reduction_positions)
        self.cells = []
        reduction_prev = False
        for i in range(cfg.layers):
            reduction = i in reductions
            if reduction:
                c *= 2
            cell = make_cell(c_pp, c_p, c, reduction, reduction_prev)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.out_channels
        return c_p

    @property
    def cell_types(self) -> list[str]:
        return [cell.cell_type for cell in self.cells]


class SearchNetwork(_Network):
    """Supernet whose cells share one set of architecture parameters per cell type."""

    def __init__(self, cfg: NetworkConfig, arch: ArchParams, rng=None):
        if cfg.stage != "search":
            raise ValueError("SearchNetwork needs a search-stage config")
        if arch.spec.nodes != cfg.nodes:
            raise ValueError(f"architecture has {arch.spec.nodes}-node cells, config asks for {cfg.nodes}")
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.arch = arch
        self.mask_rng: Optional[np.random.Generator] = np.random.default_rng(0)
        self.stem = Stem(cfg.channels, rng)
        spec = arch.spec
        c_final = self._build_stack(
            cfg,
            lambda c_pp, c_p, c, red, red_prev: SearchCell(spec, c_pp, c_p, c, red, red_prev, cfg.k_c, arch.primitives, rng),
        )
        self.classifier = Linear(c_final, cfg.num_classes, rng)

    def features(self, x: Tensor) -> list[Tensor]:
        s0 = s1 = self.stem(x)
        outs = [s1]
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, self.arch, self.mask_rng)
            outs.append(s1)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(F.global_avg_pool(self.features(x)[-1]))

    def op_path_macs(self) -> int:
        """Convolution MACs spent inside mixed edges during the last forward pass."""
        return int(sum(edge.op_path_macs for cell in self.cells for edge in cell.edges))


class ScratchNetwork(_Network):
    """Deeper stack of discrete cells fixed by a genotype."""

    def __init__(self, cfg: NetworkConfig, genotype: Genotype, rng=None):
        if cfg.stage != "scratch":
            raise ValueError("ScratchNetwork needs a scratch-stage config")
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        self.genotype = genotype
        self.drop_path_p = cfg.drop_path_p
        self.drop_rng: Optional[np.random.Generator] = np.random.default_rng(0)
        self.stem = Stem(cfg.channels, rng)
        c_final = self._build_stack(
            cfg, lambda c_pp, c_p, c, red, red_prev: DiscreteCell(genotype, c_pp, c_p, c, red, red_prev, True, rng)
        )
        self.classifier = Linear(c_final, cfg.num_classes, rng)

    def features(self, x: Tensor) -> list[Tensor]:
        s0 = s1 = self.stem(x)
        outs = [s1]
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1, self.drop_path_p, self.drop_rng)
            outs.append(s1)
        return outs

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(F.global_avg_pool(self.features(x)[-1]))


def build_network(
    cfg: NetworkConfig,
    genotype_or_arch: Union[Genotype, ArchParams],
    rng: Optional[np.random.Generator] = None,
) -> _Network:
    if cfg.stage == "search":
        if not isinstance(genotype_or_arch, ArchParams):
            raise ValueError("the search stage needs ArchParams")
        return SearchNetwork(cfg, genotype_or_arch, rng)
    if not isinstance(genotype_or_arch, Genotype):
        raise ValueError("the scratch stage needs a Genotype")
    return ScratchNetwork(cfg, genotype_or_arch, rng)


def forward_logits(model: Module, batch, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode logits (B, 2), computed in chunks without recording a tape."""
    x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, x.shape[0], batch_size):
                out.append(np.asarray(model(Tensor(x[start : start + batch_size])).data, dtype=np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 2))


def forward_score(model: Module, batch, score: str = "log_softmax", batch_size: int = 256) -> np.ndarray:
    """Bona fide detection score per utterance (higher = more bona fide).

    ``score='log_softmax'`` gives the bona fide log-posterior; ``'logit'``
    the raw bona fide logit.
    """
    if score not in ("log_softmax", "logit"):
        raise ValueError(f"score must be 'log_softmax' or 'logit', got {score!r}")
    return logits_to_scores(forward_logits(model, batch, batch_size), score)


def logits_to_scores(logits: np.ndarray, score: str = "log_softmax") -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if len(z) == 0:
        return np.zeros(0)
    if score == "logit":
        return z[:, BONAFIDE].copy()
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return z[:, BONAFIDE] - lse


def count_params(model: Module) -> int:
    """Number of trainable network weights (architecture parameters are not part of the model)."""
    return count_parameters(model)


