"""Cell topology, architecture parameters, and discretisation into genotypes.

Nodes are numbered from 1: nodes 1 and 2 are the cell inputs, nodes
3..N-1 are intermediate, node N is the concatenated output.

Genotype text format::

    normal:
    node 3: sep_conv_3x3(1), skip_connect(2)
    node 4: ...
    reduce:
    node 3: ...
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .ops import PRIMITIVES, OpKind

CELL_TYPES = ("normal", "reduce")


@dataclass(frozen=True)
class CellSpec:
    nodes: int = 7

    def __post_init__(self):
        if self.nodes < 4:
            raise ValueError(f"a cell needs at least 4 nodes (2 inputs, 1 intermediate, 1 output), got {self.nodes}")

    @property
    def intermediate(self) -> range:
        return range(3, self.nodes)

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for j in self.intermediate for i in range(1, j)]

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def incoming(self, j: int) -> list[int]:
        """Row indices (into the edge list) of the edges entering node ``j``."""
        return [e for e, (_, dst) in enumerate(self.edges) if dst == j]


class ArchParams:
    """Operation weights alpha (edges x ops) and edge-normalisation weights beta, per cell type."""

    def __init__(
        self,
        spec: CellSpec = CellSpec(),
        primitives: Sequence[OpKind] = PRIMITIVES,
        rng: np.random.Generator | None = None,
        init_scale: float = 1e-3,
        dtype=np.float32,
    ):
        self.spec = spec
        self.primitives = tuple(primitives)
        e, n = spec.n_edges, len(self.primitives)
        rng = rng or np.random.default_rng(0)
        self.alpha = {t: Tensor(init_scale * rng.standard_normal((e, n)), requires_grad=True, dtype=dtype) for t in CELL_TYPES}
        self.beta = {t: Tensor(init_scale * rng.standard_normal(e), requires_grad=True, dtype=dtype) for t in CELL_TYPES}

    @classmethod
    def from_arrays(cls, alpha_normal, alpha_reduce, beta_normal, beta_reduce, spec=CellSpec(), primitives=PRIMITIVES):
        arch = cls(spec, primitives)
        for t, a, b in (("normal", alpha_normal, beta_normal), ("reduce", alpha_reduce, beta_reduce)):
            a = np.asarray(a, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if a.shape != arch.alpha[t].shape or b.shape != arch.beta[t].shape:
                raise ValueError(f"{t}: expected alpha {arch.alpha[t].shape} / beta {arch.beta[t].shape}, got {a.shape} / {b.shape}")
            arch.alpha[t] = Tensor(a, requires_grad=True)
            arch.beta[t] = Tensor(b, requires_grad=True)
        return arch

    def tensors(self) -> list[Tensor]:
        return [self.alpha["normal"], self.alpha["reduce"], self.beta["normal"], self.beta["reduce"]]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {
            "alpha_normal": self.alpha["normal"].data.copy(),
            "alpha_reduce": self.alpha["reduce"].data.copy(),
            "beta_normal": self.beta["normal"].data.copy(),
            "beta_reduce": self.beta["reduce"].data.copy(),
        }


@dataclass(frozen=True)
class Genotype:
    """Discrete cells: per intermediate node, K (operation, source node) pairs sorted by source."""

    normal: tuple[tuple[tuple[OpKind, int], ...], ...]
    reduce: tuple[tuple[tuple[OpKind, int], ...], ...]
    normal_concat: tuple[int, ...] = field(default=())
    reduce_concat: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for t in CELL_TYPES:
            nodes = getattr(self, t)
            for offset, pairs in enumerate(nodes):
                j = offset + 3
                sources = [src for _, src in pairs]
                if len(set(sources)) != len(sources):
                    raise ValueError(f"{t} node {j}: duplicate source in {sources}")
                for op, src in pairs:
                    if op is OpKind.NONE:
                        raise ValueError(f"{t} node {j}: 'none' is not a valid genotype operation")
                    if not 1 <= src < j:
                        raise ValueError(f"{t} node {j}: source {src} must lie in [1, {j - 1}]")
            concat = tuple(range(3, 3 + len(nodes)))
            if not getattr(self, f"{t}_concat"):
                object.__setattr__(self, f"{t}_concat", concat)

    def cell(self, cell_type: str):
        return self.normal if cell_type == "normal" else self.reduce

    @property
    def n_slots(self) -> int:
        return sum(len(p) for p in self.normal) + sum(len(p) for p in self.reduce)


def _make_node(pairs) -> tuple[tuple[OpKind, int], ...]:
    return tuple(sorted(pairs, key=lambda p: (p[1], p[0].order)))


def _best_op(probs: np.ndarray, primitives: Sequence[OpKind]) -> tuple[int, float]:
    """Index and probability of the strongest non-None op; ties go to declaration order."""
    best = None
    for k, op in enumerate(primitives):
        if op is OpKind.NONE:
            continue
        key = (-probs[k], op.order)
        if best is None or key < best[0]:
            best = (key, k)
    if best is None:
        raise ValueError("search space contains no operation other than 'none'")
    return best[1], float(probs[best[1]])


def _softmax(v: np.ndarray) -> np.ndarray:
    z = np.asarray(v, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def edge_scores(arch: ArchParams, cell_type: str, edge_score: str = "normalized") -> tuple[np.ndarray, np.ndarray]:
    """Per-edge (best-op index, importance score) used for top-K edge selection."""
    if edge_score not in ("normalized", "alpha-only"):
        raise ValueError(f"edge_score must be 'normalized' or 'alpha-only', got {edge_score!r}")
    spec = arch.spec
    probs = _softmax(arch.alpha[cell_type].data)
    beta = np.asarray(arch.beta[cell_type].data, dtype=np.float64)
    best = np.zeros(spec.n_edges, dtype=int)
    score = np.zeros(spec.n_edges)
    for j in spec.intermediate:
        rows = spec.incoming(j)
        norm = _softmax(beta[rows]) if edge_score == "normalized" else np.ones(len(rows))
        for w, e in zip(norm, rows):
            best[e], strength = _best_op(probs[e], arch.primitives)
            score[e] = w * strength
    return best, score


def derive_genotype(arch: ArchParams, k: int = 2, edge_score: str = "normalized") -> Genotype:
    """Keep, for each intermediate node, the K strongest incoming edges with their best op."""
    spec = arch.spec
    cells = {}
    for t in CELL_TYPES:
        best, score = edge_scores(arch, t, edge_score)
        nodes = []
        for j in spec.intermediate:
            rows = spec.incoming(j)
            if k > len(rows):
                raise ValueError(f"K={k} exceeds the {len(rows)} incoming edges of node {j}")
            ranked = sorted(rows, key=lambda e: (-score[e], spec.edges[e][0]))[:k]
            nodes.append(_make_node((arch.primitives[best[e]], spec.edges[e][0]) for e in ranked))
        cells[t] = tuple(nodes)
    return Genotype(normal=cells["normal"], reduce=cells["reduce"])


def enumerate_genotype_cells(spec: CellSpec, primitives: Sequence[OpKind], k: int):
    """Every valid discrete cell for ``spec`` (used as a brute-force reference)."""
    ops = [op for op in primitives if op is not OpKind.NONE]
    per_node = []
    for j in spec.intermediate:
        choices = []
        for sources in itertools.combinations(range(1, j), k):
            for labels in itertools.product(ops, repeat=k):
                choices.append(_make_node(zip(labels, sources)))
        per_node.append(choices)
    return itertools.product(*per_node)


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------


class GenotypeParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def genotype_serialize(g: Genotype) -> str:
    lines = []
    for t in CELL_TYPES:
        lines.append(f"{t}:")
        for offset, pairs in enumerate(g.cell(t)):
            body = ", ".join(f"{op.value}({src})" for op, src in pairs)
            lines.append(f"node {offset + 3}: {body}")
    return "\n".join(lines) + "\n"


_NODE_RE = re.compile(r"node (\d+): (.*)$")
_PAIR_RE = re.compile(r"([a-z0-9_]+)\((\d+)\)")
_VALID_NAMES = {op.value for op in OpKind if op is not OpKind.NONE}


def genotype_parse(text: str) -> Genotype:
    cells: dict[str, list] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip():
            continue
        if line in ("normal:", "reduce:"):
            current = line[:-1]
            if current in cells:
                raise GenotypeParseError(f"duplicate '{line}' section", lineno, 1)
            cells[current] = []
            continue
        if current is None:
            raise GenotypeParseError("expected 'normal:' or 'reduce:' header", lineno, 1)
        m = _NODE_RE.match(line)
        if not m:
            raise GenotypeParseError("expected 'node <j>: <op>(<src>), ...'", lineno, 1)
        j = int(m.group(1))
        expected = 3 + len(cells[current])
        if j != expected:
            raise GenotypeParseError(f"expected node {expected}, found node {j}", lineno, m.start(1) + 1)
        pairs = []
        body = m.group(2)
        pos = 0
        col0 = m.start(2)
        while True:
            pm = _PAIR_RE.match(body, pos)
            if not pm:
                raise GenotypeParseError("malformed '<op>(<src>)' entry", lineno, col0 + pos + 1)
            name = pm.group(1)
            if name not in _VALID_NAMES:
                raise GenotypeParseError(f"unknown operation {name!r}", lineno, col0 + pos + 1)
            src = int(pm.group(2))
            if not 1 <= src < j:
                raise GenotypeParseError(f"source {src} out of range for node {j}", lineno, col0 + pm.start(2) + 1)
            pairs.append((OpKind(name), src))
            pos = pm.end()
            if pos == len(body):
                break
            if body.startswith(", ", pos):
                pos += 2
            else:
                raise GenotypeParseError("expected ', ' between entries", lineno, col0 + pos + 1)
        if len({s for _, s in pairs}) != len(pairs):
            raise GenotypeParseError(f"duplicate source in node {j}", lineno, col0 + 1)
        cells[current].append(_make_node(pairs))
    for t in CELL_TYPES:
        if t not in cells:
            raise GenotypeParseError(f"missing '{t}:' section", max(1, len(text.splitlines())), 1)
        if not cells[t]:
            raise GenotypeParseError(f"'{t}:' section has no nodes", max(1, len(text.splitlines())), 1)
    return Genotype(normal=tuple(cells["normal"]), reduce=tuple(cells["reduce"]))
