"""Partially connected differentiable architecture search for audio anti-spoofing.

A small numpy autodiff engine, the PC-DARTS search space and bilevel search,
an LFCC front-end, and EER / min t-DCF evaluation.
"""

__version__ = "0.1.0"

from .genotype import ArchParams, CellSpec, Genotype, derive_genotype, genotype_parse, genotype_serialize
from .network import NetworkConfig, build_network, count_params, forward_score
from .ops import PRIMITIVES, OpKind
from .search import ScratchConfig, SearchConfig, run_search, train_from_scratch

__all__ = [
    "ArchParams",
    "CellSpec",
    "Genotype",
    "NetworkConfig",
    "OpKind",
    "PRIMITIVES",
    "ScratchConfig",
    "SearchConfig",
    "build_network",
    "count_params",
    "derive_genotype",
    "forward_score",
    "genotype_parse",
    "genotype_serialize",
    "run_search",
    "train_from_scratch",
]
