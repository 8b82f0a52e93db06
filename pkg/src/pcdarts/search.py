"""Architecture search (alternating first-order bilevel updates) and train-from-scratch."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Adam, backward, clip_grad_norm, cosine_lr
from .autodiff import functional as F
from .autodiff import Tensor
from .checkpoint import load_checkpoint, prefixed, save_checkpoint, unprefixed
from .frontend import FeatureSet, substream
from .genotype import ArchParams, CellSpec, Genotype, derive_genotype, genotype_parse, genotype_serialize
from .metrics import eer_from_scores
from .network import BONAFIDE, NetworkConfig, ScratchNetwork, SearchNetwork, forward_logits, logits_to_scores

Observer = Callable[[dict], None]


def _check_positive(obj, names):
    for name in names:
        if not getattr(obj, name) > 0:
            raise ValueError(f"{type(obj).__name__}.{name} must be positive, got {getattr(obj, name)}")


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 50
    warmup_epochs: int = 10
    batch_size: int = 64
    arch_lr: float = 6e-4
    arch_weight_decay: float = 1e-3
    w_lr_init: float = 0.01
    w_lr_final: float = 0.001
    k_c: int = 2
    class_weights: tuple = (1.0, 9.0)
    grad_clip: float = 5.0
    layers: int = 4
    channels: int = 16
    nodes: int = 7
    k: int = 2
    edge_score: str = "normalized"
    select_on: str = "alpha"
    target_frames: int = 400
    mask_max: int = 12
    mask_domain: str = "cepstral"
    eval_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        _check_positive(self, ("epochs", "batch_size", "arch_lr", "w_lr_init", "w_lr_final", "k_c", "grad_clip", "target_frames", "eval_batch"))
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"SearchConfig.warmup_epochs must lie in [0, epochs), got {self.warmup_epochs} with epochs={self.epochs}")
        if self.arch_weight_decay < 0:
            raise ValueError("SearchConfig.arch_weight_decay must be >= 0")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError(f"SearchConfig.class_weights must be two positive numbers, got {self.class_weights}")
        if self.edge_score not in ("normalized", "alpha-only"):
            raise ValueError(f"SearchConfig.edge_score must be 'normalized' or 'alpha-only', got {self.edge_score!r}")
        if self.select_on not in ("alpha", "dev"):
            raise ValueError(f"SearchConfig.select_on must be 'alpha' or 'dev', got {self.select_on!r}")
        if self.mask_max < 0:
            raise ValueError("SearchConfig.mask_max must be >= 0")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(self.layers, self.channels, "search", 2, 0.0, self.nodes, self.k_c)

    def w_lr(self, epoch: int) -> float:
        """Cosine-annealed network learning rate, reaching ``w_lr_final`` at the last epoch."""
        return cosine_lr(epoch, self.epochs - 1, self.w_lr_init, self.w_lr_final)


@dataclass(frozen=True)
class ScratchConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.001
    drop_path_p: float = 0.2
    class_weights: tuple = (1.0, 9.0)
    grad_clip: float = 5.0
    layers: int = 4
    channels: int = 16
    target_frames: int = 400
    mask_max: int = 12
    mask_domain: str = "cepstral"
    eval_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        _check_positive(self, ("epochs", "batch_size", "lr", "grad_clip", "target_frames", "eval_batch"))
        if not 0.0 <= self.drop_path_p < 1.0:
            raise ValueError(f"ScratchConfig.drop_path_p must lie in [0, 1), got {self.drop_path_p}")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError(f"ScratchConfig.class_weights must be two positive numbers, got {self.class_weights}")

    def network_config(self, nodes: int = 7) -> NetworkConfig:
        return NetworkConfig(self.layers, self.channels, "scratch", 2, self.drop_path_p, nodes)


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    return cls(**d)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def split_search_data(train_set: FeatureSet, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class random halves: (indices training omega, indices training alpha and beta).

    Classes are spoof systems when available, bona fide otherwise; a class of
    n utterances gives floor(n/2) to the first half.
    """
    rng = substream(seed, "split")
    groups: dict[tuple, list] = {}
    for i, (label, system) in enumerate(zip(train_set.labels, train_set.system_ids)):
        key = (int(label), system if label != BONAFIDE else "-")
        groups.setdefault(key, []).append(i)
    w_half, a_half = [], []
    for key in sorted(groups):
        idx = np.asarray(groups[key])
        if idx.size < 2:
            name = "bonafide" if key[0] == BONAFIDE else f"spoof/{key[1]}"
            raise ValueError(f"class {name} has {idx.size} utterance(s); the search split needs at least 2")
        idx = idx[rng.permutation(idx.size)]
        half = idx.size // 2
        w_half.extend(idx[:half])
        a_half.extend(idx[half:])
    return np.sort(np.asarray(w_half, dtype=int)), np.sort(np.asarray(a_half, dtype=int))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of ``batch_size``; a trailing single sample is dropped (batch norm needs two)."""
    perm = rng.permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size < 2:
        batches.pop()
    return batches


class _Cycler:
    """Endless stream of batches over ``n`` items, reshuffled after each pass."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue: list = []

    def next(self) -> np.ndarray:
        if not self.queue:
            self.queue = epoch_batches(self.n, self.batch_size, self.rng)
        return self.queue.pop(0)


def _loss(model, x: np.ndarray, y: np.ndarray, weights, where: str):
    logits = model(Tensor(x))
    try:
        loss = F.weighted_cross_entropy(logits, y, weights)
    except FloatingPointError as exc:
        raise FloatingPointError(f"{where}: {exc}") from None
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"{where}: non-finite loss")
    correct = int((logits.data.argmax(axis=1) == y).sum())
    return loss, correct


def evaluate_split(model, data: FeatureSet, target_T: int, batch_size: int = 256) -> dict:
    """Eval-mode accuracy (argmax, i.e. 0.5 posterior) and EER on a whole feature set."""
    logits = forward_logits(model, data.all_fixed(target_T), batch_size)
    acc = float((logits.argmax(axis=1) == data.labels).mean())
    scores = logits_to_scores(logits)
    bona, spoof = scores[data.labels == BONAFIDE], scores[data.labels != BONAFIDE]
    eer = eer_from_scores(bona, spoof)[0] if bona.size and spoof.size else float("nan")
    return {"acc": acc, "eer": eer, "scores": scores}


class MetricsLog:
    """Append-only CSV with a fixed header."""

    def __init__(self, path, columns: Sequence[str], resume: bool = False):
        self.path = Path(path)
        self.columns = list(columns)
        if not (resume and self.path.exists()):
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(self.columns)

    def truncate(self, n_rows: int) -> None:
        with open(self.path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[: n_rows + 1]
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(rows)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _rng_states(gens: dict) -> dict:
    return {k: g.bit_generator.state for k, g in gens.items()}


def _restore_rngs(gens: dict, states: dict) -> None:
    for k, g in gens.items():
        g.bit_generator.state = states[k]


# ---------------------------------------------------------------------------
# architecture search
# ---------------------------------------------------------------------------


@dataclass
class SearchState:
    cfg: SearchConfig
    model: SearchNetwork
    arch: ArchParams
    w_opt: Adam
    arch_opt: Adam
    w_batches: np.random.Generator
    a_batches: _Cycler
    augment: np.random.Generator


def init_search_state(cfg: SearchConfig, n_alpha: int) -> SearchState:
    """Supernet, architecture parameters, both optimizers and every random stream of a search."""
    arch = ArchParams(CellSpec(cfg.nodes), rng=substream(cfg.seed, "arch-init"))
    model = SearchNetwork(cfg.network_config(), arch, substream(cfg.seed, "init"))
    model.mask_rng = substream(cfg.seed, "masks")
    return SearchState(
        cfg, model, arch,
        Adam(model.parameters(), lr=cfg.w_lr_init),
        Adam(arch.tensors(), lr=cfg.arch_lr, weight_decay=cfg.arch_weight_decay),
        substream(cfg.seed, "batches"),
        _Cycler(n_alpha, cfg.batch_size, substream(cfg.seed, "alpha-batches")),
        substream(cfg.seed, "augment"),
    )


def search_epoch(state: SearchState, w_data: FeatureSet, a_data: FeatureSet, epoch: int, observer: Optional[Observer] = None) -> dict:
    """One epoch of alternating updates.

    After warm-up each step first moves (alpha, beta) on an alpha-half batch
    with omega held fixed, then moves omega on a w-half batch. Channel masks
    are redrawn on every forward pass.
    """
    cfg, model = state.cfg, state.model
    model.train()
    lr = cfg.w_lr(epoch)
    update_arch = epoch >= cfg.warmup_epochs
    arch_tensors = state.arch.tensors()
    omega = model.parameters()
    totals = {"train_loss": 0.0, "train_correct": 0, "train_n": 0, "val_loss": 0.0, "val_correct": 0, "val_n": 0}
    for step, idx in enumerate(epoch_batches(len(w_data), cfg.batch_size, state.w_batches)):
        a_ids: list = []
        if update_arch:
            a_idx = state.a_batches.next()
            xa, ya = a_data.batch(a_idx, cfg.target_frames)
            loss, correct = _loss(model, xa, ya, cfg.class_weights, f"search epoch {epoch} step {step} (architecture)")
            for t in arch_tensors:
                t.grad = None
            backward(loss)
            state.arch_opt.step()
            totals["val_loss"] += float(loss.data) * len(a_idx)
            totals["val_correct"] += correct
            totals["val_n"] += len(a_idx)
            a_ids = [a_data.utterance_ids[i] for i in a_idx]
        x, y = w_data.batch(idx, cfg.target_frames, True, state.augment, cfg.mask_max, cfg.mask_domain)
        loss, correct = _loss(model, x, y, cfg.class_weights, f"search epoch {epoch} step {step} (weights)")
        model.zero_grad()
        backward(loss)
        clip_grad_norm(omega, cfg.grad_clip)
        state.w_opt.step(lr)
        for t in arch_tensors:
            t.grad = None
        totals["train_loss"] += float(loss.data) * len(idx)
        totals["train_correct"] += correct
        totals["train_n"] += len(idx)
        if observer is not None:
            observer({"stage": "search", "epoch": epoch, "step": step, "w_lr": lr, "w_batch": len(idx), "alpha_batch": len(a_ids),
                      "w_ids": [w_data.utterance_ids[i] for i in idx], "alpha_ids": a_ids,
                      "arch_updated": update_arch, "k_c": cfg.k_c, "class_weights": cfg.class_weights})
    out = {
        "epoch": epoch,
        "w_lr": lr,
        "arch_updated": int(update_arch),
        "train_loss": totals["train_loss"] / max(totals["train_n"], 1),
        "train_acc": totals["train_correct"] / max(totals["train_n"], 1),
        "val_loss": totals["val_loss"] / totals["val_n"] if totals["val_n"] else float("nan"),
        "val_acc": totals["val_correct"] / totals["val_n"] if totals["val_n"] else float("nan"),
    }
    return out


def select_best_architecture(per_epoch: Sequence[tuple[Genotype, float]]) -> tuple[Genotype, int]:
    """Genotype with the highest accuracy; ties resolve to the later entry."""
    if not per_epoch:
        raise ValueError("no candidate architectures to select from")
    best = 0
    for i, (_, acc) in enumerate(per_epoch):
        if acc >= per_epoch[best][1]:
            best = i
    return per_epoch[best][0], best


@dataclass
class SearchResult:
    best_genotype: Genotype
    best_epoch: int
    genotypes: list
    history: list
    arch: ArchParams
    model: SearchNetwork


SEARCH_COLUMNS = ["epoch", "w_lr", "arch_updated", "train_loss", "train_acc", "val_loss", "val_acc",
                  "alpha_acc", "alpha_eer", "dev_acc", "dev_eer", "op_path_macs"]


def run_search(
    cfg: SearchConfig,
    train_set: FeatureSet,
    dev_set: Optional[FeatureSet] = None,
    run_dir=None,
    observer: Optional[Observer] = None,
    log: Optional[Callable[[str], None]] = None,
) -> SearchResult:
    """Split, warm up, alternate updates, derive a genotype every epoch and pick the best one."""
    if cfg.select_on == "dev" and dev_set is None:
        raise ValueError("select_on='dev' needs a development set")
    w_idx, a_idx = split_search_data(train_set, cfg.seed)
    w_data, a_data = train_set.subset(w_idx), train_set.subset(a_idx)
    if observer is not None:
        observer({"stage": "split", "w_indices": w_idx, "alpha_indices": a_idx})
    state = init_search_state(cfg, len(a_data))
    model, arch = state.model, state.arch
    out = Path(run_dir) if run_dir is not None else None
    metrics = None
    if out is not None:
        (out / "genotypes").mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out / "metrics.csv", SEARCH_COLUMNS)
    history, candidates, genotypes = [], [], []
    for epoch in range(cfg.epochs):
        row = search_epoch(state, w_data, a_data, epoch, observer)
        ev = evaluate_split(model, a_data, cfg.target_frames, cfg.eval_batch)
        row["alpha_acc"], row["alpha_eer"] = ev["acc"], ev["eer"]
        if dev_set is not None:
            dv = evaluate_split(model, dev_set, cfg.target_frames, cfg.eval_batch)
            row["dev_acc"], row["dev_eer"] = dv["acc"], dv["eer"]
        row["op_path_macs"] = model.op_path_macs()
        g = derive_genotype(arch, cfg.k, cfg.edge_score)
        genotypes.append(g)
        history.append(row)
        if observer is not None:
            observer({"stage": "epoch_end", "epoch": epoch, "arch": arch.snapshot(), "row": row})
        if epoch >= cfg.warmup_epochs:
            candidates.append((g, row["dev_acc"] if cfg.select_on == "dev" else row["alpha_acc"], epoch))
        if out is not None:
            (out / "genotypes" / f"epoch_{epoch:02d}.genotype").write_text(genotype_serialize(g), encoding="utf-8")
            metrics.append(row)
            np.savez(out / "arch_params.npz", **arch.snapshot())
        if log is not None:
            log(f"search epoch {epoch:3d}  lr {row['w_lr']:.5f}  train acc {row['train_acc']:.3f}  alpha acc {row['alpha_acc']:.3f}"
                + ("" if dev_set is None else f"  dev acc {row['dev_acc']:.3f}"))
    best, pos = select_best_architecture([(g, acc) for g, acc, _ in candidates])
    best_epoch = candidates[pos][2]
    if out is not None:
        (out / "best.genotype").write_text(genotype_serialize(best), encoding="utf-8")
    return SearchResult(best, best_epoch, genotypes, history, arch, model)


# ---------------------------------------------------------------------------
# train from scratch
# ---------------------------------------------------------------------------

SCRATCH_COLUMNS = ["epoch", "lr", "train_loss", "train_acc", "dev_acc", "dev_eer"]


@dataclass
class ScratchResult:
    model: ScratchNetwork
    history: list
    best_epoch: int
    best_dev_eer: float
    genotype: Genotype = field(repr=False, default=None)


def build_scratch_model(genotype: Genotype, cfg: ScratchConfig) -> ScratchNetwork:
    """Fresh network weights from the "init" stream; nothing carries over from the search."""
    nodes = 3 + len(genotype.normal) + 1
    model = ScratchNetwork(cfg.network_config(nodes), genotype, substream(cfg.seed, "init"))
    model.drop_rng = substream(cfg.seed, "drop-path")
    return model


def scratch_checkpoint_meta(cfg: ScratchConfig, genotype: Genotype, frontend: Optional[dict] = None) -> dict:
    return {"kind": "scratch", "scratch_config": asdict(cfg), "genotype": genotype_serialize(genotype), "frontend": frontend or {}}


def model_from_checkpoint(path):
    """Rebuild a scratch model (eval-ready) and return it with the checkpoint metadata."""
    meta, arrays = load_checkpoint(path)
    if meta.get("kind") != "scratch":
        raise ValueError(f"{path} is not a train-from-scratch checkpoint")
    cfg = config_from_dict(ScratchConfig, meta["scratch_config"])
    genotype = genotype_parse(meta["genotype"])
    model = build_scratch_model(genotype, cfg)
    model.load_state_dict(unprefixed("model/", arrays))
    model.eval()
    return model, meta


def train_from_scratch(
    genotype: Genotype,
    cfg: ScratchConfig,
    train_set: FeatureSet,
    dev_set: FeatureSet,
    run_dir=None,
    resume=None,
    observer: Optional[Observer] = None,
    log: Optional[Callable[[str], None]] = None,
    frontend: Optional[dict] = None,
    stop_after: Optional[int] = None,
) -> ScratchResult:
    """Adam on omega only, drop-path in training, best epoch kept by development EER.

    Every epoch writes ``checkpoints/last.npz`` (everything needed to
    resume bitwise, including generator states); an improving epoch also
    writes ``checkpoints/best.npz``. ``stop_after`` ends the run early after
    that many completed epochs (used to exercise resumption).
    """
    model = build_scratch_model(genotype, cfg)
    opt = Adam(model.parameters(), lr=cfg.lr)
    gens = {"batches": substream(cfg.seed, "scratch-batches"), "augment": substream(cfg.seed, "scratch-augment"), "drop-path": model.drop_rng}
    out = Path(run_dir) if run_dir is not None else None
    history: list = []
    best_epoch, best_eer, best_acc = -1, math.inf, -math.inf
    best_state = None
    start = 0
    if resume is not None:
        meta, arrays = load_checkpoint(resume)
        if meta.get("kind") != "scratch" or meta.get("genotype") != genotype_serialize(genotype):
            raise ValueError(f"{resume} does not belong to this genotype")
        stored = {k: v for k, v in meta["scratch_config"].items() if k != "epochs"}
        current = {k: v for k, v in json.loads(json.dumps(asdict(cfg))).items() if k != "epochs"}
        if stored != current:
            raise ValueError(f"{resume} was written with a different configuration")
        model.load_state_dict(unprefixed("model/", arrays))
        opt.load_state_dict(unprefixed("adam/", arrays))
        _restore_rngs(gens, meta["rng_states"])
        history = meta["history"]
        best_epoch, best_eer, best_acc = meta["best_epoch"], meta["best_dev_eer"], meta["best_dev_acc"]
        start = meta["epoch"] + 1
        if (run_dir is not None) and (Path(run_dir) / "checkpoints" / "best.npz").exists():
            best_state = unprefixed("model/", load_checkpoint(Path(run_dir) / "checkpoints" / "best.npz")[1])
    metrics = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out / "metrics.csv", SCRATCH_COLUMNS, resume=resume is not None)
        if resume is not None:
            metrics.truncate(len(history))
    params = model.parameters()
    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        model.train()
        tot_loss, tot_correct, tot_n = 0.0, 0, 0
        for step, idx in enumerate(epoch_batches(len(train_set), cfg.batch_size, gens["batches"])):
            x, y = train_set.batch(idx, cfg.target_frames, True, gens["augment"], cfg.mask_max, cfg.mask_domain)
            loss, correct = _loss(model, x, y, cfg.class_weights, f"scratch epoch {epoch} step {step}")
            model.zero_grad()
            backward(loss)
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            tot_loss += float(loss.data) * len(idx)
            tot_correct += correct
            tot_n += len(idx)
            if observer is not None:
                observer({"stage": "scratch", "epoch": epoch, "step": step, "lr": cfg.lr, "batch": len(idx),
                          "drop_path_p": model.drop_path_p, "class_weights": cfg.class_weights})
        ev = evaluate_split(model, dev_set, cfg.target_frames, cfg.eval_batch)
        row = {"epoch": epoch, "lr": cfg.lr, "train_loss": tot_loss / max(tot_n, 1), "train_acc": tot_correct / max(tot_n, 1),
               "dev_acc": ev["acc"], "dev_eer": ev["eer"]}
        history.append(row)
        improved = (ev["eer"], -ev["acc"]) <= (best_eer, -best_acc)
        if improved:
            best_epoch, best_eer, best_acc = epoch, ev["eer"], ev["acc"]
            best_state = model.state_dict()
        if out is not None:
            metrics.append(row)
            meta = scratch_checkpoint_meta(cfg, genotype, frontend)
            state = prefixed("model/", model.state_dict())
            if improved:
                save_checkpoint(out / "checkpoints" / "best.npz", {**meta, "epoch": epoch, "dev_eer": ev["eer"], "dev_acc": ev["acc"]}, state)
            meta.update(epoch=epoch, history=history, best_epoch=best_epoch, best_dev_eer=best_eer, best_dev_acc=best_acc,
                        rng_states=_rng_states(gens))
            save_checkpoint(out / "checkpoints" / "last.npz", meta, {**state, **prefixed("adam/", opt.state_dict())})
        if log is not None:
            log(f"train epoch {epoch:3d}  loss {row['train_loss']:.4f}  train acc {row['train_acc']:.3f}  "
                f"dev acc {row['dev_acc']:.3f}  dev EER {100 * row['dev_eer']:.2f}%")
    if best_state is not None:
        model.load_state_dict(best_state)
    return ScratchResult(model, history, best_epoch, best_eer, genotype)
