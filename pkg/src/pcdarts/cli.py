"""Command-line driver: search, train, eval, inspect-genotype, extract-features, synth-data.

Configuration is layered: built-in defaults, then an optional ``--config``
JSON/YAML file (flat mapping of field names), then explicit flags. The
resolved configuration is written to ``config.json`` in every run directory.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import CheckpointVersionError, prefixed, save_checkpoint
from .frontend import (
    FeatureCache,
    FrontendConfig,
    ProtocolError,
    features_from_protocol,
    load_feature_set,
    save_feature_set,
    substream,
    synth_dataset,
    synth_feature_set,
    write_protocol,
    ProtocolEntry,
)
from .genotype import CELL_TYPES, CellSpec, Genotype, GenotypeParseError, genotype_parse, genotype_serialize
from .metrics import ScoreRecord, build_report, load_cost_model, write_report, write_scores
from .network import BONAFIDE, count_params, forward_logits, logits_to_scores
from .ops import PRIMITIVES
from .search import (
    SCRATCH_COLUMNS,
    ScratchConfig,
    SearchConfig,
    model_from_checkpoint,
    run_search,
    train_from_scratch,
)

log = logging.getLogger("pcdarts")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags, configuration values or missing inputs (exit code 2)."""


@dataclass(frozen=True)
class DataConfig:
    synthetic: bool = False
    synth_n: int = 400
    synth_dev_n: int = 200
    synth_eval_n: int = 200
    synth_strength: float = 0.8
    synth_partition: str = "eval"
    protocol: Optional[str] = None
    audio_dir: Optional[str] = None
    features: Optional[str] = None
    dev_protocol: Optional[str] = None
    dev_audio_dir: Optional[str] = None
    dev_features: Optional[str] = None
    cache_dir: Optional[str] = None
    n_filters: int = 70
    n_ceps: int = 20
    delta_window: int = 2

    def frontend(self) -> FrontendConfig:
        return FrontendConfig(n_ceps=self.n_ceps, n_filters=self.n_filters, delta_window=self.delta_window)


# ---------------------------------------------------------------------------
# argument parsing and config layering
# ---------------------------------------------------------------------------

_SEARCH_FLAGS = {
    "epochs": int, "warmup_epochs": int, "batch_size": int, "arch_lr": float, "arch_weight_decay": float,
    "w_lr_init": float, "w_lr_final": float, "k_c": int, "grad_clip": float, "layers": int, "channels": int,
    "nodes": int, "k": int, "edge_score": str, "select_on": str, "target_frames": int, "mask_max": int,
    "mask_domain": str, "eval_batch": int, "seed": int,
}
_SCRATCH_FLAGS = {
    "epochs": int, "batch_size": int, "lr": float, "drop_path_p": float, "grad_clip": float, "layers": int,
    "channels": int, "target_frames": int, "mask_max": int, "mask_domain": str, "eval_batch": int, "seed": int,
}
_ALIASES = {"k_c": ["--kc"], "drop_path_p": ["--drop-path"], "target_frames": ["--target-frames"]}
_CHOICES = {"edge_score": ["normalized", "alpha-only"], "select_on": ["alpha", "dev"], "mask_domain": ["cepstral", "filterbank"]}


def _flag(name: str) -> list[str]:
    main = "--" + name.replace("_", "-")
    return [main] + [a for a in _ALIASES.get(name, []) if a != main]


def _add_fields(p: argparse.ArgumentParser, spec: dict) -> None:
    for name, typ in spec.items():
        p.add_argument(*_flag(name), dest=name, type=typ, default=None, choices=_CHOICES.get(name))


def _add_data(p: argparse.ArgumentParser, dev: bool = False) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--synthetic", action="store_const", const=True, default=None, help="use the built-in synthetic corpus")
    g.add_argument("--synth-n", dest="synth_n", type=int, default=None, help="synthetic utterances per class (train)")
    g.add_argument("--synth-dev-n", dest="synth_dev_n", type=int, default=None)
    g.add_argument("--synth-eval-n", dest="synth_eval_n", type=int, default=None)
    g.add_argument("--synth-strength", dest="synth_strength", type=float, default=None)
    g.add_argument("--protocol", default=None, help="ASVspoof-style CM protocol file")
    g.add_argument("--audio-dir", dest="audio_dir", default=None)
    g.add_argument("--features", default=None, help="feature archive written by extract-features")
    if dev:
        g.add_argument("--dev-protocol", dest="dev_protocol", default=None)
        g.add_argument("--dev-audio-dir", dest="dev_audio_dir", default=None)
        g.add_argument("--dev-features", dest="dev_features", default=None)
    g.add_argument("--cache-dir", dest="cache_dir", default=None, help="per-utterance feature cache")
    g.add_argument("--n-filters", dest="n_filters", type=int, default=None)
    g.add_argument("--delta-window", dest="delta_window", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcdarts", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="architecture search")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="run directory")
    _add_fields(p, _SEARCH_FLAGS)
    _add_data(p, dev=True)

    p = sub.add_parser("train", help="train a genotype from scratch")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--genotype", default=None, help="genotype text file (e.g. best.genotype of a search run)")
    p.add_argument("--resume", default=None, help="checkpoints/last.npz of an interrupted run")
    _add_fields(p, _SCRATCH_FLAGS)
    _add_data(p, dev=True)

    p = sub.add_parser("eval", help="score a partition and compute EER / min t-DCF")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--cost-model", dest="cost_model", default=None, help="named cost model or JSON path; omit to skip min t-DCF")
    p.add_argument("--score-out", dest="score_out", default=None)
    p.add_argument("--score", choices=["log_softmax", "logit"], default=None)
    p.add_argument("--synth-partition", dest="synth_partition", choices=["train", "dev", "eval"], default=None)
    p.add_argument("--seed", type=int, default=None)
    _add_data(p)

    p = sub.add_parser("inspect-genotype", help="render a genotype as a table and a graph description")
    p.add_argument("genotype")
    p.add_argument("--dot", default=None, help="graph-description output (default: <genotype>.dot)")
    p.add_argument("--canonical", default=None, help="also write the canonical text form here")

    p = sub.add_parser("extract-features", help="compute LFCC features for a protocol")
    p.add_argument("--protocol", required=True)
    p.add_argument("--audio-dir", dest="audio_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", dest="cache_dir", default=None)
    p.add_argument("--n-filters", dest="n_filters", type=int, default=70)
    p.add_argument("--delta-window", dest="delta_window", type=int, default=2)

    p = sub.add_parser("synth-data", help="write the synthetic corpus as audio files plus protocols")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synth-n", dest="synth_n", type=int, default=400)
    p.add_argument("--synth-dev-n", dest="synth_dev_n", type=int, default=200)
    p.add_argument("--synth-eval-n", dest="synth_eval_n", type=int, default=200)
    p.add_argument("--synth-strength", dest="synth_strength", type=float, default=0.8)
    p.add_argument("--format", choices=["flac", "wav"], default="flac")
    return parser


def _read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} does not exist")
    text = p.read_text(encoding="utf-8")
    if p.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping of field names to values")
    return data


def resolve(args: argparse.Namespace, defaults: dict, extra_defaults: dict) -> dict:
    """Defaults < config file < explicit flags."""
    merged = {**defaults, **extra_defaults}
    if getattr(args, "config", None):
        file_cfg = _read_config_file(args.config)
        unknown = set(file_cfg) - set(merged)
        if unknown:
            raise UsageError(f"unknown config field(s) in {args.config}: {sorted(unknown)}")
        merged.update(file_cfg)
    for k in merged:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _split(resolved: dict, cls):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in resolved.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------


def _must_exist(path, what: str) -> None:
    if not Path(path).exists():
        raise UsageError(f"{what} {path} does not exist")


def _load_partition(data: DataConfig, seed: int, which: str):
    """which: 'train' (primary flags), 'dev' (dev flags) or a synthetic partition name."""
    fe = data.frontend()
    if data.synthetic:
        n = {"train": data.synth_n, "dev": data.synth_dev_n, "eval": data.synth_eval_n}[which]
        stream = {"train": "synth-data", "dev": "synth-dev", "eval": "synth-eval"}[which]
        return synth_feature_set(n, data.synth_strength, substream(seed, stream), fe, prefix=which.upper())
    prefix = "dev_" if which == "dev" else ""
    feats, proto, audio = (getattr(data, prefix + k) for k in ("features", "protocol", "audio_dir"))
    if feats:
        _must_exist(feats, "feature archive")
        return load_feature_set(feats)
    if proto:
        _must_exist(proto, "protocol file")
        if not audio:
            raise UsageError(f"--{prefix.replace('_', '-')}protocol needs --{prefix.replace('_', '-')}audio-dir")
        _must_exist(audio, "audio directory")
        cache = FeatureCache(data.cache_dir, fe) if data.cache_dir else None
        return features_from_protocol(proto, audio, fe, cache)
    return None


def _require(fs, what: str):
    if fs is None:
        raise UsageError(f"missing {what}: pass --synthetic, --features, or --protocol with --audio-dir")
    return fs


def _prepare_run_dir(out: str, resolved: dict) -> Path:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def _data_defaults(dev: bool) -> dict:
    d = asdict(DataConfig())
    if not dev:
        for k in ("dev_protocol", "dev_audio_dir", "dev_features"):
            d.pop(k)
    return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_search(args) -> int:
    defaults = asdict(SearchConfig())
    defaults["warmup_epochs"] = None
    resolved = resolve(args, defaults, {**_data_defaults(True), "out": "runs/search"})
    if resolved["warmup_epochs"] is None:
        resolved["warmup_epochs"] = 10 if resolved["epochs"] == 50 else resolved["epochs"] // 5
    cfg = _split(resolved, SearchConfig)
    data = _split(resolved, DataConfig)
    train = _require(_load_partition(data, cfg.seed, "train"), "training data")
    dev = _load_partition(data, cfg.seed, "dev")
    out = _prepare_run_dir(resolved["out"], resolved)
    t0 = time.perf_counter()
    result = run_search(cfg, train, dev, out, log=log.info)
    elapsed = time.perf_counter() - t0
    save_checkpoint(
        out / "checkpoints" / "search_last.npz",
        {"kind": "search", "search_config": asdict(cfg), "best_genotype": genotype_serialize(result.best_genotype), "epoch": cfg.epochs - 1},
        {**prefixed("model/", result.model.state_dict()), **prefixed("arch/", result.arch.snapshot())},
    )
    from .plotting import plot_arch_weights, plot_learning_curves

    plot_learning_curves(result.history, out / "figures" / "search_curves.png", ["train_acc", "alpha_acc", "dev_acc"])
    plot_arch_weights(result.arch.snapshot(), [p.value for p in PRIMITIVES], CellSpec(cfg.nodes).edges, out / "figures" / "arch_weights.png")
    last = result.history[-1]
    report = [
        f"best epoch      {result.best_epoch}",
        f"selected on     {cfg.select_on}",
        f"op-path MACs    {last['op_path_macs']} (k_c={cfg.k_c}, last forward pass)",
        f"search seconds  {elapsed:.1f}",
        "",
        genotype_serialize(result.best_genotype),
    ]
    (out / "report.txt").write_text("\n".join(report), encoding="utf-8")
    print(genotype_serialize(result.best_genotype), end="")
    log.info("search finished in %.1f s; best epoch %d; run directory %s", elapsed, result.best_epoch, out)
    return EXIT_OK


def _read_genotype(path) -> Genotype:
    _must_exist(path, "genotype file")
    return genotype_parse(Path(path).read_text(encoding="utf-8"))


def cmd_train(args) -> int:
    resolved = resolve(args, asdict(ScratchConfig()), {**_data_defaults(True), "out": "runs/train", "genotype": None})
    if not resolved["genotype"]:
        raise UsageError("train needs --genotype")
    cfg = _split(resolved, ScratchConfig)
    data = _split(resolved, DataConfig)
    genotype = _read_genotype(resolved["genotype"])
    if args.resume:
        _must_exist(args.resume, "checkpoint")
    train = _require(_load_partition(data, cfg.seed, "train"), "training data")
    dev = _require(_load_partition(data, cfg.seed, "dev"), "development data (--dev-protocol/--dev-features, or --synthetic)")
    out = _prepare_run_dir(resolved["out"], resolved)
    t0 = time.perf_counter()
    frontend = asdict(data.frontend())
    result = train_from_scratch(genotype, cfg, train, dev, out, resume=args.resume, log=log.info, frontend=frontend)
    elapsed = time.perf_counter() - t0
    from .plotting import plot_learning_curves

    plot_learning_curves(result.history, out / "figures" / "train_curves.png", ["train_acc", "dev_acc", "dev_eer"])
    report = [
        f"parameters      {count_params(result.model)}",
        f"best epoch      {result.best_epoch}",
        f"best dev EER    {100 * result.best_dev_eer:.3f} %",
        f"train seconds   {elapsed:.1f}",
    ]
    (out / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    log.info("training finished in %.1f s; best epoch %d (dev EER %.3f%%)", elapsed, result.best_epoch, 100 * result.best_dev_eer)
    return EXIT_OK


def cmd_eval(args) -> int:
    extra = {**_data_defaults(False), "out": "runs/eval", "checkpoint": None, "cost_model": None, "score_out": None,
             "score": "log_softmax", "seed": 0}
    resolved = resolve(args, {}, extra)
    if not resolved["checkpoint"]:
        raise UsageError("eval needs --checkpoint")
    _must_exist(resolved["checkpoint"], "checkpoint")
    data = _split(resolved, DataConfig)
    cost = None
    if resolved["cost_model"]:
        try:
            cost = load_cost_model(resolved["cost_model"])
        except (ValueError, OSError) as exc:
            raise UsageError(f"cost model: {exc}") from None
    model, meta = model_from_checkpoint(resolved["checkpoint"])
    target_T = meta["scratch_config"]["target_frames"]
    which = data.synth_partition if data.synthetic else "train"
    fs = _require(_load_partition(data, resolved["seed"], which), "evaluation data")
    out = _prepare_run_dir(resolved["out"], resolved)
    logits = forward_logits(model, fs.all_fixed(target_T))
    scores = logits_to_scores(logits, resolved["score"])
    keys = ["bonafide" if y == BONAFIDE else "spoof" for y in fs.labels]
    records = [ScoreRecord(u, float(s), k, sys_id) for u, s, k, sys_id in zip(fs.utterance_ids, scores, keys, fs.system_ids)]
    acc = float((logits.argmax(axis=1) == fs.labels).mean())
    report = build_report(records, cost, accuracy_value=acc)
    write_scores(resolved["score_out"] or out / "scores.txt", records)
    write_report(report, records, out)
    from .plotting import plot_det, plot_score_histogram

    plot_score_histogram(records, out / "figures" / "score_histogram.png", threshold=report.eer_threshold)
    plot_det(records, out / "figures" / "det.png", eer=report.eer)
    print(report.summary(), end="")
    return EXIT_OK


def render_genotype_table(g: Genotype) -> str:
    lines = []
    for t in CELL_TYPES:
        nodes = g.cell(t)
        lines.append(f"{t} cell: {len(nodes)} intermediate nodes")
        lines.append(f"  {'node':<5} {'input':<6} operation")
        for offset, pairs in enumerate(nodes):
            for op, src in pairs:
                lines.append(f"  {offset + 3:<5} {src:<6} {op.value}")
    return "\n".join(lines) + "\n"


def genotype_to_dot(g: Genotype) -> str:
    lines = ["digraph genotype {", "  rankdir=LR;"]
    for t in CELL_TYPES:
        nodes = g.cell(t)
        out_node = 3 + len(nodes)
        lines.append(f"  subgraph cluster_{t} {{")
        lines.append(f'    label="{t}";')
        lines.append(f'    {t}_1 [label="c_(k-2)", shape=box];')
        lines.append(f'    {t}_2 [label="c_(k-1)", shape=box];')
        for offset, pairs in enumerate(nodes):
            j = offset + 3
            lines.append(f'    {t}_{j} [label="{j}"];')
            for op, src in pairs:
                lines.append(f'    {t}_{src} -> {t}_{j} [label="{op.value}"];')
        lines.append(f'    {t}_{out_node} [label="c_(k)", shape=box];')
        for j in range(3, out_node):
            lines.append(f"    {t}_{j} -> {t}_{out_node};")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    g = _read_genotype(args.genotype)
    print(render_genotype_table(g), end="")
    canonical = genotype_serialize(g)
    print()
    print(canonical, end="")
    dot = Path(args.dot) if args.dot else Path(args.genotype).with_suffix(".dot")
    dot.write_text(genotype_to_dot(g), encoding="utf-8")
    if args.canonical:
        Path(args.canonical).write_text(canonical, encoding="utf-8")
    return EXIT_OK


def cmd_extract(args) -> int:
    data = DataConfig(protocol=args.protocol, audio_dir=args.audio_dir, cache_dir=args.cache_dir,
                      n_filters=args.n_filters, delta_window=args.delta_window)
    fs = _load_partition(data, 0, "train")
    save_feature_set(args.out, fs, data.frontend())
    print(f"{len(fs)} utterances -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    import soundfile as sf

    out = Path(args.out)
    for part, n, stream in (("train", args.synth_n, "synth-data"), ("dev", args.synth_dev_n, "synth-dev"), ("eval", args.synth_eval_n, "synth-eval")):
        audio_dir = out / part
        audio_dir.mkdir(parents=True, exist_ok=True)
        utts = synth_dataset(n, args.synth_strength, substream(args.seed, stream), prefix=part.upper())
        entries = []
        for u in utts:
            sf.write(str(audio_dir / f"{u.utterance.utterance_id}.{args.format}"), u.utterance.samples, u.utterance.sample_rate,
                     subtype="PCM_16")
            entries.append(ProtocolEntry(u.speaker_id, u.utterance.utterance_id, u.system_id, u.key))
        write_protocol(out / f"{part}.protocol.txt", entries)
    print(f"synthetic corpus written to {out}")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect-genotype": cmd_inspect,
    "extract-features": cmd_extract,
    "synth-data": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, GenotypeParseError, ProtocolError) as exc:
        print(f"pcdarts {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointVersionError as exc:
        print(f"pcdarts {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 3
        print(f"pcdarts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
