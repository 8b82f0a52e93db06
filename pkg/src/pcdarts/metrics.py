"""Detection metrics (accuracy, pooled EER, normalised min t-DCF) and evaluation reports.

Scores follow the convention "higher = more bona fide". At threshold t a
bona fide trial is missed when its score is below t and a spoof is a false
alarm when its score is at or above t. Thresholds are swept over the
midpoints between adjacent sorted unique scores plus -inf and +inf.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

KEY_NAMES = ("bonafide", "spoof")


@dataclass(frozen=True)
class ScoreRecord:
    utterance_id: str
    score: float
    key: str
    system_id: str = "-"

    def __post_init__(self):
        if self.key not in KEY_NAMES:
            raise ValueError(f"{self.utterance_id}: key must be 'bonafide' or 'spoof', got {self.key!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"{self.utterance_id}: non-finite score {self.score}")


def split_scores(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.score for r in records if r.key == "bonafide"], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.key == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise ValueError(f"need at least one bona fide and one spoof trial, got {bona.size} and {spoof.size}")
    return bona, spoof


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    mids = 0.5 * u[:-1] + 0.5 * u[1:]
    return np.concatenate([[-np.inf], mids, [np.inf]])


def error_rates(bona: np.ndarray, spoof: np.ndarray, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Miss rate (bona fide < t) and false-alarm rate (spoof >= t) at each threshold."""
    p_miss = np.searchsorted(np.sort(bona), thresholds, side="left") / bona.size
    p_fa = (spoof.size - np.searchsorted(np.sort(spoof), thresholds, side="left")) / spoof.size
    return p_miss, p_fa


def eer_from_rates(thresholds: np.ndarray, p_miss: np.ndarray, p_fa: np.ndarray) -> tuple[float, float]:
    """Linear interpolation of the miss / false-alarm crossing.

    ``p_miss`` is non-decreasing and ``p_fa`` non-increasing in the threshold,
    so the first index with p_miss >= p_fa brackets the crossing.
    """
    diff = p_miss - p_fa
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0 or i == 0:
        return float(p_miss[i]), float(thresholds[i])
    d0, d1 = diff[i - 1], diff[i]
    lam = -d0 / (d1 - d0)
    eer = p_miss[i - 1] + lam * (p_miss[i] - p_miss[i - 1])
    t0, t1 = thresholds[i - 1], thresholds[i]
    if np.isfinite(t0) and np.isfinite(t1):
        thr = t0 + lam * (t1 - t0)
    else:
        thr = t1 if np.isfinite(t1) else t0
    return float(eer), float(thr)


def eer_from_scores(bona: np.ndarray, spoof: np.ndarray) -> tuple[float, float]:
    thresholds = candidate_thresholds(np.concatenate([bona, spoof]))
    return eer_from_rates(thresholds, *error_rates(bona, spoof, thresholds))


def compute_eer(records: Sequence[ScoreRecord]) -> tuple[float, float]:
    """Pooled equal error rate (fraction) and the threshold where it occurs."""
    return eer_from_scores(*split_scores(records))


# ---------------------------------------------------------------------------
# tandem detection cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Priors, costs and the fixed ASV operating point of the tandem cost.

    ``variant='2019'`` uses the revised normalised form; ``'2018'`` adds the
    ASV-only constant term to both the cost and its normaliser.
    """

    p_tar: float
    p_non: float
    p_spoof: float
    c_miss_asv: float
    c_fa_asv: float
    c_miss_cm: float
    c_fa_cm: float
    p_miss_asv: float
    p_fa_asv: float
    p_miss_spoof_asv: float
    variant: str = "2019"
    name: str = "custom"
    source: str = ""

    def __post_init__(self):
        priors = (self.p_tar, self.p_non, self.p_spoof)
        if any(p < 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-9:
            raise ValueError(f"cost model priors must be non-negative and sum to 1, got {priors}")
        for name in ("c_miss_asv", "c_fa_asv", "c_miss_cm", "c_fa_cm"):
            if getattr(self, name) < 0:
                raise ValueError(f"cost model field {name} must be >= 0")
        for name in ("p_miss_asv", "p_fa_asv", "p_miss_spoof_asv"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"cost model field {name} must lie in [0, 1]")
        if self.variant not in ("2018", "2019"):
            raise ValueError(f"cost model variant must be '2018' or '2019', got {self.variant!r}")

    @property
    def c0(self) -> float:
        return self.p_tar * self.c_miss_asv * self.p_miss_asv + self.p_non * self.c_fa_asv * self.p_fa_asv

    @property
    def c1(self) -> float:
        return self.p_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv) - self.p_non * self.c_fa_asv * self.p_fa_asv

    @property
    def c2(self) -> float:
        return self.c_fa_cm * self.p_spoof * (1.0 - self.p_miss_spoof_asv)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost model field(s): {sorted(unknown)}")
        return cls(**d)


DEFAULT_COST_MODEL = "asvspoof2019-la"


def load_cost_model(name_or_path: str = DEFAULT_COST_MODEL) -> CostModel:
    """Load a shipped cost model by name or a JSON file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        with open(p, encoding="utf-8") as fh:
            return CostModel.from_dict(json.load(fh))
    fname = name_or_path.replace("-", "_") + ".json"
    ref = resources.files("pcdarts.data").joinpath(fname)
    if not ref.is_file():
        raise ValueError(f"unknown cost model {name_or_path!r}")
    return CostModel.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def tdcf_curve(p_miss: np.ndarray, p_fa: np.ndarray, cost: CostModel) -> np.ndarray:
    c1, c2 = cost.c1, cost.c2
    if c1 <= 0 or c2 <= 0:
        raise ValueError(f"degenerate cost model: C1={c1}, C2={c2} (both must be positive)")
    if cost.variant == "2019":
        return (c1 * p_miss + c2 * p_fa) / min(c1, c2)
    c0 = cost.c0
    return (c0 + c1 * p_miss + c2 * p_fa) / (c0 + min(c1, c2))


def tdcf_from_scores(bona: np.ndarray, spoof: np.ndarray, cost: CostModel) -> tuple[float, float]:
    thresholds = candidate_thresholds(np.concatenate([bona, spoof]))
    curve = tdcf_curve(*error_rates(bona, spoof, thresholds), cost)
    i = int(np.argmin(curve))
    return float(curve[i]), float(thresholds[i])


def compute_min_tdcf(records: Sequence[ScoreRecord], cost: CostModel) -> tuple[float, float]:
    """Minimum normalised tandem detection cost and its threshold."""
    return tdcf_from_scores(*split_scores(records), cost)


def accuracy(records: Sequence[ScoreRecord], threshold: float) -> float:
    """Fraction of trials on the correct side of ``threshold`` (bona fide when score >= threshold)."""
    correct = sum((r.score >= threshold) == (r.key == "bonafide") for r in records)
    return correct / len(records) if records else float("nan")


# ---------------------------------------------------------------------------
# score files and reports
# ---------------------------------------------------------------------------


def write_scores(path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.utterance_id} {r.score:.17g}\n")


def read_scores(path) -> list[tuple[str, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 'utterance_id score'")
            out.append((parts[0], float(parts[1])))
    return out


def join_scores(scores: Sequence[tuple[str, float]], keys: dict, systems: Optional[dict] = None) -> list[ScoreRecord]:
    systems = systems or {}
    missing = [u for u, _ in scores if u not in keys]
    if missing:
        raise ValueError(f"{len(missing)} scored utterance(s) have no key, e.g. {missing[0]}")
    return [ScoreRecord(u, s, keys[u], systems.get(u, "-")) for u, s in scores]


@dataclass
class EvalReport:
    n_trials: int
    n_bonafide: int
    n_spoof: int
    accuracy: float
    eer: float
    eer_threshold: float
    min_tdcf: Optional[float]
    tdcf_threshold: Optional[float]
    cost_model: Optional[str]
    per_attack_eer: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [
            f"trials        {self.n_trials} ({self.n_bonafide} bona fide, {self.n_spoof} spoof)",
            f"accuracy      {100 * self.accuracy:.2f} %",
            f"EER           {100 * self.eer:.3f} %  (threshold {self.eer_threshold:.6g})",
        ]
        if self.min_tdcf is None:
            lines.append("min t-DCF     unavailable (no cost model)")
        else:
            lines.append(f"min t-DCF     {self.min_tdcf:.5f}  (threshold {self.tdcf_threshold:.6g}, cost model {self.cost_model})")
        for system, eer in sorted(self.per_attack_eer.items()):
            lines.append(f"EER {system:<9} {100 * eer:.3f} %")
        return "\n".join(lines) + "\n"


def score_histogram(records: Sequence[ScoreRecord], bins: int = 40):
    bona, spoof = split_scores(records)
    edges = np.histogram_bin_edges(np.concatenate([bona, spoof]), bins=bins)
    return edges, np.histogram(bona, edges)[0], np.histogram(spoof, edges)[0]


def det_points(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bona, spoof = split_scores(records)
    thresholds = candidate_thresholds(np.concatenate([bona, spoof]))
    p_miss, p_fa = error_rates(bona, spoof, thresholds)
    return thresholds, p_miss, p_fa


def build_report(
    records: Sequence[ScoreRecord],
    cost: Optional[CostModel] = None,
    accuracy_value: Optional[float] = None,
    decision_threshold: float = math.log(0.5),
) -> EvalReport:
    """Pooled metrics plus per-attack EER (each spoof system against all bona fide trials)."""
    bona, spoof = split_scores(records)
    eer, eer_thr = eer_from_scores(bona, spoof)
    min_tdcf = tdcf_thr = None
    if cost is not None:
        min_tdcf, tdcf_thr = tdcf_from_scores(bona, spoof, cost)
    per_attack = {}
    systems = sorted({r.system_id for r in records if r.key == "spoof" and r.system_id != "-"})
    for s in systems:
        sub = np.array([r.score for r in records if r.key == "spoof" and r.system_id == s])
        per_attack[s] = eer_from_scores(bona, sub)[0]
    acc = accuracy_value if accuracy_value is not None else accuracy(records, decision_threshold)
    return EvalReport(
        n_trials=len(records),
        n_bonafide=int(bona.size),
        n_spoof=int(spoof.size),
        accuracy=float(acc),
        eer=eer,
        eer_threshold=eer_thr,
        min_tdcf=min_tdcf,
        tdcf_threshold=tdcf_thr,
        cost_model=cost.name if cost is not None else None,
        per_attack_eer=per_attack,
    )


def write_report(report: EvalReport, records: Sequence[ScoreRecord], out_dir) -> dict:
    """Write scores.csv, metrics.csv, per_attack.csv, det.csv, histogram.csv and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in ("scores.csv", "metrics.csv", "per_attack.csv", "det.csv", "histogram.csv", "summary.txt")}
    with open(paths["scores.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "system_id", "key", "score"])
        for r in records:
            w.writerow([r.utterance_id, r.system_id, r.key, f"{r.score:.17g}"])
    with open(paths["metrics.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        row = asdict(report)
        row.pop("per_attack_eer")
        w.writerow(list(row))
        w.writerow(["" if v is None else v for v in row.values()])
    with open(paths["per_attack.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["system_id", "eer"])
        for s, e in sorted(report.per_attack_eer.items()):
            w.writerow([s, e])
    thresholds, p_miss, p_fa = det_points(records)
    with open(paths["det.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "p_miss", "p_fa"])
        w.writerows(zip(thresholds, p_miss, p_fa))
    edges, hb, hs = score_histogram(records)
    with open(paths["histogram.csv"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "bonafide", "spoof"])
        w.writerows(zip(edges[:-1], edges[1:], hb, hs))
    paths["summary.txt"].write_text(report.summary(), encoding="utf-8")
    return paths
