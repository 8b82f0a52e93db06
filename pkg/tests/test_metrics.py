import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdarts.metrics import (
    CostModel,
    ScoreRecord,
    build_report,
    compute_eer,
    compute_min_tdcf,
    join_scores,
    load_cost_model,
    read_scores,
    write_report,
    write_scores,
)

COST = load_cost_model()


def records_from(bona, spoof, systems=None):
    recs = [ScoreRecord(f"b{i}", float(s), "bonafide") for i, s in enumerate(bona)]
    for i, s in enumerate(spoof):
        recs.append(ScoreRecord(f"s{i}", float(s), "spoof", systems[i] if systems else "-"))
    return recs


def oracle_sweep(bona, spoof):
    """Direct per-threshold counting over every midpoint of the sorted unique scores."""
    u = sorted(set(list(bona) + list(spoof)))
    thresholds = [-math.inf] + [0.5 * a + 0.5 * b for a, b in zip(u, u[1:])] + [math.inf]
    miss = [sum(1 for s in bona if s < t) / len(bona) for t in thresholds]
    fa = [sum(1 for s in spoof if s >= t) / len(spoof) for t in thresholds]
    return thresholds, miss, fa


def oracle_eer(bona, spoof):
    _, miss, fa = oracle_sweep(bona, spoof)
    for i, (m, f) in enumerate(zip(miss, fa)):
        if m >= f:
            if m == f or i == 0:
                return m
            d0, d1 = miss[i - 1] - fa[i - 1], m - f
            lam = -d0 / (d1 - d0)
            return miss[i - 1] + lam * (m - miss[i - 1])
    raise AssertionError("miss and false-alarm curves never cross")


def oracle_min_tdcf(bona, spoof, cost):
    _, miss, fa = oracle_sweep(bona, spoof)
    c1, c2 = cost.c1, cost.c2
    return min((c1 * m + c2 * f) / min(c1, c2) for m, f in zip(miss, fa))


def random_sets(n_sets, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        nb, ns = rng.integers(1, 50, size=2)
        shift = rng.uniform(-1, 3)
        decimals = int(rng.integers(0, 3))  # coarse rounding produces ties
        bona = np.round(rng.standard_normal(nb) + shift, decimals)
        spoof = np.round(rng.standard_normal(ns), decimals)
        yield bona, spoof


def test_eer_and_min_tdcf_match_brute_force_sweep():
    for bona, spoof in random_sets(500):
        recs = records_from(bona, spoof)
        assert compute_eer(recs)[0] == oracle_eer(bona, spoof)
        assert compute_min_tdcf(recs, COST)[0] == oracle_min_tdcf(bona, spoof, COST)


def test_twenty_listed_scores():
    bona = [2.1, 1.7, 0.4, 3.3, 0.9, 1.2, -0.2, 2.8, 1.1, 0.05]
    spoof = [-1.5, 0.3, -0.7, 1.0, -2.2, 0.6, -0.1, -1.0, 0.95, -3.0]
    recs = records_from(bona, spoof)
    eer, thr = compute_eer(recs)
    assert eer == oracle_eer(bona, spoof) == pytest.approx(0.3)
    assert thr == pytest.approx(0.5)


def test_monotone_invariance():
    transforms = [lambda x: 3 * x + 1, lambda x: x**3 + 2 * x, lambda x: np.exp(x / 4), lambda x: np.tanh(x / 10)]
    for bona, spoof in random_sets(100, seed=1):
        e, c = compute_eer(records_from(bona, spoof))[0], compute_min_tdcf(records_from(bona, spoof), COST)[0]
        for f in transforms:
            recs = records_from(f(bona), f(spoof))
            assert abs(compute_eer(recs)[0] - e) <= 1e-12
            assert abs(compute_min_tdcf(recs, COST)[0] - c) <= 1e-12


def test_duplication_invariance():
    for bona, spoof in random_sets(50, seed=2):
        once = records_from(bona, spoof)
        twice = records_from(np.tile(bona, 2), np.tile(spoof, 2))
        assert compute_eer(twice)[0] == pytest.approx(compute_eer(once)[0], abs=1e-12)
        assert compute_min_tdcf(twice, COST)[0] == pytest.approx(compute_min_tdcf(once, COST)[0], abs=1e-12)


def test_trivial_cases():
    sep = records_from([10.0] * 5, [-10.0] * 7)
    assert compute_eer(sep)[0] == 0.0
    assert compute_min_tdcf(sep, COST)[0] == 0.0
    const = records_from([0.3] * 4, [0.3] * 6)
    assert compute_min_tdcf(const, COST)[0] == 1.0
    assert compute_eer(const)[0] == pytest.approx(0.5)
    rng = np.random.default_rng(3)
    same = records_from(rng.standard_normal(20000), rng.standard_normal(20000))
    assert abs(compute_eer(same)[0] - 0.5) < 0.01
    rep = build_report(sep, COST)
    assert (rep.eer, rep.min_tdcf, rep.accuracy) == (0.0, 0.0, 1.0)


def test_inverted_scores_exceed_one_half():
    # polarity is fixed (higher = bona fide), so a reversed detector reports EER 1
    assert compute_eer(records_from([-10.0], [10.0]))[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40),
)
def test_ranges(bona, spoof):
    recs = records_from(bona, spoof)
    assert 0.0 <= compute_eer(recs)[0] <= 1.0
    assert 0.0 <= compute_min_tdcf(recs, COST)[0] <= 1.0


def test_validation():
    with pytest.raises(ValueError):
        compute_eer(records_from([1.0], []))
    with pytest.raises(ValueError):
        ScoreRecord("x", float("nan"), "spoof")
    with pytest.raises(ValueError):
        ScoreRecord("x", 0.0, "genuine")
    fields = {k: getattr(COST, k) for k in CostModel.__dataclass_fields__}
    with pytest.raises(ValueError, match="sum to 1"):
        CostModel(**{**fields, "p_tar": 0.5})
    degenerate = CostModel(**{**fields, "p_miss_spoof_asv": 1.0})
    assert degenerate.c2 == 0.0
    with pytest.raises(ValueError, match="C2"):
        compute_min_tdcf(records_from([1.0], [0.0]), degenerate)
    with pytest.raises(ValueError):
        load_cost_model("no-such-model")


def test_default_cost_model_coefficients():
    assert COST.name == "asvspoof2019-la" and COST.variant == "2019"
    assert math.isclose(COST.c1, 0.9405 * (1 - 0.024) - 0.0095 * 10 * 0.024)
    assert math.isclose(COST.c2, 10 * 0.05 * 0.5)


def test_2018_variant_normaliser():
    fields = {k: getattr(COST, k) for k in CostModel.__dataclass_fields__}
    old = CostModel(**{**fields, "variant": "2018"})
    bona, spoof = [2.0, 1.0, 0.5, -0.4], [0.0, 0.7, -1.0]
    _, miss, fa = oracle_sweep(bona, spoof)
    want = min((old.c0 + old.c1 * m + old.c2 * f) / (old.c0 + min(old.c1, old.c2)) for m, f in zip(miss, fa))
    assert compute_min_tdcf(records_from(bona, spoof), old)[0] == pytest.approx(want, abs=1e-15)
    assert compute_min_tdcf(records_from([0.0], [0.0]), old)[0] == pytest.approx(1.0)


def test_cost_model_from_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"p_tar": 0.9, "p_non": 0.05, "p_spoof": 0.05, "c_miss_asv": 1, "c_fa_asv": 10, '
                 '"c_miss_cm": 1, "c_fa_cm": 10, "p_miss_asv": 0.01, "p_fa_asv": 0.01, "p_miss_spoof_asv": 0.3}')
    assert load_cost_model(str(p)).p_miss_spoof_asv == 0.3
    p.write_text('{"p_tar": 1.0, "bogus": 1}')
    with pytest.raises(ValueError, match="bogus"):
        load_cost_model(str(p))


def test_report_files(tmp_path):
    rng = np.random.default_rng(4)
    systems = [f"A0{1 + i % 3}" for i in range(30)]
    recs = records_from(rng.standard_normal(20) + 2, rng.standard_normal(30), systems)
    rep = build_report(recs, COST)
    assert set(rep.per_attack_eer) == {"A01", "A02", "A03"}
    bona = np.array([r.score for r in recs if r.key == "bonafide"])
    a02 = np.array([r.score for r in recs if r.system_id == "A02"])
    assert rep.per_attack_eer["A02"] == oracle_eer(bona, a02)
    paths = write_report(rep, recs, tmp_path)
    with open(paths["scores.csv"]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(recs)
    with open(paths["metrics.csv"]) as fh:
        m = next(csv.DictReader(fh))
    assert float(m["eer"]) == rep.eer and m["cost_model"] == "asvspoof2019-la"
    assert "min t-DCF" in paths["summary.txt"].read_text()
    # pooled EER from the written score file equals the oracle on the concatenated scores
    bona_f = [float(r["score"]) for r in rows if r["key"] == "bonafide"]
    spoof_f = [float(r["score"]) for r in rows if r["key"] == "spoof"]
    assert rep.eer == oracle_eer(bona_f, spoof_f)


def test_report_without_cost_model():
    rep = build_report(records_from([1.0, 2.0], [0.0]))
    assert rep.min_tdcf is None
    assert "unavailable" in rep.summary()


def test_score_file_round_trip(tmp_path):
    recs = records_from([0.1 + 1e-13, -5.5], [3.25])
    write_scores(tmp_path / "s.txt", recs)
    lines = (tmp_path / "s.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].split()[0] == "b0"
    back = read_scores(tmp_path / "s.txt")
    assert [s for _, s in back] == [r.score for r in recs]
    joined = join_scores(back, {r.utterance_id: r.key for r in recs})
    assert compute_eer(joined) == compute_eer(recs)
    with pytest.raises(ValueError):
        join_scores(back, {})
    (tmp_path / "bad.txt").write_text("u1 0.5 extra\n")
    with pytest.raises(ValueError, match="line 1"):
        read_scores(tmp_path / "bad.txt")
