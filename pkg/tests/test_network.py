import math

import numpy as np
import pytest

from pcdarts.autodiff import Tensor, backward, default_dtype
from pcdarts.autodiff import functional as F
from pcdarts.cells import DiscreteCell, SearchCell, cell_forward
from pcdarts.genotype import ArchParams, CellSpec, Genotype, derive_genotype, genotype_parse
from pcdarts.network import (
    NetworkConfig,
    ScratchNetwork,
    SearchNetwork,
    Stem,
    build_network,
    count_params,
    forward_score,
    logits_to_scores,
)
from pcdarts.ops import OpKind

from gradcheck import rel_error

FIXTURE = genotype_parse(
    """normal:
node 3: sep_conv_3x3(1), skip_connect(2)
node 4: dil_conv_5x5(1), max_pool_3x3(3)
node 5: sep_conv_5x5(2), avg_pool_3x3(4)
node 6: skip_connect(3), dil_conv_3x3(5)
reduce:
node 3: max_pool_3x3(1), sep_conv_3x3(2)
node 4: skip_connect(2), avg_pool_3x3(3)
node 5: dil_conv_3x3(1), skip_connect(4)
node 6: sep_conv_5x5(3), dil_conv_5x5(2)
"""
)


def hand_count(genotype: Genotype, layers: int, c: int) -> int:
    """Independent analytic census: conv weights, BN affine pairs, classifier."""
    total = 9 * (c // 2) + 2 * (c // 2) + 9 * (c // 2) * c + 2 * c + 9 * c * c + 2 * c
    c_pp = c_p = c
    cur = c
    reductions = {layers // 3, 2 * layers // 3}
    for i in range(layers):
        red = i in reductions
        if red:
            cur *= 2
        total += c_pp * cur + 2 * cur  # preprocessing of s0 (either variant has the same census)
        total += c_p * cur + 2 * cur
        nodes = genotype.reduce if red else genotype.normal
        for pairs in nodes:
            for op, src in pairs:
                stride = 2 if red and src <= 2 else 1
                if op in (OpKind.SEP_CONV_3X3, OpKind.SEP_CONV_5X5):
                    k = 3 if op is OpKind.SEP_CONV_3X3 else 5
                    total += 2 * (cur * k * k + cur * cur + 2 * cur)
                elif op in (OpKind.DIL_CONV_3X3, OpKind.DIL_CONV_5X5):
                    k = 3 if op is OpKind.DIL_CONV_3X3 else 5
                    total += cur * k * k + cur * cur + 2 * cur
                elif op is OpKind.SKIP_CONNECT:
                    total += 0 if stride == 1 else cur * cur + 2 * cur
                else:
                    total += 2 * cur
        c_pp, c_p = c_p, len(nodes) * cur
    return total + c_p * 2 + 2


ONE_OP = Genotype(
    normal=(((OpKind.SEP_CONV_3X3, 1),),),
    reduce=(((OpKind.SEP_CONV_3X3, 2),),),
)


@pytest.mark.parametrize("genotype,layers,c", [(ONE_OP, 3, 4), (FIXTURE, 4, 8), (FIXTURE, 8, 6)])
def test_census_matches_hand_count(genotype, layers, c):
    model = ScratchNetwork(NetworkConfig(layers, c, "scratch", nodes=3 + len(genotype.normal) + 1), genotype)
    assert count_params(model) == hand_count(genotype, layers, c)


def test_census_monotone_over_table_sizes():
    counts = [count_params(ScratchNetwork(NetworkConfig(l, c, "scratch"), FIXTURE)) for l, c in [(2, 4), (4, 16), (8, 32), (16, 64)]]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_classifier_only_census_and_invariance():
    model = ScratchNetwork(NetworkConfig(4, 8, "scratch"), FIXTURE)
    assert count_params(model.classifier) == model.classifier.weight.shape[1] * 2 + 2
    before = count_params(model)
    model(Tensor(np.random.default_rng(0).standard_normal((2, 1, 60, 64))))
    assert count_params(model) == before


def test_arch_params_are_not_network_weights():
    arch = ArchParams()
    model = SearchNetwork(NetworkConfig(4, 4, "search"), arch)
    ids = {id(p) for p in model.parameters()}
    assert not any(id(t) in ids for t in arch.tensors())


@pytest.mark.parametrize("layers", [4, 8, 16])
def test_reduction_positions_and_shapes(layers):
    cfg = NetworkConfig(layers, 4, "scratch")
    assert cfg.reduction_positions == (layers // 3, 2 * layers // 3)
    model = ScratchNetwork(cfg, FIXTURE)
    assert [i for i, t in enumerate(model.cell_types) if t == "reduce"] == list(cfg.reduction_positions)
    feats = model.features(Tensor(np.random.default_rng(0).standard_normal((2, 1, 60, 64))))
    for i, (prev, cur) in enumerate(zip(feats[:-1], feats[1:])):
        if i in cfg.reduction_positions:
            assert cur.shape[2:] == tuple(-(-s // 2) for s in prev.shape[2:])
        else:
            assert cur.shape[2:] == prev.shape[2:]
    widths = [f.shape[1] // 4 for f in feats[1:]]
    assert widths[-1] == 4 * 4
    if layers == 4:
        assert model.cell_types == ["normal", "reduce", "reduce", "normal"]
        assert model.cell_types.count("normal") == 2 and model.cell_types.count("reduce") == 2


def test_l16_positions():
    assert NetworkConfig(16, 64, "scratch").reduction_positions == (5, 10)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(1, 16)
    with pytest.raises(ValueError):
        NetworkConfig(4, 15)
    with pytest.raises(ValueError):
        NetworkConfig(4, 16, stage="other")
    with pytest.raises(ValueError):
        build_network(NetworkConfig(4, 4, "scratch"), ArchParams())
    with pytest.raises(ValueError):
        build_network(NetworkConfig(4, 4, "search"), FIXTURE)


def test_stem_shapes():
    stem = Stem(16)
    out = stem(Tensor(np.zeros((1, 1, 60, 400))))
    assert out.shape == (1, 16, 8, 50)
    assert stem(Tensor(np.zeros((1, 1, 60, 800)))).shape[3] == 100
    with pytest.raises(ValueError):
        stem(Tensor(np.zeros((1, 1, 60, 31))))


def test_scores():
    assert math.isclose(logits_to_scores(np.array([[0.0, 0.0]]))[0], -math.log(2))
    s = logits_to_scores(np.array([[0.0, z] for z in np.linspace(-5, 5, 11)]))
    assert np.all(np.diff(s) > 0)
    np.testing.assert_array_equal(logits_to_scores(np.array([[1.0, 3.0]]), "logit"), [3.0])


def test_batch_scoring_equals_single_scoring_and_eval_is_deterministic():
    rng = np.random.default_rng(0)
    model = ScratchNetwork(NetworkConfig(4, 4, "scratch", drop_path_p=0.5), FIXTURE, rng)
    model.train()
    model(Tensor(rng.standard_normal((4, 1, 60, 48))))  # populate running statistics
    x = rng.standard_normal((5, 1, 60, 48)).astype(np.float32)
    batch = forward_score(model, x)
    single = np.array([forward_score(model, x[i : i + 1])[0] for i in range(5)])
    assert np.abs(batch - single).max() < 1e-6
    np.testing.assert_array_equal(batch, forward_score(model, x))
    assert model.training  # scoring restores the previous mode


def test_output_shape_for_random_genotypes():
    rng = np.random.default_rng(1)
    for _ in range(4):
        g = derive_genotype(ArchParams(rng=rng, init_scale=1.0), 2)
        model = ScratchNetwork(NetworkConfig(4, 4, "scratch", drop_path_p=0.2), g, rng)
        assert model(Tensor(rng.standard_normal((3, 1, 60, 40)))).shape == (3, 2)


def test_cell_forward_dispatch_and_mask_requirement():
    rng = np.random.default_rng(0)
    arch = ArchParams(CellSpec(4))
    cell = SearchCell(CellSpec(4), 4, 4, 4, False, False, 2, rng=rng)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)))
    assert cell_forward(cell, x, x, arch, rng=rng).shape == (2, 4, 6, 6)
    with pytest.raises(ValueError):
        cell(x, x, arch, None)
    dcell = DiscreteCell(ONE_OP, 4, 4, 4, True, False)
    assert cell_forward(dcell, x, x).shape == (2, 4, 3, 3)
    with pytest.raises(TypeError):
        cell_forward(object(), x, x)


def test_supernet_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    with default_dtype(np.float64):
        arch = ArchParams(CellSpec(4), rng=rng, init_scale=0.5, dtype=np.float64)
        model = SearchNetwork(NetworkConfig(2, 4, "search", nodes=4), arch, rng)
        x = Tensor(rng.standard_normal((3, 1, 16, 32)))
        y = np.array([0, 1, 1])

        def loss_value():
            model.mask_rng = np.random.default_rng(11)
            return F.weighted_cross_entropy(model(x), y, (1.0, 9.0))

        for t in arch.tensors():
            t.grad = None
        model.zero_grad()
        backward(loss_value())
        tensors = arch.tensors() + model.parameters()
        analytic, numeric = [], []
        budget = 300
        for t in tensors:
            flat = t.data.reshape(-1)
            for c in rng.choice(flat.size, size=min(flat.size, 4), replace=False):
                if budget == 0:
                    break
                budget -= 1
                old = flat[c]
                flat[c] = old + 1e-6
                plus = float(loss_value().data)
                flat[c] = old - 1e-6
                minus = float(loss_value().data)
                flat[c] = old
                numeric.append((plus - minus) / 2e-6)
                analytic.append(0.0 if t.grad is None else t.grad.reshape(-1)[c])
        assert rel_error(np.array(analytic), np.array(numeric)) < 1e-4
