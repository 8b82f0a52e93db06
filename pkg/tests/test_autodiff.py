import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcdarts.autodiff import Adam, BatchNorm2d, Conv2d, Linear, MacCounter, Tape, Tensor, backward, clip_grad_norm, cosine_lr
from pcdarts.autodiff import functional as F
from pcdarts.autodiff import count_parameters, default_dtype, no_grad

from gradcheck import CASES, run_case


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_differences(name):
    assert run_case(name, draws=20) < 1e-4


def test_conv_identity_kernel():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_overlap_counts():
    out = F.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
    assert out[1, 1] == out[2, 2] == 9
    assert out[0, 1] == out[1, 0] == 6
    assert out[0, 0] == out[3, 3] == 4


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(5, 12),
    w=st.integers(5, 12),
    k=st.sampled_from([1, 3, 5]),
    stride=st.integers(1, 3),
    padding=st.integers(0, 3),
    dilation=st.integers(1, 2),
)
def test_conv_shape_formula(h, w, k, stride, padding, dilation):
    if dilation * (k - 1) + 1 > h + 2 * padding or dilation * (k - 1) + 1 > w + 2 * padding:
        return
    out = F.conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, k, k))), stride, padding, dilation)
    expect = lambda n: (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1  # noqa: E731
    assert out.shape == (1, 3, expect(h), expect(w))


def test_conv_errors_name_dimension():
    with pytest.raises(ValueError, match="channel"):
        F.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ValueError, match="groups"):
        F.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)


def test_pool_constant_and_one_hot():
    c = F.pool2d(Tensor(np.full((1, 1, 6, 6), 2.5)), "avg", 3, 1, 1).data
    np.testing.assert_allclose(c, 2.5)  # padding excluded, so the border stays constant too
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    m = F.pool2d(Tensor(x), "max", 3, 1, 1).data[0, 0]
    np.testing.assert_array_equal(m[1:4, 1:4], 1.0)
    assert m.sum() == 9
    with pytest.raises(ValueError):
        F.pool2d(Tensor(x), "max", 3, 0, 1)


def test_batch_norm_normalises_and_handles_constant_input():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((8, 3, 4, 4)) * 3 + 1, dtype=np.float64)
    y = F.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), None, None, True).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-6
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() < 1e-5
    z = F.batch_norm(Tensor(np.full((4, 2, 3, 3), 7.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, None, True).data
    np.testing.assert_array_equal(z, 0.0)
    with pytest.raises(ValueError):
        F.batch_norm(Tensor(np.zeros((0, 2, 3, 3))), None, None, None, None, True)


def test_batch_norm_eval_uses_running_stats():
    bn = BatchNorm2d(2)
    rng = np.random.default_rng(1)
    for _ in range(50):
        bn(Tensor(rng.standard_normal((16, 2, 3, 3)) * 2 + 5))
    bn.eval()
    x = Tensor(np.full((1, 2, 1, 1), 5.0))
    assert np.abs(bn(x).data).max() < 0.2


def test_softmax_uniform_and_concat_channels():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros(8))).data, 1 / 8)
    xs = [Tensor(np.zeros((1, 16, 2, 2))) for _ in range(4)]
    assert F.concat_channels(xs).shape == (1, 64, 2, 2)


def test_weighted_ce_closed_form_and_scalar_oracle():
    loss = F.weighted_cross_entropy(Tensor(np.zeros((1, 2))), [1], (1.0, 9.0))
    assert math.isclose(float(loss.data), 9 * math.log(2), rel_tol=1e-12)
    big = F.weighted_cross_entropy(Tensor(np.array([[0.0, 60.0]])), [1], (1.0, 1.0))
    assert float(big.data) < 1e-20
    rng = np.random.default_rng(2)
    z = rng.standard_normal((7, 2))
    y = rng.integers(0, 2, 7)
    w = (1.0, 9.0)
    oracle = 0.0
    for row, label in zip(z, y):
        lse = math.log(math.exp(row[0]) + math.exp(row[1]))
        oracle += -w[label] * (row[label] - lse)
    oracle /= len(y)
    assert abs(float(F.weighted_cross_entropy(Tensor(z, dtype=np.float64), y, w).data) - oracle) < 1e-10
    with pytest.raises(FloatingPointError):
        F.weighted_cross_entropy(Tensor(np.array([[np.nan, 0.0]])), [0], w)


def test_backward_examples_and_accumulation():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, 1.0)
    backward(F.sum(x))
    np.testing.assert_array_equal(x.grad, 2.0)
    x.zero_grad()
    backward(F.sum(F.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data)
    with pytest.raises(ValueError):
        backward(F.mul(x, x))


def test_every_reachable_leaf_gets_a_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    loss = F.sum(F.add(F.relu(F.scale(a, -1.0)), b))
    backward(loss)
    assert a.grad is not None and b.grad is not None and unused.grad is None


def test_tape_is_topological():
    a = Tensor(np.ones(2), requires_grad=True)
    b = F.relu(a)
    c = F.add(b, a)
    d = F.sum(F.mul(c, b))
    order = Tape.from_output(d).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for n in order:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = F.mul(a, a)
    assert b.is_leaf and not b.requires_grad


def test_determinism_of_forward_and_backward():
    def run():
        rng = np.random.default_rng(5)
        conv = Conv2d(2, 3, 3, 1, 1, rng=rng)
        x = Tensor(rng.standard_normal((2, 2, 5, 5)))
        backward(F.sum(F.relu(conv(x))))
        return conv.weight.grad.copy()

    np.testing.assert_array_equal(run(), run())


def test_mac_counter_counts_convolutions():
    with MacCounter() as c:
        F.conv2d(Tensor(np.zeros((2, 4, 6, 6))), Tensor(np.zeros((8, 4, 3, 3))), padding=1)
    assert c.macs == 2 * 8 * 6 * 6 * 4 * 9


def test_adam_zero_gradient_only_decays():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.1, weight_decay=0.01)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 * (1 - 0.001), -2.0 * (1 - 0.001)])
    q = Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    opt2 = Adam([q], lr=0.1)
    q.grad = np.zeros(1)
    opt2.step()
    assert q.data[0] == 3.0


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)


def test_adam_state_round_trip():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
    opt = Adam([p], lr=0.01)
    for _ in range(3):
        p.grad = rng.standard_normal(4)
        opt.step()
    q = Tensor(p.data.copy(), requires_grad=True, dtype=np.float64)
    opt2 = Adam([q], lr=0.01)
    opt2.load_state_dict(opt.state_dict())
    g = rng.standard_normal(4)
    p.grad, q.grad = g, g.copy()
    opt.step()
    opt2.step()
    np.testing.assert_array_equal(p.data, q.data)


def test_cosine_schedule_and_clipping():
    assert cosine_lr(0, 10, 0.01, 0.001) == 0.01
    assert math.isclose(cosine_lr(10, 10, 0.01, 0.001), 0.001, abs_tol=1e-15)
    assert abs(cosine_lr(5, 10, 0.01, 0.001) - 0.0055) < 1e-12
    vals = [cosine_lr(t, 49, 0.01, 0.001) for t in range(50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([30.0, 40.0])
    norm = clip_grad_norm([a], 5.0)
    assert norm == 50.0
    assert abs(np.linalg.norm(a.grad) - 5.0) < 1e-5


def test_module_state_dict_and_census():
    rng = np.random.default_rng(0)
    lin = Linear(5, 2, rng)
    assert count_parameters(lin) == 12
    other = Linear(5, 2, np.random.default_rng(1))
    other.load_state_dict(lin.state_dict())
    np.testing.assert_array_equal(other.weight.data, lin.weight.data)
    with pytest.raises(KeyError):
        other.load_state_dict({})


def test_default_dtype_context():
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32
