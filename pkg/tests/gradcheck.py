"""Central finite-difference checks for every differentiable operation."""

from __future__ import annotations

import numpy as np

from pcdarts.autodiff import Tensor, backward, default_dtype
from pcdarts.autodiff import functional as F

EPS = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(fn, arrays, rng, max_coords: int = 40) -> float:
    """Worst relative error between analytic and numeric gradients of sum(fn(*x) * R).

    ``fn`` maps Tensors to a Tensor; R is a fixed random projection so every
    output entry contributes. At most ``max_coords`` coordinates per input
    are perturbed.
    """
    with default_dtype(np.float64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)
        backward(F.sum(F.mul(out, Tensor(proj))))
        worst = 0.0
        for k, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            n = flat.size
            coords = rng.choice(n, size=min(n, max_coords), replace=False)
            numeric = np.zeros(coords.size)
            for c_i, c in enumerate(coords):
                old = flat[c]
                flat[c] = old + EPS
                plus = float((fn(*[Tensor(x.data) for x in tensors]).data * proj).sum())
                flat[c] = old - EPS
                minus = float((fn(*[Tensor(x.data) for x in tensors]).data * proj).sum())
                flat[c] = old
                numeric[c_i] = (plus - minus) / (2 * EPS)
            analytic = np.zeros(n) if t.grad is None else t.grad.reshape(-1)
            worst = max(worst, rel_error(analytic[coords], numeric))
        return worst


def _img(rng, b=None, c=None, h=None, w=None):
    b = b or int(rng.integers(1, 3))
    c = c or int(rng.integers(1, 4))
    h = h or int(rng.integers(3, 7))
    w = w or int(rng.integers(3, 7))
    return rng.standard_normal((b, c, h, w))


def case_conv2d(rng):
    groups_mode = rng.integers(0, 3)
    cin = int(rng.integers(1, 4))
    if groups_mode == 0:
        groups, cout = 1, int(rng.integers(1, 4))
    elif groups_mode == 1:
        groups, cout = cin, cin
    else:
        groups, cout = cin, 2 * cin
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    size = dilation * (k - 1) + 1
    x = _img(rng, c=cin, h=int(rng.integers(size, size + 4)), w=int(rng.integers(size, size + 4)))
    w = rng.standard_normal((cout, cin // groups, k, k))
    return (lambda a, b: F.conv2d(a, b, stride, padding, dilation, groups)), [x, w]


def case_pool(kind):
    def make(rng):
        window = int(rng.choice([2, 3]))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, window // 2 + 1))
        ceil_mode = bool(rng.integers(0, 2)) and padding == 0
        x = _img(rng, h=int(rng.integers(window, 8)), w=int(rng.integers(window, 8)))
        return (lambda a: F.pool2d(a, kind, window, stride, padding, ceil_mode)), [x]

    return make


def case_batch_norm_train(rng):
    x = _img(rng, b=int(rng.integers(2, 4)))
    c = x.shape[1]
    return (lambda a, g, b: F.batch_norm(a, g, b, None, None, True)), [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def case_batch_norm_eval(rng):
    x = _img(rng)
    c = x.shape[1]
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    return (lambda a, g, b: F.batch_norm(a, g, b, mean.copy(), var.copy(), False)), [x, rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]


def case_relu(rng):
    x = rng.standard_normal((int(rng.integers(1, 5)), int(rng.integers(1, 6))))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return F.relu, [x]


def case_add(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=3))
    other = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    return F.add, [rng.standard_normal(shape), rng.standard_normal(other)]


def case_mul(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=3))
    other = tuple(s if rng.random() < 0.5 else 1 for s in shape)
    return F.mul, [rng.standard_normal(shape), rng.standard_normal(other)]


def case_scale(rng):
    s = float(rng.standard_normal())
    return (lambda a: F.scale(a, s)), [rng.standard_normal((2, 3))]


def case_concat(rng):
    b, h, w = 2, int(rng.integers(2, 5)), int(rng.integers(2, 5))
    xs = [rng.standard_normal((b, int(rng.integers(1, 4)), h, w)) for _ in range(int(rng.integers(1, 4)))]
    return (lambda *t: F.concat_channels(list(t))), xs


def case_take_channels(rng):
    x = _img(rng, c=int(rng.integers(2, 6)))
    idx = np.sort(rng.choice(x.shape[1], size=int(rng.integers(1, x.shape[1] + 1)), replace=False))
    return (lambda a: F.take_channels(a, idx)), [x]


def case_channel_shuffle(rng):
    g = int(rng.integers(1, 4))
    x = _img(rng, c=g * int(rng.integers(1, 4)))
    return (lambda a: F.channel_shuffle(a, g)), [x]


def case_pad2d(rng):
    p = [int(v) for v in rng.integers(0, 3, size=4)]
    return (lambda a: F.pad2d(a, *p)), [_img(rng)]


def case_getitem(rng):
    x = _img(rng, h=5, w=5)
    return (lambda a: a[:, :, 1:, 1:4]), [x]


def case_weighted_sum(rng):
    n = int(rng.integers(1, 5))
    shape = (2, 2, int(rng.integers(2, 4)), 3)
    xs = [rng.standard_normal(shape) for _ in range(n)]
    return (lambda *t: F.weighted_sum(list(t[:-1]), t[-1])), xs + [rng.standard_normal(n)]


def case_global_avg_pool(rng):
    return F.global_avg_pool, [_img(rng)]


def case_linear(rng):
    n_in, n_out = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    return F.linear, [rng.standard_normal((int(rng.integers(1, 5)), n_in)), rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out)]


def case_softmax(rng):
    return (lambda a: F.softmax(a)), [rng.standard_normal(int(rng.integers(1, 9)))]


def case_log_softmax(rng):
    return (lambda a: F.log_softmax(a, axis=1)), [rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(2, 6))))]


def case_weighted_ce(rng):
    b = int(rng.integers(1, 6))
    labels = rng.integers(0, 2, size=b)
    w = rng.uniform(0.5, 9.0, size=2)
    return (lambda z: F.weighted_cross_entropy(z, labels, w)), [rng.standard_normal((b, 2))]


def case_sum_mean(rng):
    return (lambda a: F.add(F.sum(a), F.mean(a))), [rng.standard_normal((2, 3, 2))]


def case_drop_path(rng):
    seed = int(rng.integers(0, 2**31))
    p = float(rng.uniform(0.1, 0.6))
    return (lambda a: F.drop_path(a, p, np.random.default_rng(seed))), [_img(rng, b=4)]


CASES = {
    "conv2d": case_conv2d,
    "avg_pool2d": case_pool("avg"),
    "max_pool2d": case_pool("max"),
    "batch_norm_train": case_batch_norm_train,
    "batch_norm_eval": case_batch_norm_eval,
    "relu": case_relu,
    "add": case_add,
    "mul": case_mul,
    "scale": case_scale,
    "concat_channels": case_concat,
    "take_channels": case_take_channels,
    "channel_shuffle": case_channel_shuffle,
    "pad2d": case_pad2d,
    "getitem": case_getitem,
    "weighted_sum": case_weighted_sum,
    "global_avg_pool": case_global_avg_pool,
    "linear": case_linear,
    "softmax": case_softmax,
    "log_softmax": case_log_softmax,
    "weighted_cross_entropy": case_weighted_ce,
    "sum_mean": case_sum_mean,
    "drop_path": case_drop_path,
}


def run_case(name: str, draws: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(draws):
        fn, arrays = CASES[name](rng)
        worst = max(worst, gradcheck(fn, arrays, rng))
    return worst
