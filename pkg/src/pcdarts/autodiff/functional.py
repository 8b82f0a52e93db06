"""Differentiable operations over :class:`Tensor`.

Only the operators needed by the cell search space and the two training
loops live here. Feature maps are laid out as (batch, channels, height, width).
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, make_result

# Multiply-accumulate counters; conv2d adds to every active counter.
_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Context manager counting convolution multiply-accumulates."""

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        _MAC_COUNTERS.append(self)
        return self

    def __exit__(self, *exc):
        _MAC_COUNTERS.remove(self)
        return False


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what}: expected a 4-d (batch, channels, height, width) input, got shape {x.shape}")


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not conform") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not conform") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return make_result(a.data * a.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the array method
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    shape = x.shape
    return make_result(total, (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    avg = np.asarray(x.data.sum(dtype=np.float64) / n, dtype=x.dtype)
    shape = x.shape
    return make_result(avg, (x,), lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    shape, dtype = x.shape, x.dtype
    advanced = isinstance(index, (np.ndarray, list)) or (
        isinstance(index, tuple) and any(isinstance(i, (np.ndarray, list)) for i in index)
    )

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(out, (x,), backward, "getitem")


def take_channels(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather channels ``idx`` (unique indices) along axis 1."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ValueError(f"take_channels: index out of range for {x.shape[1]} channels")
    if idx.size == x.shape[1] and np.array_equal(idx, np.arange(x.shape[1])):
        return x
    out = x.data[:, idx]
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, idx] = g
        return (full,)

    return make_result(out, (x,), backward, "take_channels")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} does not conform with {ref}")
    if len(xs) == 1:
        return xs[0]
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(out, tuple(xs), backward, "concat")


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    """Interleave ``groups`` contiguous channel blocks."""
    if groups == 1:
        return x
    b, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    out = x.data.reshape(b, groups, c // groups, h, w).transpose(0, 2, 1, 3, 4).reshape(b, c, h, w)

    def backward(g):
        return (g.reshape(b, c // groups, groups, h, w).transpose(0, 2, 1, 3, 4).reshape(b, c, h, w),)

    return make_result(out, (x,), backward, "channel_shuffle")


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    _check_4d(x, "pad2d")
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    h, w = x.shape[2], x.shape[3]
    return make_result(out, (x,), lambda g: (g[:, :, top : top + h, left : left + w],), "pad2d")


def weighted_sum(xs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k weights[k] * xs[k]`` for a 1-d weight tensor, fused into one tape entry."""
    if weights.ndim != 1 or weights.shape[0] != len(xs):
        raise ValueError(f"weighted_sum: {len(xs)} inputs but weight shape {weights.shape}")
    ref = xs[0].shape
    for t in xs:
        if t.shape != ref:
            raise ValueError(f"weighted_sum: shape {t.shape} does not match {ref}")
    wd = weights.data
    out = xs[0].data * wd[0]
    for k in range(1, len(xs)):
        out = out + xs[k].data * wd[k]

    def backward(g):
        grads: list[Optional[np.ndarray]] = [g * wd[k] if t.requires_grad else None for k, t in enumerate(xs)]
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, t.data) for t in xs], dtype=np.float64).astype(wd.dtype)
        return (*grads, gw)

    return make_result(out, (*xs, weights), backward, "weighted_sum")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_result(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0, dtype=np.float64).astype(g.dtype)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    z = v.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=axis, keepdims=True)
    p = p64.astype(v.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((p64 * (g64 - (g64 * p64).sum(axis=axis, keepdims=True))).astype(v.dtype),)

    return make_result(p, (v,), backward, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    z = v.data.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out64 = z - lse
    p64 = np.exp(out64)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((g64 - p64 * g64.sum(axis=axis, keepdims=True)).astype(v.dtype),)

    return make_result(out64.astype(v.dtype), (v,), backward, "log_softmax")


def weighted_cross_entropy(logits: Tensor, labels, class_weights: Sequence[float]) -> Tensor:
    """Mean over the batch of ``-w[label] * log_softmax(logits)[label]``.

    ``class_weights`` is indexed by class id: (spoof, bona fide) for the
    two-class detection task.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"weighted_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"weighted_cross_entropy: labels must lie in [0, {n_classes})")
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (n_classes,) or np.any(w <= 0):
        raise ValueError(f"weighted_cross_entropy: need {n_classes} positive class weights, got {class_weights}")
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("weighted_cross_entropy: non-finite logits")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    sample_w = w[labels]
    n = labels.size
    loss = -(sample_w * logp[rows, labels]).sum() / n

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        grad *= (sample_w / n)[:, None] * float(g)
        return (grad.astype(logits.dtype),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "weighted_cross_entropy")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _window(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    r, c = i * dilation, j * dilation
    return xp[:, :, r : r + stride * (ho - 1) + 1 : stride, c : c + stride * (wo - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation with zero padding, dilation and channel groups (no bias)."""
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: kernel must be 4-d, got shape {weight.shape}")
    if stride < 1 or dilation < 1 or padding < 0 or groups < 1:
        raise ValueError(f"conv2d: invalid stride={stride}, padding={padding}, dilation={dilation}, groups={groups}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ValueError(f"conv2d: kernel input-channel dimension {cg} != channels per group {cin // groups}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: spatial size {h}x{w} too small for kernel {kh}x{kw} (height/width)")
    og = cout // groups
    for counter in _MAC_COUNTERS:
        counter.macs += b * cout * ho * wo * cg * kh * kw

    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    depthwise = cg == 1 and og == 1

    if depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, dilation, stride, ho, wo) * wd[:, 0, i, j][None, :, None, None]
        cols = None
    elif kh == 1 and kw == 1:
        xs = _window(xp, 0, 0, dilation, stride, ho, wo)
        cols = np.ascontiguousarray(xs).reshape(b, groups, cg, ho * wo)
        out = np.matmul(wd.reshape(groups, og, cg), cols).reshape(b, cout, ho, wo)
    else:
        k = cg * kh * kw
        patches = [_window(xp, i, j, dilation, stride, ho, wo) for i in range(kh) for j in range(kw)]
        cols = np.stack(patches, axis=2).reshape(b, groups, cg, kh * kw, ho * wo).reshape(b, groups, k, ho * wo)
        out = np.matmul(wd.reshape(groups, og, k), cols).reshape(b, cout, ho, wo)

    def backward(g):
        gx = gw = None
        if depthwise:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            if weight.requires_grad:
                gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    win = _window(xp, i, j, dilation, stride, ho, wo)
                    if gw is not None:
                        gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, win)
                    if gxp is not None:
                        _window(gxp, i, j, dilation, stride, ho, wo)[...] += g * wd[:, 0, i, j][None, :, None, None]
        else:
            k = cg * kh * kw
            g3 = g.reshape(b, groups, og, ho * wo)
            if weight.requires_grad:
                lhs = g3.transpose(1, 2, 0, 3).reshape(groups, og, b * ho * wo)
                rhs = cols.transpose(1, 0, 3, 2).reshape(groups, b * ho * wo, k)
                gw = np.matmul(lhs, rhs).reshape(cout, cg, kh, kw)
            gxp = None
            if x.requires_grad:
                gcols = np.matmul(wd.reshape(groups, og, k).transpose(0, 2, 1), g3)
                gxp = np.zeros_like(xp)
                if kh == 1 and kw == 1:
                    _window(gxp, 0, 0, dilation, stride, ho, wo)[...] += gcols.reshape(b, cin, ho, wo)
                else:
                    gcols = gcols.reshape(b, groups, cg, kh * kw, ho, wo)
                    for n, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                        _window(gxp, i, j, dilation, stride, ho, wo)[...] += gcols[:, :, :, n].reshape(b, cin, ho, wo)
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return make_result(out, (x, weight), backward, "conv2d")


_COUNT_CACHE: dict[tuple, np.ndarray] = {}


def _pool_counts(h, w, window, stride, padding, extra_h, extra_w, ho, wo) -> np.ndarray:
    key = (h, w, window, stride, padding, extra_h, extra_w)
    counts = _COUNT_CACHE.get(key)
    if counts is None:
        ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), (padding, padding + extra_h), (padding, padding + extra_w)))
        counts = np.zeros((1, 1, ho, wo))
        for i in range(window):
            for j in range(window):
                counts += _window(ones, i, j, 1, stride, ho, wo)
        _COUNT_CACHE[key] = counts
    return counts


def pool2d(
    x: Tensor,
    kind: str,
    window: int = 3,
    stride: int = 1,
    padding: int = 1,
    ceil_mode: bool = False,
) -> Tensor:
    """Max or average pooling; the average ignores padded positions in its divisor."""
    _check_4d(x, "pool2d")
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    if stride < 1:
        raise ValueError(f"pool2d: stride must be >= 1, got {stride}")
    if window < 1 or padding < 0 or padding > window // 2:
        raise ValueError(f"pool2d: invalid window={window} / padding={padding}")
    b, c, h, w = x.shape
    if ceil_mode:
        ho = -(-(h + 2 * padding - window) // stride) + 1
        wo = -(-(w + 2 * padding - window) // stride) + 1
    else:
        ho = conv_output_size(h, window, stride, padding)
        wo = conv_output_size(w, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"pool2d: spatial size {h}x{w} too small for window {window}")
    extra_h = max(0, (ho - 1) * stride + window - (h + 2 * padding))
    extra_w = max(0, (wo - 1) * stride + window - (w + 2 * padding))
    xd = x.data
    fill = -np.inf if kind == "max" else 0.0
    pads = ((0, 0), (0, 0), (padding, padding + extra_h), (padding, padding + extra_w))
    xp = np.pad(xd, pads, constant_values=fill) if (padding or extra_h or extra_w) else xd
    offsets = [(i, j) for i in range(window) for j in range(window)]

    if kind == "avg":
        counts = _pool_counts(h, w, window, stride, padding, extra_h, extra_w, ho, wo).astype(xd.dtype)
        acc = np.zeros((b, c, ho, wo), dtype=np.float64 if xd.dtype == np.float64 else xd.dtype)
        for i, j in offsets:
            acc += _window(xp, i, j, 1, stride, ho, wo)
        out = (acc / counts).astype(xd.dtype)

        def backward(g):
            gs = g / counts
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            for i, j in offsets:
                _window(gxp, i, j, 1, stride, ho, wo)[...] += gs
            return (gxp[:, :, padding : padding + h, padding : padding + w],)

        return make_result(out, (x,), backward, "avg_pool2d")

    out = np.full((b, c, ho, wo), -np.inf, dtype=xd.dtype)
    arg = np.zeros((b, c, ho, wo), dtype=np.int16)
    for n, (i, j) in enumerate(offsets):
        win = _window(xp, i, j, 1, stride, ho, wo)
        better = win > out
        out = np.where(better, win, out)
        arg[better] = n

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for n, (i, j) in enumerate(offsets):
            _window(gxp, i, j, 1, stride, ho, wo)[...] += np.where(arg == n, g, 0)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_result(out, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalisation with optional affine transform.

    In training mode the batch statistics are used and the running buffers
    (if given) are updated in place; otherwise the running buffers are used.
    """
    _check_4d(x, "batch_norm")
    b, c, h, w = x.shape
    if b == 0:
        raise ValueError("batch_norm: empty batch")
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (c,):
            raise ValueError(f"batch_norm: {name} shape {p.shape} does not match {c} channels")
    xd = x.data
    if training:
        m = b * h * w
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = xd - mu.astype(xd.dtype)[None, :, None, None]
        var = np.einsum("bchw,bchw->c", centered, centered, dtype=np.float64) / m
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            unbiased = var * m / max(m - 1, 1)
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None:
            raise ValueError("batch_norm: evaluation mode needs running statistics")
        mu = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
        centered = xd - mu.astype(xd.dtype)[None, :, None, None]
    invstd = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = centered * invstd[None, :, None, None]
    out = xhat
    if gamma is not None:
        out = out * gamma.data[None, :, None, None]
    if beta is not None:
        out = out + beta.data[None, :, None, None]

    def backward(g):
        gg = gb = None
        if gamma is not None and gamma.requires_grad:
            gg = np.einsum("bchw,bchw->c", g, xhat, dtype=np.float64).astype(xd.dtype)
        if beta is not None and beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(xd.dtype)
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None] if gamma is not None else g
            if training:
                m = b * h * w
                s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)
                s2 = np.einsum("bchw,bchw->c", dxhat, xhat, dtype=np.float64)
                gx = (
                    dxhat - (s1 / m).astype(xd.dtype)[None, :, None, None] - xhat * (s2 / m).astype(xd.dtype)[None, :, None, None]
                ) * invstd[None, :, None, None]
            else:
                gx = dxhat * invstd[None, :, None, None]
        result = [gx]
        if gamma is not None:
            result.append(gg)
        if beta is not None:
            result.append(gb)
        return tuple(result)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)
    return make_result(out, tuple(parents), backward, "batch_norm")


def drop_path(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Zero whole samples with probability ``p``; survivors are rescaled by 1/(1-p)."""
    if p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop_path: probability must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape[0]) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, Tensor(keep.reshape((-1,) + (1,) * (x.ndim - 1))))


def zeros_like_strided(x: Tensor, stride: int) -> Tensor:
    b, c, h, w = x.shape
    return Tensor(np.zeros((b, c, math.ceil(h / stride), math.ceil(w / stride)), dtype=x.dtype))
