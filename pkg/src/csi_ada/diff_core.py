"""A small reverse-mode differentiation engine over numpy arrays.

Only the operations the CNN, the LSTM and the adversarial inner loop need
are provided. Every op takes an optional ``graph``; when it is given and
any input requires a gradient, the op is appended to the graph's tape and
:func:`backward` later replays the tape in reverse.

Image-like ops use channels-last layout and accept an optional leading
batch axis: ``conv2d`` and ``maxpool2d`` take ``(H, W, C)`` or
``(N, H, W, C)``, ``dense`` takes ``(n,)`` or ``(N, n)``.

Values are float32 by default. Passing float64 tensors runs the same code
in double precision, which is what the finite-difference checks use.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class BadLabel(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        rg = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"


class Graph:
    """Tape of recorded operations; single-threaded while in use."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, outputs, inputs, backward_fn):
        self.nodes.append((outputs, inputs, backward_fn))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(graph, out_values, inputs, backward_fn) -> Tensor:
    out = Tensor(out_values)
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.record((out,), inputs, backward_fn)
    return out


def _accumulate(t: Tensor, g):
    if g is None:
        return
    if g.shape != t.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} does not match tensor {t.shape}")
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


def backward(graph: Graph, loss: Tensor) -> None:
    """Fill ``.grad`` on every tensor reachable backwards from ``loss``.

    Gradients accumulate, so a tensor consumed twice receives the sum.
    """
    if loss.values.size != 1:
        raise NotScalar(f"loss must hold one element, got shape {loss.shape}")
    _accumulate(loss, np.ones_like(loss.values))
    for outputs, inputs, backward_fn in reversed(graph.nodes):
        grads_out = [o.grad for o in outputs]
        if all(g is None for g in grads_out):
            continue
        grads_out = [np.zeros_like(o.values) if g is None else g for g, o in zip(grads_out, outputs)]
        needs = [t.requires_grad for t in inputs]
        grads_in = backward_fn(grads_out[0] if len(outputs) == 1 else grads_out, needs)
        for t, g, need in zip(inputs, grads_in, needs):
            if need:
                _accumulate(t, g)


# --- elementwise and reductions -------------------------------------------------


def add(a: Tensor, b: Tensor, graph=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    return _emit(graph, a.values + b.values, (a, b), lambda g, needs: (g, g))


def sub(a: Tensor, b: Tensor, graph=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}")
    return _emit(graph, a.values - b.values, (a, b), lambda g, needs: (g, -g))


def scale(a: Tensor, factor: float, graph=None) -> Tensor:
    f = a.dtype.type(factor)
    return _emit(graph, a.values * f, (a,), lambda g, needs: (g * f,))


def affine(a: Tensor, factor: float, shift: float, graph=None) -> Tensor:
    """``a * factor + shift`` with constant scalars."""
    f, c = a.dtype.type(factor), a.dtype.type(shift)
    return _emit(graph, a.values * f + c, (a,), lambda g, needs: (g * f,))


def total(a: Tensor, graph=None) -> Tensor:
    """Sum of all entries (accumulated in float64)."""
    out = np.asarray(a.values.sum(dtype=np.float64), dtype=a.dtype)
    return _emit(graph, out, (a,), lambda g, needs: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a: Tensor, graph=None) -> Tensor:
    n = a.values.size
    out = np.asarray(a.values.mean(dtype=np.float64), dtype=a.dtype)
    return _emit(graph, out, (a,), lambda g, needs: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a: Tensor, shape, graph=None) -> Tensor:
    src = a.shape
    return _emit(graph, a.values.reshape(shape), (a,), lambda g, needs: (g.reshape(src),))


def unstack(x: Tensor, axis: int, graph=None) -> list[Tensor]:
    """Split ``x`` into views along ``axis`` as one multi-output operation."""
    axis = axis % x.values.ndim
    outs = [Tensor(np.take(x.values, i, axis=axis)) for i in range(x.shape[axis])]
    if graph is not None and x.requires_grad:
        for o in outs:
            o.requires_grad = True

        def _backward(grads, needs):
            return (np.stack(grads, axis=axis).astype(x.dtype),)

        graph.record(tuple(outs), (x,), _backward)
    return outs


def relu(x: Tensor, graph=None) -> Tensor:
    mask = x.values > 0
    return _emit(graph, np.where(mask, x.values, 0).astype(x.dtype), (x,),
                 lambda g, needs: (g * mask,))


def half_sq_dist(z: Tensor, z0: Tensor, graph=None) -> Tensor:
    """``0.5 * ||z - z0||^2`` over the last axis."""
    if z.shape != z0.shape:
        raise ShapeMismatch(f"half_sq_dist: {z.shape} vs {z0.shape}")
    diff = z.values.astype(np.float64) - z0.values
    out = (0.5 * np.sum(diff * diff, axis=-1)).astype(z.dtype)

    def _backward(g, needs):
        gd = (np.asarray(g, dtype=np.float64)[..., None] * diff).astype(z.dtype)
        return gd, -gd

    return _emit(graph, out, (z, z0), _backward)


def block_mean(x: Tensor, factors, graph=None) -> Tensor:
    """Average non-overlapping ``fr x fc`` blocks of the last two axes."""
    fr, fc = factors
    *lead, rows, cols = x.shape
    if rows % fr or cols % fc:
        raise ShapeMismatch(f"block_mean: {rows}x{cols} not divisible by {fr}x{fc}")
    if fr == 1 and fc == 1:
        return x
    blocks = x.values.reshape(*lead, rows // fr, fr, cols // fc, fc)
    out = blocks.mean(axis=(-3, -1), dtype=np.float64).astype(x.dtype)

    def _backward(g, needs):
        gx = np.repeat(np.repeat(g / (fr * fc), fr, axis=-2), fc, axis=-1)
        return (gx.astype(x.dtype),)

    return _emit(graph, out, (x,), _backward)


# --- layers ----------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor, graph=None) -> Tensor:
    if w.values.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],) or x.values.ndim > 2:
        raise ShapeMismatch(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    out = x.values @ w.values + b.values

    def _backward(g, needs):
        gx = g @ w.values.T if needs[0] else None
        if needs[1]:
            gw = np.outer(x.values, g) if x.values.ndim == 1 else x.values.T @ g
        else:
            gw = None
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0, dtype=np.float64).astype(b.dtype) if needs[2] else None
        return gx, gw, gb

    return _emit(graph, out, (x, w, b), _backward)


def _batched(x: Tensor, ndim: int, op: str):
    v = x.values
    if v.ndim == ndim:
        return v[None], True
    if v.ndim == ndim + 1:
        return v, False
    raise ShapeMismatch(f"{op}: expected {ndim}-D or batched {ndim + 1}-D input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same", graph=None) -> Tensor:
    """Channels-last 2-D cross-correlation with stride 1, plus bias."""
    xb, squeeze = _batched(x, 3, "conv2d")
    w = kernels.values
    if w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: kernels must be KxKxCinxCout, got {kernels.shape}")
    k, _, cin, cout = w.shape
    if xb.shape[-1] != cin or bias.shape != (cout,):
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")
    if padding == "same":
        if k % 2 == 0:
            raise ShapeMismatch("conv2d: same padding needs an odd kernel size")
        p = k // 2
    elif padding == "valid":
        p = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n, h, wd, _ = xb.shape
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeMismatch(f"conv2d: input {x.shape} smaller than kernel {k}x{k}")
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    cols = np.empty((n, ho, wo, k, k, cin), dtype=xb.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    cols = cols.reshape(n * ho * wo, k * k * cin)
    w2 = w.reshape(k * k * cin, cout)
    out = (cols @ w2 + bias.values).reshape(n, ho, wo, cout)

    def _backward(g, needs):
        g2 = g.reshape(n * ho * wo, cout)
        gx = gw = gb = None
        if needs[0]:
            dcols = (g2 @ w2.T).reshape(n, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
            if squeeze:
                gx = gx[0]
        if needs[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        if needs[2]:
            gb = g2.sum(axis=0, dtype=np.float64).astype(bias.dtype)
        return gx, gw, gb

    return _emit(graph, out[0] if squeeze else out, (x, kernels, bias), _backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2, graph=None) -> Tensor:
    """Non-overlapping max pooling; the gradient goes to the first maximum in row-major order."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    xb, squeeze = _batched(x, 3, "maxpool2d")
    n, h, w, c = xb.shape
    if h < window or w < window:
        raise ShapeMismatch(f"maxpool2d: input {x.shape} smaller than window {window}")
    ho, wo = h // window, w // window
    crop = xb[:, :ho * window, :wo * window, :]
    win = crop.reshape(n, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, ho, wo, c, window * window)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g, needs):
        gwin = np.zeros((n, ho, wo, c, window * window), dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], g.reshape(n, ho, wo, c)[..., None], axis=-1)
        gcrop = gwin.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
        gx = np.zeros_like(xb)
        gx[:, :ho * window, :wo * window, :] = gcrop.reshape(n, ho * window, wo * window, c)
        return (gx[0] if squeeze else gx,)

    return _emit(graph, out[0] if squeeze else out, (x,), _backward)


def _sigmoid(v):
    return 0.5 * (np.tanh(0.5 * v) + 1)


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor,
              graph=None) -> tuple[Tensor, Tensor]:
    """One LSTM step; gate blocks in ``w_x``/``w_h``/``b`` are ordered input, forget, candidate, output."""
    hid = h_prev.shape[-1]
    if (w_x.values.ndim != 2 or w_x.shape != (x.shape[-1], 4 * hid) or w_h.shape != (hid, 4 * hid)
            or b.shape != (4 * hid,) or c_prev.shape != h_prev.shape
            or x.shape[:-1] != h_prev.shape[:-1]):
        raise ShapeMismatch(
            f"lstm_cell: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
    pre = x.values @ w_x.values + h_prev.values @ w_h.values + b.values
    i = _sigmoid(pre[..., :hid])
    f = _sigmoid(pre[..., hid:2 * hid])
    gc = np.tanh(pre[..., 2 * hid:3 * hid])
    o = _sigmoid(pre[..., 3 * hid:])
    c = f * c_prev.values + i * gc
    tc = np.tanh(c)
    h = o * tc

    h_out, c_out = Tensor(h), Tensor(c)
    inputs = (x, h_prev, c_prev, w_x, w_h, b)
    if graph is not None and any(t.requires_grad for t in inputs):
        h_out.requires_grad = c_out.requires_grad = True

        def _backward(grads, needs):
            gh, gcell = grads
            dc = gcell + gh * o * (1 - tc * tc)
            dpre = np.concatenate([
                dc * gc * i * (1 - i),
                dc * c_prev.values * f * (1 - f),
                dc * i * (1 - gc * gc),
                gh * tc * o * (1 - o),
            ], axis=-1)
            gx = dpre @ w_x.values.T if needs[0] else None
            gh_prev = dpre @ w_h.values.T if needs[1] else None
            gc_prev = dc * f if needs[2] else None
            if x.values.ndim == 1:
                gwx = np.outer(x.values, dpre) if needs[3] else None
                gwh = np.outer(h_prev.values, dpre) if needs[4] else None
                gb = dpre if needs[5] else None
            else:
                gwx = x.values.T @ dpre if needs[3] else None
                gwh = h_prev.values.T @ dpre if needs[4] else None
                gb = dpre.sum(axis=0, dtype=np.float64).astype(b.dtype) if needs[5] else None
            return gx, gh_prev, gc_prev, gwx, gwh, gb

        graph.record((h_out, c_out), inputs, _backward)
    return h_out, c_out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels, graph=None) -> Tensor:
    """``-log softmax(logits)[label]``; a batch of logits yields one loss per row."""
    v = logits.values
    if v.ndim not in (1, 2) or v.shape[-1] < 2:
        raise ShapeMismatch(f"softmax_cross_entropy: need (C,) or (N, C) logits with C >= 2, got {v.shape}")
    labels = np.asarray(labels)
    if labels.shape != v.shape[:-1]:
        raise ShapeMismatch(f"softmax_cross_entropy: labels {labels.shape} vs logits {v.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or (labels < 0).any() or (labels >= v.shape[-1]).any():
        raise BadLabel(f"labels must be integers in [0, {v.shape[-1]})")
    z = v.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, labels[..., None], axis=-1)[..., 0]
    out = (logsum - picked).astype(v.dtype)

    def _backward(g, needs):
        p = np.exp(z - logsum[..., None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        return ((np.asarray(g, dtype=np.float64)[..., None] * (p - onehot)).astype(v.dtype),)

    return _emit(graph, np.asarray(out), (logits,), _backward)


# --- finite-difference checking ---------------------------------------------------


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[list], float], arrays: list, index: int, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arrays[index]``, step ``eps * max(1, |x_i|)``."""
    x = arrays[index]
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        pos = it.multi_index
        orig = x[pos]
        h = eps * max(1.0, abs(orig))
        x[pos] = orig + h
        fp = f(arrays)
        x[pos] = orig - h
        fm = f(arrays)
        x[pos] = orig
        grad[pos] = (fp - fm) / (2 * h)
    return grad


def grad_check(fn: Callable, shapes: Sequence, seed: int = 0, eps: float = 1e-3,
               sampler: Callable | None = None, wrt: Sequence[int] | None = None) -> float:
    """Max relative error between backprop and central differences, in float64.

    ``fn(tensors, graph)`` maps float64 tensors built from random arrays of the
    given ``shapes`` to an output tensor (or tuple of tensors). The scalar
    checked is a fixed random projection of all outputs, so every output
    component contributes. ``sampler(rng, shape)`` overrides the default
    standard-normal inputs.
    """
    rng = np.random.default_rng(seed)
    draw = sampler or (lambda r, s: r.standard_normal(s))
    arrays = [np.asarray(draw(rng, s), dtype=np.float64) for s in shapes]
    wrt = range(len(arrays)) if wrt is None else wrt

    probe = fn([Tensor(a.copy()) for a in arrays], None)
    outs = probe if isinstance(probe, tuple) else (probe,)
    weights = [rng.standard_normal(o.shape) for o in outs]

    def scalar(arrs):
        res = fn([Tensor(a) for a in arrs], None)
        res = res if isinstance(res, tuple) else (res,)
        return float(sum(np.sum(o.values * w) for o, w in zip(res, weights)))

    graph = Graph()
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    res = fn(tensors, graph)
    res = res if isinstance(res, tuple) else (res,)
    terms = [total(_weighted(o, w, graph), graph) for o, w in zip(res, weights)]
    loss = terms[0]
    for t in terms[1:]:
        loss = add(loss, t, graph)
    backward(graph, loss)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(scalar, arrays, i, eps)
        worst = max(worst, float(relative_errors(analytic, numeric).max(initial=0.0)))
    return worst


def _weighted(t: Tensor, w: np.ndarray, graph) -> Tensor:
    w = w.astype(t.dtype)
    return _emit(graph, t.values * w, (t,), lambda g, needs: (g * w,))


# --- ADAW checkpoints -------------------------------------------------------------

ADAW_MAGIC = b"ADAW"
ADAW_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_tensors(named: Sequence[tuple[str, np.ndarray]]) -> bytes:
    """``ADAW`` | u16 version | u32 count | per tensor: u16 name_len, name, u8 ndim, u32 dims, f32 data."""
    parts = [ADAW_MAGIC, struct.pack("<HI", ADAW_VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> list[tuple[str, np.ndarray]]:
    if buf[:4] != ADAW_MAGIC:
        raise CheckpointError("not an ADAW checkpoint")
    pos = 4
    try:
        version, count = struct.unpack_from("<HI", buf, pos)
        pos += 6
        if version != ADAW_VERSION:
            raise CheckpointError(f"unsupported ADAW version {version}")
        out = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(buf[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"tensor {name!r} truncated")
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
            out.append((name, arr))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return out
