"""Dense float tensors with reverse-mode automatic differentiation.

The carrier type is :class:`Tensor`, a thin wrapper over a numpy array
(float32 by default, float64 supported for high-precision gradient
checking). Differentiable primitives record themselves onto the active
:class:`Tape`; ``Tape.backward`` replays the records in reverse, visiting
each node exactly once.

Conventions used everywhere in the package:

* row-major layout, channels-first images ``(c, H, W)``,
* token matrices are ``(n_tokens, d)``,
* conv2d is cross-correlation (no kernel flip),
* broadcasting is restricted to scalar-tensor and per-channel bias;
  all other shape mismatches raise :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ContractError, DimensionError

_TLS = threading.local()

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of differentiable primitives.

    Nodes are appended in creation order, which is a topological order by
    construction (an op can only consume tensors that already exist).
    ``backward`` walks the list once, in reverse; ``visit_counts`` is the
    instrumented per-node visit counter used by the invariants tests.
    """

    def __init__(self):
        self.nodes = []
        self.visit_counts = []

    def __enter__(self):
        if getattr(_TLS, "tape", None) is not None:
            raise ContractError("nested tapes are not supported")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    def record(self, out, inputs, backward_fn):
        out._node_index = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward_fn))
        self.visit_counts.append(0)

    def backward(self, loss):
        """Propagate gradients from a scalar loss to every reachable leaf.

        Populates ``.grad`` (accumulating) on tensors with
        ``requires_grad=True``; frozen tensors never receive a gradient.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ContractError(
                f"loss must be scalar, got shape {tuple(loss.data.shape)}"
            )
        # seed
        seed = np.ones_like(loss.data)
        grads = {id(loss): seed}
        for i in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[i]
            self.visit_counts[i] += 1
            out_grad = grads.pop(id(node.out), None)
            if out_grad is None:
                continue
            in_grads = node.backward_fn(out_grad)
            for t, g in zip(node.inputs, in_grads):
                if g is None or t is None:
                    continue
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
                if getattr(t, "_recorded", False):
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
        return None


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-d array of 32-bit (or 64-bit) reals, optionally on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_recorded", "_node_index")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._recorded = False
        self._node_index = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _needs_tape(*tensors):
    if _active_tape() is None:
        return False
    return any(
        isinstance(t, Tensor) and (t.requires_grad or t._recorded) for t in tensors
    )


def _emit(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    if _needs_tape(*inputs):
        out._recorded = True
        _active_tape().record(out, inputs, backward_fn)
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def backward(loss):
    """Run reverse-mode differentiation from a scalar loss.

    The loss must have been built under an active (now closed) Tape; its
    gradients land on the ``.grad`` fields of trainable leaf tensors.
    """
    tape = _active_tape()
    if tape is None:
        raise ContractError("backward() must be called inside a Tape context")
    tape.backward(loss)


# ---------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------

def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"{op}: shape {tuple(a.data.shape)} does not match {tuple(b.data.shape)}"
        )


def add(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        out = a.data + a.data.dtype.type(b)
        return _emit(out, [a], lambda g: [g])
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "add")
    return _emit(a.data + b.data, [a, b], lambda g: [g, g])


def sub(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "sub")
    return _emit(a.data - b.data, [a, b], lambda g: [g, -g])


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_same_shape(a, b, "mul")
    return _emit(a.data * b.data, [a, b], lambda g: [g * b.data, g * a.data])


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    return _emit(a.data * a.data.dtype.type(s), [a], lambda g: [g * s])


def add_bias(x, b):
    """Broadcast-add a per-channel bias.

    Supports ``(n, d) + (d,)`` for token matrices and ``(c, H, W) + (c,)``
    for feature maps — the only broadcasts the package allows.
    """
    x, b = _as_tensor(x), _as_tensor(b, like=x)
    if b.data.ndim != 1:
        raise DimensionError(f"bias must be 1-d, got shape {b.shape}")
    if x.data.ndim == 2 and x.data.shape[1] == b.data.shape[0]:
        out = x.data + b.data
        return _emit(out, [x, b], lambda g: [g, g.sum(axis=0)])
    if x.data.ndim == 3 and x.data.shape[0] == b.data.shape[0]:
        out = x.data + b.data[:, None, None]
        return _emit(out, [x, b], lambda g: [g, g.sum(axis=(1, 2))])
    if x.data.ndim == 1 and x.data.shape == b.data.shape:
        return add(x, b)
    raise DimensionError(
        f"add_bias: cannot broadcast bias {b.shape} onto {x.shape}"
    )


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0), [x], lambda g: [g * mask])


def gelu(x):
    """GELU with the tanh approximation (derivative is closed-form)."""
    x = _as_tensor(x)
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * xd ** 2)
        dt = (1.0 - t ** 2) * dinner
        return [g * (0.5 * (1.0 + t) + 0.5 * xd * dt)]

    return _emit(out.astype(xd.dtype), [x], bwd)


def sigmoid(x):
    x = _as_tensor(x)
    # numerically stable two-sided form
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit(out, [x], lambda g: [g * out * (1.0 - out)])


def tanh(x):
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, [x], lambda g: [g * (1.0 - out ** 2)])


def exp(x):
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, [x], lambda g: [g * out])


def log(x):
    x = _as_tensor(x)
    return _emit(np.log(x.data), [x], lambda g: [g / x.data])


def softmax(x, axis=-1):
    """Softmax along ``axis``, computed with max-subtraction for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [out * (g - dot)]

    return _emit(out.astype(x.data.dtype), [x], bwd)


# ---------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------

def sum_(x, axis=None):
    x = _as_tensor(x)
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, x.data.shape).astype(x.data.dtype)]
        return [np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()]

    return _emit(np.asarray(out, dtype=x.data.dtype), [x], bwd)


def mean(x, axis=None):
    x = _as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype)]
        return [np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape).copy()]

    return _emit(np.asarray(out, dtype=x.data.dtype), [x], bwd)


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.data.shape
    out = x.data.reshape(shape)
    return _emit(out, [x], lambda g: [g.reshape(old)])


def transpose(x):
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {x.shape}")
    return _emit(np.ascontiguousarray(x.data.T), [x], lambda g: [g.T])


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return [
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        ]

    return _emit(out, tensors, bwd)


def narrow(x, start, stop, axis=0):
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    x = _as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return [full]

    return _emit(out, [x], bwd)


# ---------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-d operands, got {a.shape} and {b.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner extents disagree, {a.shape} x {b.shape}"
        )
    out = a.data @ b.data
    return _emit(out, [a, b], lambda g: [g @ b.data.T, a.data.T @ g])


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis of a ``(n, d)`` matrix."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2:
        raise DimensionError(f"layernorm expects (n, d), got {x.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layernorm scale/shift must have shape ({d},), got "
            f"{gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gamma.data
        dx = inv * (
            gx
            - gx.mean(axis=1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=1, keepdims=True)
        )
        return [dx.astype(x.data.dtype), dgamma, dbeta]

    return _emit(out.astype(x.data.dtype), [x, gamma, beta], bwd)


# ---------------------------------------------------------------------
# image primitives
# ---------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation: ``(c_in,H,W) * (c_out,c_in,kh,kw) -> (c_out,H',W')``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (c,H,W) and (co,ci,kh,kw), got {x.shape} and {w.shape}"
        )
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d: input channels {cin} do not match kernel channels {cin_w}"
        )
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input "
            f"({h + 2 * padding},{wd + 2 * padding})"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(cout, cin * kh * kw)
    out = (wm @ cols).reshape(cout, ho, wo)
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.data.shape != (cout,):
            raise DimensionError(
                f"conv2d: bias shape {b.shape} does not match {cout} channels"
            )
        out = out + b.data[:, None, None]

    def bwd(g):
        gf = g.reshape(cout, ho * wo)
        dw = (gf @ cols.T).reshape(w.data.shape)
        dcols = (wm.T @ gf).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(1, 2)))
        return grads

    inputs = [x, w] if b is None else [x, w, b]
    return _emit(out, inputs, bwd)


def _resize_axis_weights(n_in, n_out, dtype):
    # align-corners=false sampling grid
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (pos - i0).astype(dtype)
    return i0, i1, frac


def bilinear_resize(x, size):
    """Bilinear resize of a ``(c, H, W)`` map (align-corners=false)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (c,H,W), got {x.shape}")
    h2, w2 = int(size[0]), int(size[1])
    if h2 < 1 or w2 < 1:
        raise DimensionError(f"bilinear_resize: target extents must be >= 1, got {size}")
    c, h, wd = x.data.shape
    if (h2, w2) == (h, wd):
        return _emit(x.data.copy(), [x], lambda g: [g])
    ri0, ri1, rf = _resize_axis_weights(h, h2, x.data.dtype)
    ci0, ci1, cf = _resize_axis_weights(wd, w2, x.data.dtype)
    rf = rf[:, None]
    cf = cf[None, :]
    tl = x.data[:, ri0[:, None], ci0[None, :]]
    tr = x.data[:, ri0[:, None], ci1[None, :]]
    bl = x.data[:, ri1[:, None], ci0[None, :]]
    br = x.data[:, ri1[:, None], ci1[None, :]]
    top = tl * (1 - cf) + tr * cf
    bot = bl * (1 - cf) + br * cf
    out = top * (1 - rf) + bot * rf

    def bwd(g):
        dx = np.zeros_like(x.data)
        g_top = g * (1 - rf)
        g_bot = g * rf
        for gg, rows, cols, wgt in (
            (g_top, ri0, ci0, (1 - cf)),
            (g_top, ri0, ci1, cf),
            (g_bot, ri1, ci0, (1 - cf)),
            (g_bot, ri1, ci1, cf),
        ):
            np.add.at(dx, (slice(None), rows[:, None], cols[None, :]), gg * wgt)
        return [dx]

    return _emit(out.astype(x.data.dtype), [x], bwd)


# ---------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean cross-entropy of ``(n, C)`` logits against integer labels ``(n,)``.

    The gradient w.r.t. the logits is the analytic ``(softmax - onehot)/n``.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n,C) logits, got {logits.shape}")
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise DimensionError(
            f"cross_entropy: labels shape {labels.shape} does not match ({n},)"
        )
    from .errors import DataError

    if labels.min() < 0 or labels.max() >= c:
        raise DataError(
            f"cross_entropy: label ids must lie in [0, {c}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    out = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return [(g * p / n).astype(logits.data.dtype)]

    return _emit(out, [logits], bwd)
