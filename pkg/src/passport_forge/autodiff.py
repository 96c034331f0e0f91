"""Tape-based reverse-mode autodiff over dense float32 arrays.

Everything the rest of the package differentiates through lives here:
tensors, the gradient tape, the network primitives (convolution, batch
norm, activations, losses) and a small SGD optimizer. Forward results are
plain numpy under the hood; gradients are recorded onto an explicit Tape
and replayed in reverse by :func:`backward`.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class AutodiffError(RuntimeError):
    """Misuse of the tape / backward machinery."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    """Dense float32 array with an optional gradient buffer.

    ``requires_grad`` marks trainable leaves; intermediates produced under
    an active tape inherit the flag so the chain keeps recording. ``grad``
    accumulates across backward passes until explicitly cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, op="sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _reduce(self, axis, keepdims, op="mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_BackwardFn = Callable[[np.ndarray], list]


class Tape:
    """Ordered record of executed ops for one forward pass.

    Records are appended in execution order, so inputs always precede the
    ops that consume them; :func:`backward` walks the list in reverse.
    A tape supports a single backward pass unless :meth:`reset` is called.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, _BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _STACK.tapes.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STACK.tapes.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise AutodiffError("tape stack corrupted by unbalanced enter/exit")
        return False

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False

    def __len__(self) -> int:
        return len(self._records)


class _Stack(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []


_STACK = _Stack()


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace(*inputs: Tensor) -> Tape | None:
    """Active tape if recording applies to these inputs, else None."""
    if not _STACK.tapes:
        return None
    if any(t.requires_grad for t in inputs):
        return _STACK.tapes[-1]
    return None


def _record(tape: Tape, out: Tensor, backward_fn: _BackwardFn) -> None:
    out.requires_grad = True
    tape._records.append((out, backward_fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    ``loss`` must be a scalar produced under ``tape``. Intermediate
    gradients are kept only transiently; leaf gradients accumulate.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise AutodiffError("tape already consumed by a backward pass; call reset() first")
    produced = {id(out) for out, _ in tape._records}
    if id(loss) not in produced:
        raise AutodiffError("loss was not produced under this tape")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for tensor, piece in backward_fn(g):
            if id(tensor) in produced:
                held = grads.get(id(tensor))
                grads[id(tensor)] = piece if held is None else held + piece
            elif tensor.requires_grad:
                if tensor.grad is None:
                    tensor.grad = np.ascontiguousarray(piece, dtype=DTYPE)
                else:
                    tensor.grad = tensor.grad + piece


# ---------------------------------------------------------------------------
# elementwise / linear algebra ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    tape = _trace(a, b)
    if tape is not None:
        def _bwd(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

        _record(tape, out, _bwd)
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    tape = _trace(a, b)
    if tape is not None:
        def _bwd(g):
            return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

        _record(tape, out, _bwd)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    tape = _trace(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def _bwd(g):
            return [(a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape))]

        _record(tape, out, _bwd)
    return out


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands with numpy semantics."""
    a, b = _lift(a), _lift(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = Tensor(a.data @ b.data)
    tape = _trace(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def _bwd(g):
            if ad.ndim == 2 and bd.ndim == 2:
                return [(a, g @ bd.T), (b, ad.T @ g)]
            if ad.ndim == 2 and bd.ndim == 1:
                return [(a, np.outer(g, bd)), (b, ad.T @ g)]
            if ad.ndim == 1 and bd.ndim == 2:
                return [(a, bd @ g), (b, np.outer(ad, g))]
            return [(a, g * bd), (b, g * ad)]

        _record(tape, out, _bwd)
    return out


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())
    tape = _trace(a)
    if tape is not None:
        def _bwd(g):
            return [(a, g.T)]

        _record(tape, out, _bwd)
    return out


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc
    tape = _trace(a)
    if tape is not None:
        src_shape = a.shape

        def _bwd(g):
            return [(a, g.reshape(src_shape))]

        _record(tape, out, _bwd)
    return out


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _reduce(a: Tensor, axis, keepdims: bool, op: str) -> Tensor:
    a = _lift(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if op == "sum":
        out_data = a.data.sum(axis=axes or None, keepdims=keepdims, dtype=DTYPE)
    else:
        out_data = a.data.mean(axis=axes or None, keepdims=keepdims, dtype=DTYPE)
    out = Tensor(out_data)
    tape = _trace(a)
    if tape is not None:
        src_shape = a.shape

        def _bwd(g):
            gg = np.asarray(g, dtype=DTYPE)
            if not keepdims and axes:
                gg = np.expand_dims(gg, axes)
            if op == "mean":
                gg = gg / count
            return [(a, np.broadcast_to(gg, src_shape).copy())]

        _record(tape, out, _bwd)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(_lift(a), axis, keepdims, op="mean")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(_lift(a), axis, keepdims, op="sum")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def leaky_relu(a, negative_slope: float = 0.01) -> Tensor:
    """x if x >= 0 else slope * x; the subgradient at 0 takes the positive branch."""
    if not 0.0 < negative_slope < 1.0:
        raise ValueError(f"negative_slope must lie in (0, 1), got {negative_slope}")
    a = _lift(a)
    nonneg = a.data >= 0
    out = Tensor(np.where(nonneg, a.data, a.data * DTYPE(negative_slope)))
    tape = _trace(a)
    if tape is not None:
        scale = np.where(nonneg, DTYPE(1.0), DTYPE(negative_slope))

        def _bwd(g):
            return [(a, g * scale)]

        _record(tape, out, _bwd)
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, DTYPE(0.0)))
    tape = _trace(a)
    if tape is not None:
        nonneg = a.data >= 0

        def _bwd(g):
            return [(a, g * nonneg)]

        _record(tape, out, _bwd)
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    out_data = np.tanh(a.data)
    out = Tensor(out_data)
    tape = _trace(a)
    if tape is not None:
        def _bwd(g):
            return [(a, g * (1.0 - out_data * out_data))]

        _record(tape, out, _bwd)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    z = a.data
    out_data = np.empty_like(z)
    pos = z >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    out = Tensor(out_data)
    tape = _trace(a)
    if tape is not None:
        def _bwd(g):
            return [(a, g * out_data * (1.0 - out_data))]

        _record(tape, out, _bwd)
    return out


def sign_pm1(a) -> np.ndarray:
    """Signs in {-1, +1} with sign(0) := +1. Not differentiable; metrics only."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.where(data >= 0, DTYPE(1.0), DTYPE(-1.0))


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Flatten sliding windows of a padded [N,C,H,W] input into GEMM columns.

    Returns [C*kh*kw, N*Ho*Wo] so the convolution is a single 2-D GEMM. Built
    with one bulk strided copy per kernel offset, which is much faster than a
    single elementwise gather.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u : u + (ho - 1) * stride + 1 : stride,
                       v : v + (wo - 1) * stride + 1 : stride]
            cols[:, u, v] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {xp.shape[2]}x{xp.shape[3]}"
        )
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def _conv_input_grad(
    g: np.ndarray, w: np.ndarray, in_shape: tuple[int, ...], stride: int, padding: int
) -> np.ndarray:
    """Gradient of conv2d w.r.t. its input, via a stride-1 transposed pass."""
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = w.shape
    h, wd = in_shape[2], in_shape[3]
    canvas = np.zeros((n, cout, h + kh - 1, wd + kw - 1), dtype=DTYPE)

    def _place(size_c, size_o, off):
        lo = max(0, -(-(-off) // stride))  # ceil(-off / stride), clipped at 0
        hi = min(size_o - 1, (size_c - 1 - off) // stride)
        return lo, hi

    off_h, off_w = kh - 1 - padding, kw - 1 - padding
    lo_h, hi_h = _place(h + kh - 1, ho, off_h)
    lo_w, hi_w = _place(wd + kw - 1, wo, off_w)
    if lo_h <= hi_h and lo_w <= hi_w:
        canvas[
            :,
            :,
            off_h + lo_h * stride : off_h + hi_h * stride + 1 : stride,
            off_w + lo_w * stride : off_w + hi_w * stride + 1 : stride,
        ] = g[:, :, lo_h : hi_h + 1, lo_w : hi_w + 1]
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv_forward(canvas, flipped, 1, 0)
    return dx


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [N,Cin,H,W] with [Cout,Cin,kH,kW] weights.

    Output spatial size is (H + 2*padding - kH) // stride + 1; differentiable
    with respect to both the input and the weight.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    if not (isinstance(stride, int) and stride >= 1):
        raise ValueError(f"stride must be an integer >= 1, got {stride}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ValueError(f"padding must be a non-negative integer, got {padding}")
    out_data, cols = _conv_forward(x.data, w.data, stride, padding)
    out = Tensor(out_data)
    tape = _trace(x, w)
    if tape is not None:
        wd = w.data
        in_shape = x.shape

        def _bwd(g):
            grads = []
            if w.requires_grad:
                g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(wd.shape[0], -1)
                dw = g_mat @ cols.T
                grads.append((w, dw.reshape(wd.shape)))
            if x.requires_grad:
                grads.append((x, _conv_input_grad(g, wd, in_shape, stride, padding)))
            return grads

        _record(tape, out, _bwd)
    return out


def global_avg_pool(x) -> Tensor:
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-D tensor, got {x.shape}")
    out = Tensor(x.data.mean(axis=(2, 3), dtype=DTYPE))
    tape = _trace(x)
    if tape is not None:
        n, c, h, wd = x.shape
        scale = DTYPE(1.0 / (h * wd))

        def _bwd(g):
            return [(x, np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, wd)).copy())]

        _record(tape, out, _bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / losses
# ---------------------------------------------------------------------------


def batch_norm2d(
    x,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of [N,C,H,W] without an affine term.

    Train mode normalizes with batch statistics, backpropagates through
    them, and updates the running buffers in place (unbiased variance).
    Eval mode normalizes with the running buffers, which must be present.
    """
    x = _lift(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d expects a 4-D tensor, got {x.shape}")
    n, c, h, wd = x.shape
    if train:
        m = n * h * wd
        if m < 2:
            raise ShapeError("batch_norm2d train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), dtype=DTYPE)
        var = x.data.var(axis=(0, 2, 3), dtype=DTYPE)
        ivar = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
        xhat = (x.data - mu[None, :, None, None]) * ivar[None, :, None, None]
        if running_mean is not None and running_var is not None:
            running_mean *= DTYPE(1.0 - momentum)
            running_mean += DTYPE(momentum) * mu
            running_var *= DTYPE(1.0 - momentum)
            running_var += DTYPE(momentum) * (var * DTYPE(m / (m - 1)))
        out = Tensor(xhat)
        tape = _trace(x)
        if tape is not None:
            def _bwd(g):
                s1 = g.sum(axis=(0, 2, 3), dtype=DTYPE)[None, :, None, None]
                s2 = (g * xhat).sum(axis=(0, 2, 3), dtype=DTYPE)[None, :, None, None]
                dx = ivar[None, :, None, None] * (g - s1 / m - xhat * (s2 / m))
                return [(x, dx.astype(DTYPE, copy=False))]

            _record(tape, out, _bwd)
        return out

    if running_mean is None or running_var is None:
        raise AutodiffError("batch_norm2d eval mode requires initialized running statistics")
    ivar = (1.0 / np.sqrt(running_var + DTYPE(eps))).astype(DTYPE)
    out = Tensor((x.data - running_mean[None, :, None, None]) * ivar[None, :, None, None])
    tape = _trace(x)
    if tape is not None:
        def _bwd(g):
            return [(x, g * ivar[None, :, None, None])]

        _record(tape, out, _bwd)
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax over a batch, stabilized by max subtraction."""
    logits = _lift(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N,K] logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True, dtype=DTYPE)
    logp = (z - zmax) - np.log(sez)
    out = Tensor((-logp[np.arange(n), labels]).mean(dtype=DTYPE))
    tape = _trace(logits)
    if tape is not None:
        def _bwd(g):
            p = ez / sez
            p[np.arange(n), labels] -= 1.0
            return [(logits, p * (np.asarray(g, dtype=DTYPE) / n))]

        _record(tape, out, _bwd)
    return out


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stabilized."""
    logits = _lift(logits)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss.mean(dtype=DTYPE))
    tape = _trace(logits)
    if tape is not None:
        size = z.size

        def _bwd(g):
            s = np.empty_like(z)
            pos = z >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
            ez = np.exp(z[~pos])
            s[~pos] = ez / (1.0 + ez)
            return [(logits, (s - t) * (np.asarray(g, dtype=DTYPE) / size))]

        _record(tape, out, _bwd)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class SGD:
    """Momentum SGD over named parameters.

    The update is ``v <- momentum * v + grad`` followed by
    ``p <- p - lr * (v + weight_decay * p)``; gradients are cleared after
    each step. Missing gradients on a registered parameter are an error.
    """

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if isinstance(params, dict):
            items = list(params.items())
        else:
            items = [(f"param{i}", p) for i, p in enumerate(params)]
        if not items:
            raise ValueError("SGD needs at least one parameter")
        self._params: list[tuple[str, Tensor]] = items
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._buffers: dict[int, np.ndarray] = {}

    def step(self) -> None:
        for i, (name, p) in enumerate(self._params):
            if p.grad is None:
                raise AutodiffError(f"parameter '{name}' has no gradient; run backward first")
            g = p.grad
            if self.momentum:
                buf = self._buffers.get(i)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buffers[i] = buf
                v = buf
            else:
                v = g
            update = v + self.weight_decay * p.data if self.weight_decay else v
            p.data -= self.lr * update
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.grad = None
