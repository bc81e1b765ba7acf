"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything downstream (routers, experts, the full segmentation model) is built
from the primitives in this module. Operations record onto the innermost
active :class:`Tape`; outside a tape they run forward-only. Gradients are
checked against central finite differences via :func:`finite_diff_check`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "StateError",
    "NonFiniteError",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "add_scalar",
    "mul_scalar",
    "pow_scalar",
    "relu",
    "sigmoid",
    "softplus",
    "sqrt_eps",
    "matmul",
    "softmax",
    "masked_softmax",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "crop",
    "embedding",
    "conv2d",
    "conv2d_depthwise",
    "conv2d_pointwise",
    "upsample_bilinear",
    "global_avg_pool",
    "layer_norm",
    "batch_norm",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is outside its permitted range."""


class ContractError(RuntimeError):
    """A caller violated an operation's documented contract."""


class StateError(RuntimeError):
    """Stateful component used before the required state exists."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf was detected where finite values are required."""


PARAM_KINDS = ("weight", "bias", "norm_scale", "norm_shift", "fixed_kernel")


class Tensor:
    """A dense float64 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @staticmethod
    def _wrap(arr: np.ndarray) -> "Tensor":
        """Wrap an op result without revalidating (internal fast path)."""
        t = Tensor.__new__(Tensor)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def validate_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds non-finite values")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named, trainable leaf tensor.

    ``kind`` drives the freeze policy; ``fixed_kernel`` parameters (Sobel,
    Laplace, blur) can never be made trainable.
    """

    __slots__ = ("name", "kind")

    def __init__(self, data, name: str = "", kind: str = "weight", trainable: bool = True):
        if kind not in PARAM_KINDS:
            raise ConfigError(f"unknown parameter kind {kind!r}")
        if kind == "fixed_kernel" and trainable:
            raise ConfigError("fixed_kernel parameters are never trainable")
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.kind = kind

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    def set_trainable(self, flag: bool) -> None:
        if self.kind == "fixed_kernel" and flag:
            raise ConfigError(f"parameter {self.name!r} holds a fixed kernel")
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, kind={self.kind}, trainable={self.trainable})"


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _TapeEntry:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule):
        self.output = output
        self.inputs = inputs
        self.rule = rule


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of operations for one reverse pass.

    Entries are appended as ops execute, so inputs always precede the ops
    that consume them. Usable as a context manager::

        with Tape() as tape:
            loss = model(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule) -> None:
        self.entries.append(_TapeEntry(output, inputs, rule))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse sweep: accumulate gradients into every requires_grad leaf.

    Repeated calls without ``zero_grad`` accumulate (documented contract).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced and loss.requires_grad:
        _accumulate_leaf(loss, grads[id(loss)])
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        input_grads = entry.rule(g)
        for inp, ig in zip(entry.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
            else:
                _accumulate_leaf(inp, ig)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Arithmetic
# --------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), rule)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p
    ad = a.data

    def rule(g):
        return (g * p * ad ** (p - 1.0),)

    return _record(out, (a,), rule)


# --------------------------------------------------------------------------
# Pointwise nonlinearities
# --------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Stable two-sided evaluation; never exponentiates a large positive value.
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), rule)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * sig,)

    return _record(out, (a,), rule)


def sqrt_eps(a: Tensor, eps: float) -> Tensor:
    """sqrt(x + eps); eps keeps the gradient finite at x = 0."""
    out = np.sqrt(a.data + eps)

    def rule(g):
        return (g * 0.5 / out,)

    return _record(out, (a,), rule)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    flat2d = bd.ndim == 2 and ad.ndim >= 2
    if flat2d:
        # Collapse leading axes into one GEMM; faster than stacked matmul.
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))
    else:
        out = ad @ bd

    def rule(g):
        ga = gb = None
        if flat2d:
            k, n = bd.shape
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), rule)


# --------------------------------------------------------------------------
# Softmax
# --------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax input is not finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), rule)


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is True; exact zeros elsewhere.

    A mask of all True follows the identical arithmetic path as
    :func:`softmax`, so dense routing reproduces it bitwise. The backward
    formula of the plain softmax applies verbatim because the output is zero
    at excluded positions.
    """
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("masked_softmax input is not finite")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=axis).all():
        raise ContractError("masked_softmax: some slice has no selected entries")
    neg_inf_free = np.where(mask, a.data, -np.inf)
    shifted = a.data - neg_inf_free.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), rule)


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).copy(),)

    return _record(np.asarray(out), (a,), rule)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul_scalar(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --------------------------------------------------------------------------
# Shape manipulation
# --------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape
    return _record(np.ascontiguousarray(out), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), rule)


def crop(a: Tensor, slices: tuple[slice, ...]) -> Tensor:
    """Basic slicing; backward scatters into a zero tensor of the input shape."""
    out = np.ascontiguousarray(a.data[slices])
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[slices] = g
        return (full,)

    return _record(out, (a,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record(np.ascontiguousarray(out), (table,), rule)


# --------------------------------------------------------------------------
# Convolutions (correlation convention, 'same' output size)
# --------------------------------------------------------------------------

def _pad_input(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    return np.pad(x, widths, mode="edge" if mode == "replicate" else "constant")


def _unpad_grad(gp: np.ndarray, pad: int, mode: str, h: int, w: int) -> np.ndarray:
    if pad == 0:
        return gp
    if mode == "zero":
        return np.ascontiguousarray(gp[:, :, pad : pad + h, pad : pad + w])
    # Replicate padding: border pixels also received the padded copies' gradient.
    rows = np.clip(np.arange(gp.shape[2]) - pad, 0, h - 1)
    cols = np.clip(np.arange(gp.shape[3]) - pad, 0, w - 1)
    g = np.zeros((gp.shape[0], gp.shape[1], h, w))
    np.add.at(g, (slice(None), slice(None), rows[:, None], cols[None, :]), gp)
    return g


def conv2d_depthwise(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    padding: str = "zero",
) -> Tensor:
    """Per-channel k x k correlation with 'same' output size.

    kernel: (C, k, k). padding: 'zero' | 'replicate'.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_depthwise expects BCHW input, got {x.shape}")
    if kernel.data.ndim != 3 or kernel.shape[0] != x.shape[1]:
        raise ShapeError(f"depthwise kernel {kernel.shape} does not match input channels {x.shape}")
    k = kernel.shape[1]
    if kernel.shape[2] != k:
        raise ShapeError("depthwise kernel must be square")
    if k % 2 == 0:
        raise ConfigError("even kernel sizes are unsupported")
    if padding not in ("zero", "replicate"):
        raise ConfigError(f"unknown padding mode {padding!r}")
    b, c, h, w = x.shape
    pad = k // 2
    xp = _pad_input(x.data, pad, padding)
    out = np.zeros((b, c, h, w))
    kd = kernel.data
    for u in range(k):
        for v in range(k):
            out += kd[:, u, v][None, :, None, None] * xp[:, :, u : u + h, v : v + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gx = gk = gb = None
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gp[:, :, u : u + h, v : v + w] += kd[:, u, v][None, :, None, None] * g
            gx = _unpad_grad(gp, pad, padding, h, w)
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for u in range(k):
                for v in range(k):
                    gk[:, u, v] = (g * xp[:, :, u : u + h, v : v + w]).sum(axis=(0, 2, 3))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _record(out, inputs, rule)


def conv2d_pointwise(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: a channel-mixing matrix applied at every pixel.

    kernel: (C_out, C_in).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d_pointwise expects BCHW input, got {x.shape}")
    if kernel.data.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise kernel {kernel.shape} does not match input channels {x.shape}")
    b, ci, h, w = x.shape
    co = kernel.shape[0]
    kd, xd = kernel.data, x.data
    out = (kd @ xd.reshape(b, ci, h * w)).reshape(b, co, h, w)
    if bias is not None:
        out += bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gx = gk = gb = None
        g3 = g.reshape(b, co, h * w)
        if x.requires_grad:
            gx = (kd.T @ g3).reshape(x.shape)
        if kernel.requires_grad:
            gk = np.einsum("bon,bin->oi", g3, xd.reshape(b, ci, h * w), optimize=True)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk) if bias is None else (gx, gk, gb)

    return _record(out, inputs, rule)


def conv2d(
    x: Tensor,
    kernel: Tensor,
    kind: str,
    padding: str = "zero",
    bias: Optional[Tensor] = None,
) -> Tensor:
    """Shape-preserving conv dispatch for 4D kernels.

    depthwise kernels are (C, 1, k, k); pointwise kernels (C_out, C_in, 1, 1).
    ``padding`` accepts 'same_zero'/'same_replicate' aliases.
    """
    padding = {"same_zero": "zero", "same_replicate": "replicate"}.get(padding, padding)
    if kind == "depthwise":
        if kernel.data.ndim != 4 or kernel.shape[1] != 1:
            raise ShapeError(f"depthwise kernel must be (C,1,k,k), got {kernel.shape}")
        squeezed = reshape(kernel, (kernel.shape[0], kernel.shape[2], kernel.shape[3]))
        return conv2d_depthwise(x, squeezed, bias=bias, padding=padding)
    if kind == "pointwise":
        if kernel.data.ndim != 4 or kernel.shape[2] != 1 or kernel.shape[3] != 1:
            raise ShapeError(f"pointwise kernel must be (Cout,Cin,1,1), got {kernel.shape}")
        squeezed = reshape(kernel, (kernel.shape[0], kernel.shape[1]))
        return conv2d_pointwise(x, squeezed, bias=bias)
    raise ConfigError(f"unknown conv kind {kind!r}")


# --------------------------------------------------------------------------
# Resampling and pooling
# --------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix (half-pixel alignment)."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    frac = np.clip(src - np.floor(src), 0.0, 1.0)
    frac = np.where(src < 0, 0.0, frac)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel alignment).

    Separable: out = R @ x @ C^T with interpolation matrices R, C, which also
    gives the exact transpose for the backward pass.
    """
    if factor < 1:
        raise ConfigError("upsample factor must be >= 1")
    b, c, h, w = x.shape
    rmat = _interp_matrix(h, h * factor)
    cmat = _interp_matrix(w, w * factor)
    out = rmat @ x.data @ cmat.T

    def rule(g):
        return (rmat.T @ g @ cmat,)

    return _record(np.ascontiguousarray(out), (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects BCHW, got {x.shape}")
    return tmean(x, axis=(2, 3))


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------

def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (population statistics), then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = scale.data * xhat + shift.data
    n = x.shape[-1]

    def rule(g):
        gx = gscale = gshift = None
        gs = g * scale.data
        if x.requires_grad:
            m1 = gs.mean(axis=-1, keepdims=True)
            m2 = (gs * xhat).mean(axis=-1, keepdims=True)
            gx = (gs - m1 - xhat * m2) * inv
        if scale.requires_grad:
            gscale = _unbroadcast(g * xhat, scale.shape)
        if shift.requires_grad:
            gshift = _unbroadcast(g, shift.shape)
        return gx, gscale, gshift

    del n
    return _record(out, (x, scale, shift), rule)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    batches_tracked: int = 0,
) -> tuple[Tensor, int]:
    """Per-channel normalization over (B, H, W) with running-statistics tracking.

    Returns the normalized tensor and the updated batches_tracked count.
    Running buffers are updated in place in training mode (population
    variance, matching the normalization path).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects BCHW, got {x.shape}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
        batches_tracked += 1
    else:
        if batches_tracked == 0:
            raise StateError("eval-mode batch_norm before any running statistics exist")
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
    n = x.shape[0] * x.shape[2] * x.shape[3]

    def rule(g):
        gx = gscale = gshift = None
        gs = g * scale.data[None, :, None, None]
        if x.requires_grad:
            if training:
                m1 = gs.mean(axis=axes)[None, :, None, None]
                m2 = (gs * xhat).mean(axis=axes)[None, :, None, None]
                gx = (gs - m1 - xhat * m2) * inv[None, :, None, None]
            else:
                gx = gs * inv[None, :, None, None]
        if scale.requires_grad:
            gscale = (g * xhat).sum(axis=axes)
        if shift.requires_grad:
            gshift = g.sum(axis=axes)
        return gx, gscale, gshift

    del n
    return _record(out, (x, scale, shift), rule), batches_tracked


def normalize(
    x: Tensor,
    kind: str,
    scale: Tensor,
    shift: Tensor,
    mode: str = "train",
    eps: Optional[float] = None,
    **bn_state,
):
    """Spec-facing dispatch over layer_norm / batch_norm."""
    if kind == "layer_norm":
        return layer_norm(x, scale, shift, eps=1e-6 if eps is None else eps)
    if kind == "batch_norm":
        return batch_norm(
            x,
            scale,
            shift,
            training=(mode == "train"),
            eps=1e-5 if eps is None else eps,
            **bn_state,
        )
    raise ConfigError(f"unknown normalization kind {kind!r}")


# --------------------------------------------------------------------------
# Gradient oracle
# --------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
) -> float:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must be deterministic (verified by a repeated base evaluation) and
    is re-run untaped for each perturbed coordinate. Returns the maximum
    relative error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ConfigError("finite difference step must be positive")
    params = list(params)
    base0 = f().item()
    base1 = f().item()
    if base0 != base1:
        raise ContractError("finite_diff_check requires a deterministic function (disable noise)")

    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
