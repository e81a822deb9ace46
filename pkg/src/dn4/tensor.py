"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: exactly what the embedding network, the
image-to-class measure, and the baseline heads need. Arrays are numpy,
float32 by default; float64 inputs stay float64 so gradient checks can run
in double precision.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "active_tape", "record",
    "add", "subtract", "multiply", "scale", "matmul",
    "conv2d", "batchnorm2d", "leaky_relu", "maxpool2d",
    "global_average_pool", "fully_connected",
    "softmax", "log", "tensor_sum", "tensor_mean",
    "reshape", "select0", "narrow", "concat", "stack",
    "softmax_cross_entropy",
]


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    `grad` is populated on leaves (tensors the user created with
    `requires_grad=True`) by `Tape.backward`; repeated backward calls
    accumulate until the caller resets `grad` to None.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__


# Backward rule: maps the output gradient to one gradient (or None) per input.
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_TAPES: list["Tape"] = []


class Tape:
    """Operation record for one forward pass.

    Ops are appended in execution order, which is already topological:
    every input of an op exists before the op runs. `backward` walks the
    list once in reverse, so each recorded node is visited exactly once.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], BackwardRule]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule):
        out.requires_grad = True
        out._tape = self
        self._ops.append((out, inputs, rule))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into `grad` of every requires_grad leaf."""
        if loss.data.size != 1:
            raise ContractError("backward expects a scalar loss")
        if not self._ops:
            raise ContractError("backward on an empty tape")
        # Gradients of intermediates live only in this dict; popping as we
        # go frees them as soon as their producer has consumed them.
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, rule in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gt in zip(inputs, rule(g)):
                if gt is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gt if prev is None else prev + gt
                else:
                    # Leaf (or a tensor produced on another tape, which this
                    # tape treats as a constant leaf).
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad = t.grad + gt


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def record(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    """Wrap an op result; record it when a tape is active and any input needs grad."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record(out, (a, b), rule)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record(out, (a, b), rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def rule(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return record(out, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), rule)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return record(out, (a,), lambda g: (g / a.data,))


def tensor_sum(a: Tensor) -> Tensor:
    out = a.data.sum()
    return record(out, (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tensor_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean()
    return record(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max subtraction."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return record(s, (a,), rule)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def select0(a: Tensor, i: int) -> Tensor:
    """Pick slice `i` along the leading axis."""
    out = a.data[i]

    def rule(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return record(out, (a,), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return record(out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return record(out, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float) -> Tensor:
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")
    # x > 0 -> 1, x <= 0 -> slope; the x == 0 convention is slope.
    m = np.where(a.data > 0, a.data.dtype.type(1), a.data.dtype.type(slope))
    out = a.data * m
    return record(out, (a,), lambda g: (g * m,))


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise DimensionError(
            f"fully_connected shape mismatch: {x.data.shape} x {w.data.shape}")
    out = x.data @ w.data + b.data

    def rule(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return record(out, (x, w, b), rule)


def global_average_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError("global_average_pool expects (N,C,H,W)")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def rule(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return record(out, (x,), rule)


def _im2col3(padded: np.ndarray):
    """3x3 windows of a padded (N,C,Hp,Wp) map as a (N*H*W, C*9) matrix."""
    win = sliding_window_view(padded, (3, 3), axis=(2, 3))  # (N,C,H,W,3,3)
    n, c, h, w = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    return np.ascontiguousarray(cols), (n, h, w)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int = 1, stride: int = 1) -> Tensor:
    """3x3 cross-correlation, zero padding 1, stride 1.

    This is the only configuration the four-block embedding uses, so the
    kernel geometry is enforced rather than generalized.
    """
    if padding != 1 or stride != 1:
        raise ContractError("conv2d supports padding=1, stride=1 only")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x:(N,Cin,H,W), w:(Cout,Cin,3,3)")
    cout, cin, kh, kw = w.data.shape
    if (kh, kw) != (3, 3):
        raise ContractError("conv2d kernel must be 3x3")
    if x.data.shape[1] != cin:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, weight expects {cin}")
    if b.data.shape != (cout,):
        raise DimensionError("conv2d bias must be (Cout,)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols, (n, h, wd) = _im2col3(xp)
    wmat = w.data.reshape(cout, cin * 9).T
    out = (cols @ wmat).reshape(n, h, wd, cout).transpose(0, 3, 1, 2)
    out = out + b.data[None, :, None, None]

    def rule(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = (cols.T @ gm).T.reshape(cout, cin, 3, 3)
        gb = g.sum(axis=(0, 2, 3))
        # grad wrt input: correlate the padded output-grad with the kernel
        # rotated 180 degrees and transposed over channels.
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gcols, _ = _im2col3(gp)
        wrot = w.data[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * 9, cin)
        gx = (gcols @ wrot).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return record(out, (x, w, b), rule)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    mode: str = "batch",
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
) -> Tensor:
    """Per-channel normalization of a (N,C,H,W) map, then affine gamma/beta.

    mode "batch" normalizes by the batch statistics and differentiates
    through them; mode "running" uses the provided buffers as constants.
    """
    if x.data.ndim != 4:
        raise DimensionError("batchnorm2d expects (N,C,H,W)")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batchnorm2d gamma/beta must be (C,)")
    ga = gamma.data[None, :, None, None]
    be = beta.data[None, :, None, None]

    if mode == "batch":
        cnt = n * h * w
        if cnt < 2:
            raise ContractError("batch-stats mode needs N*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        sd = np.sqrt(var + eps)
        xhat = (x.data - mu) / sd
        out = ga * xhat + be

        def rule(g):
            dg = (g * xhat).sum(axis=(0, 2, 3))
            db = g.sum(axis=(0, 2, 3))
            dxh = g * ga
            m1 = dxh.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (dxh * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = (dxh - m1 - xhat * m2) / sd
            return dx, dg, db

        return record(out, (x, gamma, beta), rule)

    if mode == "running":
        if running_mean is None or running_var is None:
            raise ContractError("running-stats mode needs running buffers")
        sd = np.sqrt(running_var + eps)[None, :, None, None]
        xhat = (x.data - running_mean[None, :, None, None]) / sd
        out = ga * xhat + be

        def rule(g):
            dg = (g * xhat).sum(axis=(0, 2, 3))
            db = g.sum(axis=(0, 2, 3))
            return g * ga / sd, dg, db

        return record(out, (x, gamma, beta), rule)

    raise ContractError(f"unknown batchnorm mode: {mode!r}")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Backward sends the whole window gradient to the first maximal element
    in row-major window order.
    """
    if x.data.ndim != 4:
        raise DimensionError("maxpool2d expects (N,C,H,W)")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (x.data.reshape(n, c, h2, 2, w2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h2, w2, 4))
    idx = win.argmax(axis=-1)  # argmax takes the first max: row-major tie-break
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, c, h2, w2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return record(out, (x,), rule)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (N,C) logits against integer labels."""
    if logits.data.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects (N,C) logits")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ContractError("labels must be one integer per row")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = np.asarray((lse - picked).mean(), dtype=logits.data.dtype)

    def rule(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return record(out, (logits,), rule)
