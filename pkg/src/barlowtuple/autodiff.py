"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record themselves on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape (or inside :func:`no_grad`)
they are plain numpy computations.

    >>> w = Parameter(np.ones((2, 2)), "w")
    >>> with Tape() as tape:
    ...     loss = mean_all(matmul(Tensor(np.eye(2)), w))
    >>> grads = tape.backward(loss)
    >>> grads["w"]
    array([[0.25, 0.25],
           [0.25, 0.25]])
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchSizeError, ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "Parameter", "Tape", "no_grad", "backward", "grad_check",
    "matmul", "transpose", "add", "sub", "mul", "div", "scale", "square", "exp",
    "sum", "mean_all", "relu", "conv2d", "upsample_nearest", "concat_channels",
    "global_avg_pool", "batchnorm_feature", "softmax", "log_softmax",
]

_TAPES: list[Tape | None] = []


class Tensor:
    """An n-dimensional float64 array that can take part in a recorded graph."""

    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
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

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf. ``grad`` always has the shape of ``data``."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops, swept backward exactly once.

    Records are appended in execution order, so the list is already a
    topological order. Gradients reaching a tensor from several consumers are
    summed in reverse record order, which is fixed for a fixed tape.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._swept = False

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for rec in self.records:
            for t in rec.inputs:
                if isinstance(t, Parameter) and id(t) not in seen:
                    seen[id(t)] = t
        return list(seen.values())

    def backward(self, loss: Tensor, params: Sequence[Parameter] | None = None) -> dict[str, np.ndarray]:
        """Sweep the tape from ``loss`` and return ``{name: grad}`` for parameters.

        Every leaf that requires a gradient gets ``.grad`` overwritten (not
        accumulated). ``params`` lists parameters to report even if they never
        reached the tape; they receive zero gradients.
        """
        if self._swept:
            raise ContractError("tape already swept; re-run the forward pass first")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        self._swept = True

        produced = {id(r.output) for r in self.records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t

        report = list(self.parameters())
        for p in params or ():
            if all(p is not q for q in report):
                report.append(p)
        for t in [*report, *leaves.values()]:
            t.grad = np.zeros_like(t.data)
        for key, t in leaves.items():
            t.grad = np.array(grads.get(key, 0.0) + t.grad)
        return {p.name: p.grad for p in report}


def backward(tape: Tape, loss: Tensor, params: Sequence[Parameter] | None = None) -> dict[str, np.ndarray]:
    return tape.backward(loss, params)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _TAPES.append(None)
    try:
        yield
    finally:
        _TAPES.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    tape = _TAPES[-1] if _TAPES else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.records.append(_Record(op, inputs, out, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --------------------------------------------------------------------------
# linear algebra / elementwise
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b),
                 lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericError("div: division by zero")
    out = A / B
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / B, a.shape), _unbroadcast(-g * out / B, b.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _emit("square", A * A, (a,), lambda g: (2.0 * A * g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bwd)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    shape = a.shape
    return _emit("mean_all", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = 1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = 1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit("log_softmax", out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# --------------------------------------------------------------------------
# network structure
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int | tuple[int, int] = 0) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``kernel[Cout,Cin,k,k]``.

    ``pad`` zero pixels are added on every border; a ``(before, after)``
    pair pads top/left and bottom/right separately, which lets a stride-2
    conv halve even sizes exactly. ``bias`` is an optional ``[Cout]`` tensor
    added per output channel.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, k, k2 = kernel.shape
    if Ck != C or k != k2:
        raise DimensionError(f"conv2d: kernel {kernel.shape} does not match input channels {C}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size must be odd, got {k}")
    p0, p1 = (pad, pad) if np.isscalar(pad) else tuple(pad)
    if stride < 1 or p0 < 0 or p1 < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / pad={pad}")
    span_h, span_w = H + p0 + p1 - k, W + p0 + p1 - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise DimensionError(f"conv2d: output size of {H}x{W} (k={k}, stride={stride}, pad={pad}) is not integral")
    Ho, Wo = span_h // stride + 1, span_w // stride + 1

    padded = p0 or p1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p0, p1), (p0, p1))) if padded else x.data
    cols = _im2col(xp, k, stride).reshape(B * Ho * Wo, C * k * k)
    wmat = kernel.data.reshape(O, C * k * k)
    out = cols @ wmat.T
    inputs: tuple[Tensor, ...] = (x, kernel)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (O,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({O},)")
        out += bias.data
        inputs = (x, kernel, bias)
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p0:p0 + H, p0:p0 + W] if padded else gxp
        if bias is None:
            return gx, gk
        return gx, gk, gm.sum(axis=0)

    return _emit("conv2d", out, inputs, bwd)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4 or factor < 1:
        raise DimensionError(f"upsample_nearest expects 4-D input and factor >= 1, got {x.shape}, {factor}")
    B, C, H, W = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _emit("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),))


def concat_channels(*xs) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one input")
    ref = xs[0].shape
    for x in xs:
        if x.ndim != 4 or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([x.shape[1] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=1)
    return _emit("concat_channels", out, xs, lambda g: tuple(np.split(g, bounds, axis=1)))


def global_avg_pool(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W
    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / n, x.shape).copy(),))


def batchnorm_feature(z, epsilon: float = 1e-9) -> Tensor:
    """Standardize each column of ``z[B,D]`` over the batch.

    Population variance; the variance is floored at ``epsilon`` so constant
    columns map to zero while already-standardized columns pass through
    unchanged.
    """
    z = _as_tensor(z)
    if z.ndim != 2:
        raise DimensionError(f"batchnorm_feature expects [B, D], got {z.shape}")
    B = z.shape[0]
    if B < 2:
        raise BatchSizeError(f"batchnorm_feature needs B >= 2, got {B}")
    centered = z.data - z.data.mean(axis=0)
    var = (centered * centered).mean(axis=0)
    floored = var <= epsilon
    inv = 1.0 / np.sqrt(np.where(floored, epsilon, var))
    xhat = centered * inv

    def bwd(g):
        gc = g - g.mean(axis=0)
        # floored columns have a constant denominator: only the centering term survives
        proj = np.where(floored, 0.0, (g * xhat).mean(axis=0))
        return (inv * (gc - xhat * proj),)

    return _emit("batchnorm_feature", xhat, (z,), bwd)


# --------------------------------------------------------------------------
# finite-difference check
# --------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None,
               rel_floor: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar graph from the current values of ``params``.
    Per entry the error is ``|a - n| / max(|a|, |n|, rel_floor * scale)``,
    ``scale`` being the largest gradient magnitude in that tensor, so entries
    far below the tensor's gradient scale are judged against that scale.
    Entries where both values sit below the central-difference roundoff level
    (``100 * eps * |f| / h``) count as agreeing zeros; this covers parameters
    whose gradient vanishes identically, such as biases ahead of batch
    standardization. ``max_entries`` subsamples coordinates per tensor.
    """
    if not 0 < h <= 1e-3:
        raise ContractError(f"grad_check: h must be in (0, 1e-3], got {h}")
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.array(p.grad) for p in params]
    noise = 100.0 * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / h

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for n, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric[n] = (fp - fm) / (2.0 * h)
            if not np.all(np.isfinite(numeric)):
                raise NumericError("grad_check: non-finite finite difference")
            av = a.reshape(-1)[idx]
            tensor_scale = max(np.abs(av).max(initial=0.0), np.abs(numeric).max(initial=0.0))
            denom = np.maximum(np.maximum(np.abs(av), np.abs(numeric)), rel_floor * tensor_scale)
            diff = np.abs(av - numeric)
            err = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
            err[(np.abs(av) <= noise) & (np.abs(numeric) <= noise)] = 0.0
            worst = max(worst, float(err.max(initial=0.0)))
    return worst
