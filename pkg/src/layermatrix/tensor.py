"""Small define-by-run reverse-mode autodiff over numpy arrays.

Only the operations the detector needs are provided: strided 2-D
convolution, ReLU, sigmoid, 3x3 max pooling, channel slicing, and a few
elementwise helpers.  Every op checks its output for NaN/Inf and raises
:class:`NumericError` instead of propagating garbage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""

    def __init__(self, op: str, axis: str, message: str):
        self.op = op
        self.axis = axis
        super().__init__(f"{op}: axis '{axis}': {message}")


class NumericError(FloatingPointError):
    """Raised when a forward or backward value is not finite."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """An n-d array with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(self.op, "grad", f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every tracked ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", "output", "implicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"backward of {node.op}")
            if node._backward is None:
                node._accumulate(g)
                continue
            if node.name is not None or not node._parents:
                node._accumulate(g)
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # elementwise helpers -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tensor_sum(self)


def make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Create a graph node.  ``backward(g)`` returns one gradient per parent."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and b.data.size != 1:
        raise ShapeError("add", "shape", f"{a.shape} vs {b.shape}")
    scalar_b = a.shape != b.shape

    def backward(g):
        return g, (np.asarray(g.sum()).reshape(b.shape) if scalar_b else g)

    return make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape != b.shape:
        raise ShapeError("mul", "shape", f"{a.shape} vs {b.shape}")
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def take(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return make(np.ascontiguousarray(a.data[index]), (a,), backward, "take")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def max_pool_3x3_stride1(x: Tensor) -> Tensor:
    """3x3 max filter with stride 1 and padding 1 over the last two axes."""
    d = x.data
    h, w = d.shape[-2:]
    padded = np.full(d.shape[:-2] + (h + 2, w + 2), -np.inf, dtype=d.dtype)
    padded[..., 1:-1, 1:-1] = d
    out = np.full_like(d, -np.inf)
    arg = np.zeros(d.shape, dtype=np.int8)
    for k in range(9):
        dy, dx = divmod(k, 3)
        win = padded[..., dy:dy + h, dx:dx + w]
        better = win > out
        out = np.where(better, win, out)
        arg = np.where(better, k, arg)

    def backward(g):
        gp = np.zeros(padded.shape, dtype=g.dtype)
        for k in range(9):
            dy, dx = divmod(k, 3)
            gp[..., dy:dy + h, dx:dx + w] += np.where(arg == k, g, 0)
        return (gp[..., 1:-1, 1:-1],)

    return make(out, (x,), backward, "max_pool_3x3")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D convolution.  Strides and padding are (vertical, horizontal)."""

    in_channels: int
    out_channels: int
    kernel_h: int = 3
    kernel_w: int = 3
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 1
    pad_w: int = 1

    def __post_init__(self):
        if self.stride_h < 1 or self.stride_w < 1:
            raise ValueError(f"strides must be >= 1, got ({self.stride_h}, {self.stride_w})")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride_w + 1
        if oh < 1:
            raise ShapeError("conv2d", "height", f"output extent {oh} < 1 for input height {h}")
        if ow < 1:
            raise ShapeError("conv2d", "width", f"output extent {ow} < 1 for input width {w}")
        return oh, ow


def _windows(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, oh, ow, c, spec.kernel_h, spec.kernel_w),
        strides=(s0, s2 * spec.stride_h, s3 * spec.stride_w, s1, s2, s3),
        writeable=False,
    )
    return view.reshape(n * oh * ow, c * spec.kernel_h * spec.kernel_w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of an NCHW input with an (out, in, kh, kw) kernel."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d", "input", f"expected 4 axes (N,C,H,W), got {x.data.ndim}")
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError("conv2d", "channels", f"input has {c} channels, spec expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ShapeError("conv2d", "weight", f"weight shape {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError("conv2d", "bias", f"bias shape {bias.shape} != ({spec.out_channels},)")
    oh, ow = spec.out_extent(h, w)
    ph, pw = spec.pad_h, spec.pad_w
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x.data
    else:
        xp = np.ascontiguousarray(x.data)
    cols = _windows(xp, spec, oh, ow)
    wmat = weight.data.reshape(spec.out_channels, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, spec.out_channels)
        gw = (gm.T @ cols).reshape(spec.weight_shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, spec.kernel_h, spec.kernel_w)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(spec.kernel_h):
                for b in range(spec.kernel_w):
                    gxp[:, :, a:a + spec.stride_h * oh:spec.stride_h, b:b + spec.stride_w * ow:spec.stride_w] += (
                        dcols[..., a, b].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(np.ascontiguousarray(out), parents, backward, "conv2d")


class Adam:
    """Adam over a named collection of parameter tensors."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{k}'")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.params:
            self.m[k] = np.array(arrays[f"m/{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(arrays[f"v/{k}"], dtype=self.params[k].data.dtype)


def adam_step(params: Mapping[str, Tensor], state: Adam | None = None, lr: float | None = None) -> Adam:
    """One Adam update of ``params`` from their ``.grad``; returns the (possibly new) state."""
    if state is None:
        state = Adam(params, lr=5e-5 if lr is None else lr)
    elif lr is not None:
        state.lr = lr
    state.step()
    return state


def numerical_grad(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar ``f()`` with respect to ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = float(f().data)
        flat[idx] = orig - eps
        fm = float(f().data)
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` must rebuild its graph on every call and return a scalar tensor.
    Parameters should be float64.
    """
    params = list(params)
    for p in params:
        p.grad = None
    f().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_grad(f, p, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
