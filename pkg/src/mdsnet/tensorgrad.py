"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operators the two networks need are provided: convolution,
transposed convolution, relu/sigmoid, global average pooling, affine layers,
elementwise arithmetic and reductions.  Every op records its parents and a
closure mapping the output gradient to parent gradients; :class:`Graph`
orders the recorded ops topologically and replays them backwards.
"""
from __future__ import annotations

import contextlib
import hashlib
import io
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError, ParseError, UsageError

DTYPE = np.float64

_grad_enabled = True
_kink_log = None  # hashlib object while record_kinks() is active


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for frozen networks and finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Digest the activation pattern of every relu/clip evaluated inside the block.

    Two evaluations with equal digests ran in the same linear region of every
    piecewise-linear op, so a finite difference between them is not crossing a kink.
    """
    global _kink_log
    prev = _kink_log
    _kink_log = hashlib.sha1()
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_pattern(pattern: np.ndarray):
    if _kink_log is not None:
        _kink_log.update(np.packbits(pattern).tobytes())


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _not_scalar(t):
    raise UsageError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """Topologically ordered view of the ops that produced ``loss``."""

    loss: Tensor
    tensors: list[Tensor] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self.loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.tensors = order
        index = {id(t): i for i, t in enumerate(order)}
        self.nodes = [
            Node(t.op, tuple(index[id(p)] for p in t._parents if id(p) in index), i)
            for i, t in enumerate(order)
            if t._backward is not None
        ]

    def backward(self):
        if self.loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {self.loss.shape}")
        if not self.loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.data)}
        for t in reversed(self.tensors):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    Graph(loss).backward()


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    _log_pattern(xd < lo)
    _log_pattern(xd > hi)
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_pattern(mask)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- shape / reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(x.shape[a] for a in axes)
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def global_avg_pool(x: Tensor) -> Tensor:
    """Squeeze step: [N, C, H, W] -> [N, C] channel means."""
    if x.data.ndim != 4:
        raise UsageError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    xd_shape = x.shape
    return _result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), xd_shape).copy(),),
        "gap",
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine layer x @ W.T + b with W of shape [out, in]."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ConfigurationError(f"linear: input width {xd.shape[-1]} != weight in-features {wd.shape[1]}")

    def bw(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(xd @ wd.T + bias.data, (x, weight, bias), bw, "linear")


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [C*k*k, N*ho*wo] patch matrix (channel-major keeps the copy row-contiguous)."""
    n, c = xp.shape[:2]
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.empty((c, k, k, n, ho, wo), dtype=DTYPE)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            out[:, i, j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    return out.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add [C*k*k, N*ho*wo] back onto [N, C, Hp, Wp]."""
    n, c, hp, wp = padded_shape
    cols = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=DTYPE)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _to_cn(a: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [C, N*H*W]."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_cn(m: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    """[C, N*H*W] -> contiguous [N, C, H, W]."""
    return np.ascontiguousarray(m.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with weight [F,C,k,k]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if c != cw:
        raise ConfigurationError(f"conv2d: input has {c} channels but weight expects {cw}")
    if k != k2 or k % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd side, got {k}x{k2}")
    if stride < 1 or padding < 0 or h + 2 * padding < k or w + 2 * padding < k:
        raise ConfigurationError(f"conv2d: invalid stride={stride}/padding={padding} for input {h}x{w}, k={k}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = weight.data.reshape(f, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    xp_shape = xp.shape

    def bw(g):
        gm = _to_cn(g)
        gw = (gm @ cols.T).reshape(weight.shape)
        if stride == 1 and padding <= k - 1:
            # full correlation with the flipped kernel: one matmul instead of a k*k scatter
            q = k - 1 - padding
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q))) if q else g
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = _from_cn(wflip @ _im2col(gp, k, 1, h, w), n, h, w)
        else:
            gx = _col2im(wmat.T @ gm, xp_shape, k, stride, ho, wo)[:, :, padding : padding + h, padding : padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(_from_cn(out, n, ho, wo), parents, bw, "conv2d")


def conv2d_transpose(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` for x [N,C,H,W] and weight [C,F,k,k].

    Output side is (H-1)*stride - 2*padding + k + output_padding.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d_transpose expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cw, f, k, k2 = weight.shape
    if c != cw:
        raise ConfigurationError(f"conv2d_transpose: input has {c} channels but weight expects {cw}")
    if k != k2:
        raise ConfigurationError("conv2d_transpose: kernel must be square")
    if stride not in (1, 2):
        raise ConfigurationError(f"conv2d_transpose: stride must be 1 or 2, got {stride}")
    if not 0 <= output_padding < stride:
        raise ConfigurationError(f"conv2d_transpose: output_padding {output_padding} must be < stride")
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho <= 0 or wo <= 0 or padding < 0:
        raise ConfigurationError(f"conv2d_transpose: non-positive output size {ho}x{wo}")
    padded = (n, f, ho + 2 * padding, wo + 2 * padding)
    xm = _to_cn(x.data)
    wmat = weight.data.reshape(c, -1)
    full = _col2im(wmat.T @ xm, padded, k, stride, h, w)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gp, k, stride, h, w)
        gx = _from_cn(wmat @ cols, n, h, w)
        gw = (xm @ cols.T).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(np.ascontiguousarray(out), parents, bw, "conv2d_transpose")


# ---------------------------------------------------------------- parameters


class ParamSet:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self:
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def num_values(self) -> int:
        return sum(p.size for p in self)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) ^ set(state)
        if missing:
            raise ConfigurationError(f"checkpoint/parameter name mismatch: {sorted(missing)[:5]}")
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ConfigurationError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: ParamSet,
    lr: float,
    state: OptState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """One Adam update of every parameter in place."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"optimizer_step: no gradient for {missing[:5]}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = OptState()

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        optimizer_step(self.params, self.lr, self.state, self.betas[0], self.betas[1], self.eps)


# ---------------------------------------------------------------- gradient check


ROUNDOFF_ULPS = 10.0


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[str, int] | None = None
    message: str = ""
    n_skipped: int = 0  # coordinates whose +-eps evaluations straddle a relu/clip kink


def grad_check(
    f: Callable[[], Tensor],
    params: ParamSet,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-8,
    skip_kinks: bool = True,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar.  At most ``max_coords`` coordinates per tensor are checked (all of
    them when the tensor is smaller).  The relative error of a coordinate is
    ``|a - n| / max(|a|, |n|, floor)``, where ``floor`` is raised to cover the
    roundoff of the difference quotient, about ``ROUNDOFF_ULPS * ulp(|f|) / eps``
    divided by ``tol``, since no derivative below that level is resolvable.

    With ``skip_kinks`` a coordinate is excluded when perturbing it flips any
    relu/clip activation pattern, because the central difference then spans two
    linear pieces and no longer approximates the derivative.  Excluded
    coordinates are counted in ``n_skipped``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise UsageError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    params.zero_grad()
    with record_kinks() as sig:
        loss = f()
    base_sig = sig.digest()
    if not np.isfinite(loss.data).all():
        return GradCheckReport(math.inf, False, 0, None, f"non-finite loss {loss.data!r} at the base point")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                with record_kinks() as s_up:
                    up = f().item()
                flat[i] = orig - eps
                with record_kinks() as s_down:
                    down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                return GradCheckReport(math.inf, False, checked, (name, int(i)), f"non-finite loss when perturbing {name}[{i}]", skipped)
            if skip_kinks and not (s_up.digest() == base_sig == s_down.digest()):
                skipped += 1
                continue
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            noise = ROUNDOFF_ULPS * np.finfo(DTYPE).eps * max(abs(up), abs(down)) / eps
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor, noise / tol)
            checked += 1
            if err > worst:
                worst, worst_at = err, (name, int(i))
    params.zero_grad()
    if checked == 0:
        return GradCheckReport(math.inf, False, 0, None, "every coordinate straddles a kink", skipped)
    return GradCheckReport(worst, worst < tol, checked, worst_at, "", skipped)


# ---------------------------------------------------------------- NT1 text format


def _format_values(arr: np.ndarray) -> str:
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in rows)


def dumps_nt1(arr) -> str:
    arr = np.asarray(arr, dtype=DTYPE)
    shape = arr.shape or (1,)
    return "NT1\n" + " ".join(str(s) for s in shape) + "\n" + _format_values(arr.reshape(shape)) + "\n"


def _read_nt1(lines: list[str], pos: int, where: str) -> tuple[np.ndarray, int]:
    if pos >= len(lines) or lines[pos].strip() != "NT1":
        raise ParseError(f"{where}: expected 'NT1' at line {pos + 1}")
    try:
        shape = tuple(int(s) for s in lines[pos + 1].split())
    except (IndexError, ValueError) as exc:
        raise ParseError(f"{where}: bad shape line {pos + 2}") from exc
    if not shape or any(s < 1 for s in shape):
        raise ParseError(f"{where}: shape must be positive extents, got {shape}")
    n_rows = math.prod(shape[:-1])
    body = lines[pos + 2 : pos + 2 + n_rows]
    try:
        values = np.array([float(v) for line in body for v in line.split()], dtype=DTYPE)
    except ValueError as exc:
        raise ParseError(f"{where}: non-numeric value near line {pos + 3}") from exc
    if values.size != math.prod(shape):
        raise ParseError(f"{where}: expected {math.prod(shape)} values, found {values.size}")
    return values.reshape(shape), pos + 2 + n_rows


def loads_nt1(text: str) -> np.ndarray:
    arr, _ = _read_nt1(text.splitlines(), 0, "<nt1>")
    return arr


def save_nt1(path, arr):
    Path(path).write_text(dumps_nt1(arr))


def load_nt1(path) -> np.ndarray:
    path = Path(path)
    arr, _ = _read_nt1(path.read_text().splitlines(), 0, str(path))
    return arr


def save_checkpoint(path, params: ParamSet | dict[str, np.ndarray]):
    state = params.state() if isinstance(params, ParamSet) else params
    buf = io.StringIO()
    for name, arr in state.items():
        buf.write(name + "\n")
        buf.write(dumps_nt1(arr))
    Path(path).write_text(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    lines = path.read_text().splitlines()
    state: dict[str, np.ndarray] = {}
    pos = 0
    while pos < len(lines):
        name = lines[pos].strip()
        if not name:
            pos += 1
            continue
        arr, pos = _read_nt1(lines, pos + 1, f"{path} [{name}]")
        state[name] = arr
    return state


def check_finite(t: Tensor, what: str):
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite values in {what}")
