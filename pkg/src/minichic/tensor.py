"""Minimal tape-style reverse-mode autodiff over whole numpy arrays.

Only the handful of operations the codec networks need are provided:
dense and 1x1/kxk convolutions with replicate padding, the single-channel
stride-2 transpose convolution used for latent upsampling, depthwise
convolution and average pooling for the analysis transform, plus ReLU and
a few elementwise/reduction helpers. Fused ops with hand-written gradients
(context gathering, Laplace rate) are built elsewhere on :func:`custom_op`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

DTYPE = np.float32


@contextmanager
def precision(dtype):
    """Run the engine in another float type (float64 for gradient checks)."""
    global DTYPE
    old = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = old


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar or repeated backward)."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a place where finite values are required."""


class ShapeError(ValueError):
    pass


class MissingParameterError(KeyError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in tensor of shape {self.shape}")
        return self

    # operator sugar
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
        return mul(self, -1.0)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        The recorded graph is released afterwards, so a second call raises.
        """
        if self._consumed:
            raise GraphError("backward() called twice on the same graph")
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError("loss is not finite")
        self._consumed = True
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(DTYPE, copy=True) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            node._parents = ()
            node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op whose vector-Jacobian product is ``backward``.

    ``backward(g)`` receives the output gradient and returns one gradient
    (or None) per parent, in order.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    return custom_op(out, (x,), lambda g: (g * (out > 0),))


def square(x: Tensor) -> Tensor:
    return custom_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_all(x: Tensor) -> Tensor:
    return custom_op(np.asarray(x.data.sum(dtype=np.float64), dtype=DTYPE), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).astype(DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return custom_op(np.asarray(x.data.mean(dtype=np.float64), dtype=DTYPE), (x,),
                     lambda g: (np.full(x.shape, float(g) / n, dtype=DTYPE),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return custom_op(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))
    return custom_op(np.stack([x.data for x in xs], axis=axis), tuple(xs), backward)


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` window of the last two axes."""
    full = x.shape
    if full[-2] == h and full[-1] == w:
        return x

    def backward(g):
        out = np.zeros(full, dtype=DTYPE)
        out[..., :h, :w] = g
        return (out,)
    return custom_op(x.data[..., :h, :w], (x,), backward)


# padding helpers -----------------------------------------------------------

def pad_edge(a: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(a, widths, mode="edge")


def unpad_edge(gp: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    """Adjoint of :func:`pad_edge`: fold border gradients back onto the edge rows/cols."""
    h = gp.shape[-2] - top - bottom
    g = gp[..., top:top + h, :].copy()
    if top:
        g[..., 0, :] += gp[..., :top, :].sum(axis=-2)
    if bottom:
        g[..., h - 1, :] += gp[..., top + h:, :].sum(axis=-2)
    w = g.shape[-1] - left - right
    out = g[..., left:left + w].copy()
    if left:
        out[..., 0] += g[..., :left].sum(axis=-1)
    if right:
        out[..., w - 1] += g[..., left + w:].sum(axis=-1)
    return out


# dense / conv ----------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with x of shape (n, in) and w of shape (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    return custom_op(out, parents, backward)


def _pointwise(x: np.ndarray, w2: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    flat = x.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    return (w2 @ flat).reshape(w2.shape[0], n, h, wd).transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Stride-1 'same' convolution with replicate padding.

    x: (N, C, H, W); w: (O, C, k, k) with odd k.
    """
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    parents = (x, w) if b is None else (x, w, b)

    if k == 1:
        w2 = w.data[:, :, 0, 0]
        out = _pointwise(x.data, w2)
        if b is not None:
            out += b.data[None, :, None, None]

        def backward(g):
            gx = _pointwise(g, w2.T)
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            if b is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))
        return custom_op(np.ascontiguousarray(out), parents, backward)

    p = k // 2
    xp = pad_edge(x.data, p, p, p, p)
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # N, C, H, W, k, k
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + wd] += _pointwise(g, w.data[:, :, i, j].T)
        gx = unpad_edge(gxp, p, p, p, p)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return custom_op(np.ascontiguousarray(out, dtype=DTYPE), parents, backward)


def tconv_taps(k: int) -> list[list[tuple[int, int]]]:
    """Polyphase taps of the stride-2 transpose convolution.

    Returns, for output phase r in {0, 1}, the list of (kernel index, shift into
    the replicate-padded input). Output sample 2m+r reads padded input m+shift.
    """
    pad = k // 4
    off = 2 * pad + k // 2 - 1
    phases = []
    for r in range(2):
        phases.append([(kk, (r + off - kk) // 2) for kk in range(k) if (r + off - kk) % 2 == 0])
    return phases


def tconv2x(x: Tensor, w: Tensor, out_h: int, out_w: int) -> Tensor:
    """Single-channel stride-2 transpose convolution, replicate padded, cropped.

    x: (h, w) grid, w: (K, K) kernel with K in {4, 8}. The output is the
    (2h, 2w) upsampling cropped to (out_h, out_w).
    """
    h, wd = x.shape
    k = w.shape[0]
    if w.shape != (k, k) or k % 4:
        raise ShapeError(f"tconv2x: kernel shape {w.shape} unsupported")
    if not (2 * h - 1 <= out_h <= 2 * h and 2 * wd - 1 <= out_w <= 2 * wd):
        raise ShapeError(f"tconv2x: cannot crop {(2 * h, 2 * wd)} to {(out_h, out_w)}")
    pad = k // 4
    xp = pad_edge(x.data, pad, pad, pad, pad)
    taps = tconv_taps(k)
    full = np.zeros((2 * h, 2 * wd), dtype=DTYPE)
    for r1 in range(2):
        for r2 in range(2):
            acc = np.zeros((h, wd), dtype=DTYPE)
            for k1, s1 in taps[r1]:
                for k2, s2 in taps[r2]:
                    acc += w.data[k1, k2] * xp[s1:s1 + h, s2:s2 + wd]
            full[r1::2, r2::2] = acc
    out = full[:out_h, :out_w]

    def backward(g):
        gfull = np.zeros((2 * h, 2 * wd), dtype=DTYPE)
        gfull[:out_h, :out_w] = g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for r1 in range(2):
            for r2 in range(2):
                gph = gfull[r1::2, r2::2]
                for k1, s1 in taps[r1]:
                    for k2, s2 in taps[r2]:
                        sl = xp[s1:s1 + h, s2:s2 + wd]
                        gw[k1, k2] += float((gph * sl).sum(dtype=np.float64))
                        gxp[s1:s1 + h, s2:s2 + wd] += w.data[k1, k2] * gph
        return unpad_edge(gxp, pad, pad, pad, pad), gw
    return custom_op(np.ascontiguousarray(out), (x, w), backward)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Depthwise kxk convolution (replicate padded), stride 1 or 2.

    x: (N, C, H, W); w: (C, k, k). Stride 2 yields ceil(H/2) x ceil(W/2).
    """
    n, c, h, wd = x.shape
    k = w.shape[-1]
    if w.shape != (c, k, k):
        raise ShapeError(f"depthwise_conv2d: weight {w.shape} for input {x.shape}")
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    xp = np.ascontiguousarray(pad_edge(x.data, p, p, p, p))
    out = kernels.dwconv_forward(xp, w.data, stride, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=DTYPE)
        gxp, gw = kernels.dwconv_backward(xp, w.data, g, stride)
        gx = unpad_edge(gxp, p, p, p, p)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))
    return custom_op(out, parents, backward)


def avgpool2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling; odd sizes are edge-padded (ceil mode)."""
    n, c, h, wd = x.shape
    ph, pw = h % 2, wd % 2
    xp = pad_edge(x.data, 0, ph, 0, pw)
    ho, wo = xp.shape[-2] // 2, xp.shape[-1] // 2
    out = xp.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))

    def backward(g):
        gxp = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3).astype(DTYPE)
        return (unpad_edge(gxp, 0, ph, 0, pw),)
    return custom_op(out.astype(DTYPE), (x,), backward)


# parameters & layers ---------------------------------------------------------

class Parameters:
    """Ordered name -> Tensor mapping; iteration order is insertion order."""

    def __init__(self, items: Optional[Iterable[tuple[str, Tensor]]] = None):
        self._items: dict[str, Tensor] = {}
        for name, t in items or ():
            self[name] = t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._items[name]
        except KeyError:
            raise MissingParameterError(name) from None

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._items[name] = t if isinstance(t, Tensor) else Tensor(t, requires_grad=True)

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def names(self) -> list[str]:
        return list(self._items)

    def count(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def copy(self) -> "Parameters":
        return Parameters((n, Tensor(t.data.copy(), requires_grad=t.requires_grad))
                          for n, t in self._items.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._items.items()}

    def flat(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([t.data.ravel() for t in self._items.values()])


LAYER_KINDS = ("Linear", "LinearResidual", "Conv", "ConvResidual", "TConv")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_feat: int
    out_feat: int
    kernel: int = 1
    stride: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind.endswith("Residual") and self.in_feat != self.out_feat:
            raise ValueError(f"{self.kind} needs in_feat == out_feat")
        if self.kind == "TConv" and self.stride != 2:
            raise ValueError("TConv layers use stride 2")
        if self.kind.startswith("Linear") and self.kernel != 1:
            raise ValueError("linear layers have kernel 1")

    @property
    def residual(self) -> bool:
        return self.kind.endswith("Residual")

    def n_params(self) -> int:
        return self.in_feat * self.out_feat * self.kernel ** 2 + (self.out_feat if self.has_bias else 0)

    def weight_shape(self) -> tuple:
        if self.kind.startswith("Linear"):
            return (self.out_feat, self.in_feat)
        if self.kind == "TConv":
            return (self.kernel, self.kernel)
        return (self.out_feat, self.in_feat, self.kernel, self.kernel)

    def __str__(self) -> str:
        tag = {"Linear": "Lin", "LinearResidual": "LinR", "Conv": "Conv",
               "ConvResidual": "ConvR", "TConv": "TConv"}[self.kind]
        s = f"{self.in_feat}-{self.out_feat}-{tag}"
        return s if self.kind.startswith("Linear") else f"{s}-{self.kernel}"


def Lin(i: int, o: int) -> LayerSpec:
    return LayerSpec("Linear", i, o)


def LinR(i: int) -> LayerSpec:
    return LayerSpec("LinearResidual", i, i)


def Conv(i: int, o: int, k: int) -> LayerSpec:
    return LayerSpec("Conv", i, o, k)


def ConvR(i: int, k: int) -> LayerSpec:
    return LayerSpec("ConvResidual", i, i, k)


def TConv(k: int) -> LayerSpec:
    return LayerSpec("TConv", 1, 1, k, stride=2, has_bias=False)


def count_params(arch: Iterable[LayerSpec]) -> int:
    return sum(spec.n_params() for spec in arch)


def init_layer(spec: LayerSpec, prefix: str, rng: np.random.Generator, params: Parameters) -> None:
    """Uniform(-a, a), a = 1/sqrt(fan_in), for weights and biases."""
    fan_in = spec.in_feat * spec.kernel ** 2
    a = 1.0 / math.sqrt(fan_in)
    params[f"{prefix}.w"] = Tensor(rng.uniform(-a, a, spec.weight_shape()), requires_grad=True)
    if spec.has_bias:
        params[f"{prefix}.b"] = Tensor(rng.uniform(-a, a, spec.out_feat), requires_grad=True)


def forward_layer(spec: LayerSpec, params: Parameters, x: Tensor, prefix: str,
                  final: bool = False) -> Tensor:
    """Apply one layer; ReLU follows unless ``final``; residual kinds add x before it.

    Linear kinds take (n, in_feat) inputs, conv kinds (N, C, H, W). TConv is
    not routed through here (see :func:`tconv2x`), it needs a target size.
    """
    w = params[f"{prefix}.w"]
    b = params[f"{prefix}.b"] if spec.has_bias else None
    if w.shape != spec.weight_shape():
        raise ShapeError(f"{prefix}: weight {w.shape}, expected {spec.weight_shape()}")
    if spec.kind.startswith("Linear"):
        out = linear(x, w, b)
    elif spec.kind in ("Conv", "ConvResidual"):
        if x.data.ndim != 4 or x.shape[1] != spec.in_feat:
            raise ShapeError(f"{prefix}: input {x.shape} for {spec}")
        out = conv2d(x, w, b)
    else:
        raise ShapeError("TConv layers are applied with tconv2x")
    if spec.residual:
        out = add(out, x)
    return out if final else relu(out)


# Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Parameters, lr: float, betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              state: Optional[AdamState] = None, names: Optional[Iterable[str]] = None) -> AdamState:
    """One bias-corrected Adam update, in place. ``names`` restricts the update."""
    state = state if state is not None else AdamState()
    selected = list(names) if names is not None else params.names()
    for n in selected:
        if params[n].grad is None:
            raise GraphError(f"parameter {n!r} has no gradient")
    state.t += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for n in selected:
        p = params[n]
        g = p.grad
        m = state.m.get(n)
        v = state.v.get(n)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[n], state.v[n] = m, v
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = (p.data - step).astype(DTYPE)
    return state


class Adam:
    def __init__(self, params: Parameters, lr: float = 1e-2, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, names: Optional[Iterable[str]] = None) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps, self.state, names)

    def zero_grad(self) -> None:
        self.params.zero_grad()
