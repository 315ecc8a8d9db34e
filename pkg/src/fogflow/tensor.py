"""Raster containers, differentiable primitives and gradient checking.

Rasters are plain float64 numpy arrays:

* image grid: ``(H, W, C)``; photometric images live in ``[0, 1]``,
  feature maps are unbounded but always finite.
* flow field: ``(H, W, 2)`` holding ``(u, v)`` pixel displacements.
* mask: ``(H, W)`` with values in ``{0, 1}`` (or ``[0, 1]`` when soft).
* depth map: ``(H, W)`` of positive metric depths.

Pixel ``(row i, col j)`` sits at continuous coordinate ``(x=j, y=i)``.

Everything trainable is expressed with :class:`Tensor`, a minimal
reverse-mode node over a fixed op vocabulary (arithmetic, reductions,
exp/log/tanh, smoothed abs-power, gather/scatter, bilinear sampling,
matmul).  :func:`grad_check` validates any scalar function built from it.
"""

from __future__ import annotations

from collections import OrderedDict
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

ABS_EPS = 1e-6


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that records how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _node(data, parents: tuple, backward) -> "Tensor":
        if any(p.requires_grad for p in parents):
            return Tensor(data, True, parents, backward)
        return Tensor(data)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._node(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data

        def back(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._node(x * y, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y

        def back(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

        return Tensor._node(out, (self, other), back)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p: float):
        x = self.data
        out = x ** p
        return Tensor._node(out, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        """``(..., n) @ (n, m)``; leading axes of the left operand are batched."""
        other = as_tensor(other)
        if other.ndim != 2:
            raise ValueError("right operand of @ must be 2-D")
        lead = self.shape[:-1]
        x = self.data.reshape(-1, self.shape[-1])
        y = other.data

        def back(g):
            g2 = g.reshape(-1, y.shape[1])
            return (g2 @ y.T).reshape(self.shape), x.T @ g2

        return Tensor._node((x @ y).reshape(*lead, y.shape[1]), (self, other), back)

    def __getitem__(self, idx):
        x = self.data
        out = x[idx]

        def back(g):
            full = np.zeros_like(x)
            full[idx] += g
            return (full,)

        return Tensor._node(out, (self,), back)

    # -- elementwise functions -----------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._node(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._node(np.log(x), (self,), lambda g: (g / x,))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._node(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._node(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self, eps: float = ABS_EPS):
        """Smoothed absolute value ``sqrt(x^2 + eps^2) - eps`` (exactly 0 at 0)."""
        x = self.data
        root = np.sqrt(x * x + eps * eps)
        return Tensor._node(root - eps, (self,), lambda g: (g * x / root,))

    # -- reductions and reshaping --------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._node(out, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._node(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._node(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def take(self, flat_index: np.ndarray):
        """Gather from the flattened tensor; gradients scatter-add back."""
        size, shape = self.data.size, self.shape
        idx = np.asarray(flat_index, dtype=np.intp)
        out = self.data.reshape(-1)[idx]

        def back(g):
            return (np.bincount(idx.reshape(-1), weights=g.reshape(-1), minlength=size).reshape(shape),)

        return Tensor._node(out, (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(out, tuple(tensors), back)


def pad2d(x: Tensor, pad: int) -> Tensor:
    """Zero-pad the two leading (spatial) axes of an ``(H, W, C)`` tensor."""
    if pad == 0:
        return x
    widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (x.ndim - 2)
    h, w = x.shape[:2]
    return Tensor._node(
        np.pad(x.data, widths), (x,), lambda g: (g[pad:pad + h, pad:pad + w],)
    )


# ---------------------------------------------------------------------------
# Sampling and warping
# ---------------------------------------------------------------------------

def sample(src, x, y) -> tuple[Tensor, np.ndarray]:
    """Bilinear sampling of ``src`` (H, W, C) at coordinates ``x``, ``y``.

    Coordinates outside ``[0, W-1] x [0, H-1]`` are clamped to the border.
    Returns the sampled values with shape ``x.shape + (C,)`` and a boolean
    out-of-bounds flag with shape ``x.shape``.  Differentiable with respect
    to ``src`` and to both coordinate tensors (zero slope where clamped).
    """
    src, x, y = as_tensor(src), as_tensor(x), as_tensor(y)
    s = src.data
    h, w, c = s.shape
    xd, yd = x.data, y.data
    oob = (xd < 0) | (xd > w - 1) | (yd < 0) | (yd > h - 1)
    xc = np.clip(xd, 0, w - 1)
    yc = np.clip(yd, 0, h - 1)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    a = (xc - x0)[..., None]
    b = (yc - y0)[..., None]
    v00, v01 = s[y0, x0], s[y0, x1]
    v10, v11 = s[y1, x0], s[y1, x1]
    w00, w01 = (1 - a) * (1 - b), a * (1 - b)
    w10, w11 = (1 - a) * b, a * b
    out = ((w00 * v00 + w01 * v01) + w10 * v10) + w11 * v11
    inside_x = ((xd >= 0) & (xd <= w - 1)).astype(np.float64)
    inside_y = ((yd >= 0) & (yd <= h - 1)).astype(np.float64)

    def back(g):
        gs = None
        if src.requires_grad:
            flat = []
            wts = []
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                base = (yy * w + xx)[..., None] * c + np.arange(c)
                flat.append(base.reshape(-1))
                wts.append((g * ww).reshape(-1))
            gs = np.bincount(
                np.concatenate(flat), weights=np.concatenate(wts), minlength=h * w * c
            ).reshape(h, w, c)
        gx = ((1 - b) * (v01 - v00) + b * (v11 - v10)) * g
        gy = ((1 - a) * (v10 - v00) + a * (v11 - v01)) * g
        return gs, gx.sum(-1) * inside_x, gy.sum(-1) * inside_y

    return Tensor._node(out, (src, x, y), back), oob


def bilinear_sample(src: np.ndarray, x: float, y: float) -> tuple[np.ndarray, bool]:
    """Sample one point; returns per-channel values and the out-of-bounds flag."""
    src = np.asarray(src, dtype=np.float64)
    if src.ndim == 2:
        src = src[..., None]
    vals, oob = sample(src, np.array(x, dtype=np.float64), np.array(y, dtype=np.float64))
    return vals.data, bool(oob)


@lru_cache(maxsize=64)
def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs.setflags(write=False)
    ys.setflags(write=False)
    return xs, ys


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Read-only ``(x, y)`` coordinate grids of shape ``(h, w)``."""
    return _grid(h, w)


def warp(src, flow) -> Tensor:
    """Backward warp: ``out(p) = src(p + flow(p))`` with border clamping."""
    out, _ = warp_with_mask(src, flow)
    return out


def warp_with_mask(src, flow) -> tuple[Tensor, np.ndarray]:
    src, flow = as_tensor(src), as_tensor(flow)
    if src.ndim == 2:
        src = src.reshape(*src.shape, 1)
    h, w = src.shape[:2]
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow extent {flow.shape} does not match source {src.shape[:2]}")
    xs, ys = pixel_grid(h, w)
    return sample(src, flow[..., 0] + xs, flow[..., 1] + ys)


def upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (half-pixel aligned)."""
    x = as_tensor(x)
    h, w = x.shape[:2]
    xs, ys = pixel_grid(h * factor, w * factor)
    return sample(x, (xs + 0.5) / factor - 0.5, (ys + 0.5) / factor - 0.5)[0]


# ---------------------------------------------------------------------------
# Finite differencing and convolution
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _laplacian_index(h: int, w: int, c: int):
    i, j = np.mgrid[0:h, 0:w]
    ch = np.arange(c)

    def flat(ii, jj):
        return ((ii * w + jj)[..., None] * c + ch).astype(np.intp)

    # linear extrapolation past the border: the second difference along an
    # axis vanishes on that axis' first and last line
    row_edge = (i == 0) | (i == h - 1)
    col_edge = (j == 0) | (j == w - 1)
    up = flat(np.where(row_edge, i, i - 1), j)
    down = flat(np.where(row_edge, i, i + 1), j)
    left = flat(i, np.where(col_edge, j, j - 1))
    right = flat(i, np.where(col_edge, j, j + 1))
    return up, down, left, right


def laplacian(src) -> Tensor:
    """5-point discrete Laplacian per channel; affine fields map to zero everywhere."""
    src = as_tensor(src)
    squeeze = src.ndim == 2
    if squeeze:
        src = src.reshape(*src.shape, 1)
    h, w, c = src.shape
    if h < 3 or w < 3:
        raise ValueError(f"laplacian needs at least 3x3, got {h}x{w}")
    up, down, left, right = _laplacian_index(h, w, c)
    out = (src.take(up) + src.take(down)) + (src.take(left) + src.take(right)) - src * 4.0
    return out.reshape(h, w) if squeeze else out


@lru_cache(maxsize=64)
def _patch_index(hp: int, wp: int, c: int, k: int, stride: int):
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    oi, oj = np.mgrid[0:ho, 0:wo]
    di, dj = np.mgrid[0:k, 0:k]
    rows = oi.reshape(-1, 1) * stride + di.reshape(1, -1)
    cols = oj.reshape(-1, 1) * stride + dj.reshape(1, -1)
    idx = ((rows * wp + cols)[..., None] * c + np.arange(c)).reshape(ho * wo, k * k * c)
    return idx.astype(np.intp), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same'-style convolution of an ``(H, W, Cin)`` tensor.

    ``weight`` has shape ``(k*k*Cin, Cout)`` in (ky, kx, cin) order.
    """
    x = as_tensor(x)
    c = x.shape[2]
    k = int(round(np.sqrt(weight.shape[0] // c)))
    if k * k * c != weight.shape[0]:
        raise ValueError("weight rows must equal k*k*Cin")
    xp = pad2d(x, k // 2)
    idx, ho, wo = _patch_index(xp.shape[0], xp.shape[1], c, k, stride)
    out = xp.take(idx) @ weight
    if bias is not None:
        out = out + bias
    return out.reshape(ho, wo, weight.shape[1])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - np.max(x.data, axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Parameters and gradient checking
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors, each with a paired gradient slot."""

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            t = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.data = v.copy()

    def copy(self, prefix: str | None = None) -> "ParamStore":
        names = [n for n in self._params if prefix is None or n.startswith(prefix)]
        return ParamStore({n: self._params[n].data for n in names})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grad(n).reshape(-1) for n in self._params])


def _scalar(loss) -> float:
    arr = as_tensor(loss).data
    if arr.size != 1:
        raise ValueError("loss_fn must return a scalar")
    value = float(arr.reshape(-1)[0])
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    return value


def grad_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``.  With
    ``max_coords`` set, each parameter tensor is checked on a seeded random
    subset of at most that many coordinates.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    params.zero_grad()
    loss = loss_fn(params)
    _scalar(loss)
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names or params.names():
        t = params[name]
        g_ad = params.grad(name).reshape(-1)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = _scalar(loss_fn(params))
            flat[i] = orig - eps
            f_minus = _scalar(loss_fn(params))
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd)))
    params.zero_grad()
    return worst
