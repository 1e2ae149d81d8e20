"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the SST pipeline needs are provided. Every op records a
backward closure on its output when any input requires gradients; a call to
:meth:`Tensor.backward` walks the recorded graph once and then releases it.
"""

from __future__ import annotations

import contextlib
import itertools
import warnings
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

EPS_POOL = 1e-6

_dtype = np.float32
_ids = itertools.count()


class ShapeMismatch(ValueError):
    pass


class GraphConsumed(RuntimeError):
    pass


class NonScalarLoss(ValueError):
    pass


class InvalidTarget(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    """Masked pooling saw a mask whose total weight is below the epsilon floor."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are stored in.

    Used by the finite-difference oracles, which evaluate in float64.
    """
    global _dtype
    old, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_dtype)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        """A new leaf holding a copy of the values, cut from any graph."""
        return Tensor(self.data.copy(), requires_grad=requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, _as_tensor(other), "add")

    def __sub__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, _as_tensor(other), "sub")

    def __mul__(self, other: "Tensor") -> "Tensor":
        return elementwise(self, _as_tensor(other), "mul")

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every requires-grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise NonScalarLoss(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumed("backward already ran on this graph")
        order = _topological(self)
        if any(node._consumed for node in order):
            raise GraphConsumed("graph was already traversed by an earlier backward")
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in grads:
                    grads[parent.node_id] = grads[parent.node_id] + pg
                else:
                    grads[parent.node_id] = pg
            node._consumed = True
            node._backward = None
            node._parents = ()
        self._consumed = True


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_ids)
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcastable(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    return len(a) == len(b) and all(bs == as_ or bs == 1 for as_, bs in zip(a, b))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``a (+|-|*) b`` where ``b`` may have singleton axes broadcast against ``a``."""
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"cannot combine {a.shape} with {b.shape}")
    ad, bd = a.data, b.data
    if kind == "add":
        data = ad + bd
        back = lambda g: (g, _reduce_to(g, bd.shape))
    elif kind == "sub":
        data = ad - bd
        back = lambda g: (g, -_reduce_to(g, bd.shape))
    elif kind == "mul":
        data = ad * bd
        back = lambda g: (g * bd, _reduce_to(g * ad, bd.shape))
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return _make(data, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    data = xs[0].data.copy()
    for x in xs[1:]:
        data = data + x.data
    return _make(data, tuple(xs), lambda g: tuple(g for _ in xs))


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0
    return _make(np.where(gate, x.data, x.data.dtype.type(0)), (x,), lambda g: (g * gate,))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), back)


def _patches(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, oh, ow), strides=(s0, s1, s2, s1 * stride, s2 * stride), writeable=False
    )
    return view.reshape(c * k * k, oh * ow)


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of a ``[C_in, H, W]`` map with ``[C_out, C_in, k, k]`` filters.

    The output size floors ``(H + 2*pad - k) / stride + 1`` like common CNN
    libraries; a non-positive size raises :class:`ShapeMismatch`.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ShapeMismatch(f"kernel must be square and odd, got {k}x{k2}")
    if x.shape[0] != c_in:
        raise ShapeMismatch(f"input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {bias.shape} does not match {c_out} output channels")
    _, h, w = x.shape
    oh, ow = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(f"conv2d output would be {oh}x{ow}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _patches(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, oh, ow) + bias.data[:, None, None]
    padded_shape = xp.shape

    def back(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape(c_in, k, k, oh, ow)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return _make(out, (x, weight, bias), back)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row i holds the align-corners-false bilinear weights of output i over the inputs."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    rh = _interp_matrix(h, out_h, x.data.dtype)
    rw = _interp_matrix(w, out_w, x.data.dtype)
    data = np.einsum("oh,chw,pw->cop", rh, x.data, rw, optimize=True)
    return _make(np.ascontiguousarray(data), (x,),
                 lambda g: (np.einsum("oh,cop,pw->chw", rh, g, rw, optimize=True),))


def masked_global_pool(feat: Tensor, mask: Tensor) -> Tensor:
    """Mask-weighted spatial average ``[C,h,w] x [1,h,w] -> [C,1,1]``.

    Differentiable with respect to ``feat`` only. A mask summing below the
    epsilon floor yields the zero vector and an :class:`EmptyMaskWarning`.
    """
    if mask.shape != (1,) + feat.shape[1:]:
        raise ShapeMismatch(f"mask {mask.shape} does not cover features {feat.shape}")
    m = mask.data
    denom = m.sum()
    if denom < EPS_POOL:
        warnings.warn("support mask is empty at feature resolution", EmptyMaskWarning, stacklevel=2)
        data = np.zeros((feat.shape[0], 1, 1), dtype=feat.data.dtype)
        return _make(data, (feat,), lambda g: (np.zeros_like(feat.data),))
    denom = feat.data.dtype.type(max(denom, EPS_POOL))
    data = (feat.data * m).sum(axis=(1, 2), keepdims=True) / denom
    return _make(data, (feat,), lambda g: (g * m / denom,))


def tile_spatial(v: Tensor, h: int, w: int) -> Tensor:
    if v.data.ndim != 3 or v.shape[1:] != (1, 1):
        raise ShapeMismatch(f"tile_spatial expects [C,1,1], got {v.shape}")
    data = np.ascontiguousarray(np.broadcast_to(v.data, (v.shape[0], h, w)))
    return _make(data, (v,), lambda g: (g.sum(axis=(1, 2), keepdims=True),))


def log_softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Pixel-mean cross-entropy of ``[2,h,w]`` logits against a ``{0,1}`` target ``[1,h,w]``."""
    if logits.data.ndim != 3 or logits.shape[0] != 2 or target.shape != (1,) + logits.shape[1:]:
        raise ShapeMismatch(f"logits {logits.shape} vs target {target.shape}")
    t = target.data[0]
    if not np.all((t == 0) | (t == 1)):
        raise InvalidTarget("target values must be 0 or 1")
    labels = t.astype(np.intp)
    logp = log_softmax_channels(logits.data)
    n = labels.size
    rows, cols = np.indices(labels.shape)
    picked = logp[labels, rows, cols]
    loss = np.asarray(-picked.mean(), dtype=logits.data.dtype)

    def back(g):
        grad = np.exp(logp)
        grad[labels, rows, cols] -= 1
        return (grad * (g / n),)

    return _make(loss, (logits,), back)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)
