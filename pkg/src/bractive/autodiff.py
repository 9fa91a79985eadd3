"""Dense float64 tensors with reverse-mode automatic differentiation.

This is a deliberately small tape-based kernel: enough elementwise,
linear-algebra and shape operations to express the encoders, the gating
module, the retrieval module and the contrastive objectives, each with an
analytic backward rule that can be validated against central finite
differences via :func:`grad_check`.

Every operation checks its result for NaN/Inf and raises instead of
propagating garbage. All math runs in 64-bit; storage formats may narrow
to 32-bit but never this kernel.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ShapeError",
    "tensor",
    "concat",
    "stack",
    "matmul",
    "softmax",
    "logsumexp",
    "sigmoid",
    "tanh",
    "gelu",
    "relu",
    "l2_normalize",
    "cosine_sim",
    "layer_norm",
    "topk",
    "topk_rows",
    "upsample2d",
    "grad_check",
]

# Module-level switch; tests may flip it off to probe the guard itself.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _guard(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A row-major float64 array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _guard(arr, _op)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        # Drop the tape for subgraphs that cannot receive gradients.
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection ----------------------------------------------------

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
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Backpropagate from this tensor through the recorded tape."""
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
        topo = self._toposort()
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    acc = pending.get(id(parent))
                    pending[id(parent)] = pg if acc is None else acc + pg
            elif node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g

    def _toposort(self) -> list["Tensor"]:
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out_data = self.data + other.data

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor(out_data, _parents=(self, other), _backward=backward, _op="add")

    def __mul__(self, other):
        other = _as_tensor(other)
        out_data = self.data * other.data

        def backward(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, _parents=(self, other), _backward=backward, _op="mul")

    def __truediv__(self, other):
        other = _as_tensor(other)
        out_data = self.data / other.data

        def backward(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor(out_data, _parents=(self, other), _backward=backward, _op="div")

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent

        def backward(g):
            return (g * exponent * self.data ** (exponent - 1),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="pow")

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __radd__(self, other):
        return self + other

    def __rmul__(self, other):
        return self * other

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old_shape),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = np.argsort(axes)
        out_data = self.data.transpose(axes)

        def backward(g):
            return (g.transpose(inverse),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="transpose")

    def swapaxes(self, a, b):
        out_data = self.data.swapaxes(a, b)

        def backward(g):
            return (g.swapaxes(a, b),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="swapaxes")

    def broadcast_to(self, shape):
        out_data = np.broadcast_to(self.data, shape).copy()
        orig = self.shape

        def backward(g):
            return (_unbroadcast(g, orig),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="broadcast_to")

    def __getitem__(self, index):
        out_data = self.data[index]
        src_shape = self.shape
        advanced = _has_array_index(index)

        def backward(g):
            full = np.zeros(src_shape, dtype=np.float64)
            if advanced:
                np.add.at(full, index, g)
            else:
                full[index] += g
            return (full,)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="getitem")

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        src_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # -- elementwise -----------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def backward(g):
            return (g * out_data,)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="exp")

    def log(self):
        out_data = np.log(self.data)

        def backward(g):
            return (g / self.data,)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="log")

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def backward(g):
            return (g * 0.5 / out_data,)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="sqrt")

    def maximum(self, floor: float):
        """Elementwise max with a scalar floor (subgradient zero at and below it)."""
        out_data = np.maximum(self.data, floor)
        mask = (self.data > floor).astype(np.float64)

        def backward(g):
            return (g * mask,)

        return Tensor(out_data, _parents=(self,), _backward=backward, _op="maximum")


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _has_array_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


# ---------------------------------------------------------------------------
# linear algebra and activations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading batch dimensions."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return Tensor(out_data, _parents=(a, b), _backward=backward, _op="matmul")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max-subtracted)."""
    t = _as_tensor(t)
    if t.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_data,)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="softmax")


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    t = _as_tensor(t)
    m = t.data.max(axis=axis, keepdims=True)
    e = np.exp(t.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = m + np.log(s)
    soft = e / s
    if not keepdims:
        out_data = out_data.squeeze(axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="logsumexp")


def sigmoid(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    x = t.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        return (g * out_data * (1.0 - out_data),)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="sigmoid")


def tanh(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.tanh(t.data)

    def backward(g):
        return (g * (1.0 - out_data ** 2),)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(t: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    t = _as_tensor(t)
    x = t.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def backward(g):
        sech2 = 1.0 - th ** 2
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * d,)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="gelu")


def relu(t: Tensor) -> Tensor:
    t = _as_tensor(t)
    out_data = np.maximum(t.data, 0.0)
    mask = (t.data > 0).astype(np.float64)

    def backward(g):
        return (g * mask,)

    return Tensor(out_data, _parents=(t,), _backward=backward, _op="relu")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward, _op="concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward, _op="stack")


# ---------------------------------------------------------------------------
# normalization and similarity
# ---------------------------------------------------------------------------

EPS = 1e-12


def l2_normalize(t: Tensor, axis: int = -1, eps: float = EPS) -> Tensor:
    """Divide each slice along `axis` by max(its L2 norm, eps)."""
    t = _as_tensor(t)
    norm = (t * t).sum(axis=axis, keepdims=True).sqrt()
    return t / norm.maximum(eps)


def cosine_sim(a: Tensor, b: Tensor, eps: float = EPS) -> Tensor:
    """Cosine similarity along the last axis; scalar for plain vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"cosine_sim length mismatch: {a.shape} vs {b.shape}")
    return (l2_normalize(a, eps=eps) * l2_normalize(b, eps=eps)).sum(axis=-1)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = t.mean(axis=-1, keepdims=True)
    centered = t - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


# ---------------------------------------------------------------------------
# selection and resampling
# ---------------------------------------------------------------------------

def topk(v: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """k largest entries of a vector, descending, ties broken by lower index.

    Values are gathered differentiably; indices are a plain integer array.
    """
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"topk expects a vector, got shape {v.shape}")
    n = v.shape[0]
    if not 1 <= k <= n:
        raise ShapeError(f"topk k={k} out of range for length {n}")
    order = np.argsort(-v.data, kind="stable")[:k]
    return v[order], order


def topk_rows(t: Tensor, k: int) -> tuple[Tensor, np.ndarray]:
    """Row-wise topk for a [B, N] tensor; returns values [B, k], indices [B, k]."""
    t = _as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"topk_rows expects a matrix, got shape {t.shape}")
    n = t.shape[1]
    if not 1 <= k <= n:
        raise ShapeError(f"topk k={k} out of range for row length {n}")
    order = np.argsort(-t.data, axis=1, kind="stable")[:, :k]
    rows = np.arange(t.shape[0])[:, None]
    return t[rows, order], order


def _resample_axis(length: int, scale: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source coordinates for bilinear upsampling, edge-clamped."""
    src = (np.arange(length * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, length - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, length - 1)
    frac = src - lo
    return lo, hi, frac


def upsample2d(grid, scale: int, mode: str = "bilinear") -> Tensor:
    """Upsample an h×w grid by an integer factor.

    `nearest` replicates each cell into a scale×scale block; `bilinear`
    interpolates with edge clamping. Both stay inside the input's value range.
    Gradient tracking is not carried through (localization is evaluation-only).
    """
    data = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"upsample2d expects a 2-D grid, got shape {data.shape}")
    if scale < 1:
        raise ShapeError(f"upsample scale must be >= 1, got {scale}")
    if scale == 1:
        return Tensor(data.copy())
    if mode == "nearest":
        return Tensor(np.repeat(np.repeat(data, scale, axis=0), scale, axis=1))
    if mode == "bilinear":
        r_lo, r_hi, r_f = _resample_axis(data.shape[0], scale)
        c_lo, c_hi, c_f = _resample_axis(data.shape[1], scale)
        top = data[r_lo][:, c_lo] * (1 - c_f) + data[r_lo][:, c_hi] * c_f
        bot = data[r_hi][:, c_lo] * (1 - c_f) + data[r_hi][:, c_hi] * c_f
        return Tensor(top * (1 - r_f[:, None]) + bot * r_f[:, None])
    raise ValueError(f"unknown upsample mode '{mode}'")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    `f` maps a Tensor to a scalar Tensor. The relative error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(x0)).data)
        flat[i] = orig - h
        lo = float(f(Tensor(x0)).data)
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NonFiniteError("non-finite gradient encountered during grad_check")

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
