"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery for a small transformer encoder: 2-D matmul, row
softmax, layer norm, GELU, row gathering/masking, per-row Euclidean norms
and full reductions. Storage and elementwise math are numpy (float64
throughout); the tape and every backward rule live here.

Contracts enforced everywhere:
  * any operation on finite inputs must produce finite values, otherwise
    :class:`NonFiniteError` is raised at the op that broke;
  * shape errors report both offending shapes;
  * gradient accumulation happens in a fixed topological order, so a given
    graph always produces bit-identical gradients on one platform.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GradCheckError(RuntimeError):
    """Finite-difference verification could not be completed."""


# Graph recording can be suspended (teacher passes, finite differences).
_grad_enabled = True

# Debug fault: deliberately corrupts matmul's backward rule so that
# gradient checking demonstrably fails. Never enabled in normal operation.
_backward_fault = False


@contextmanager
def no_grad():
    """Suspend graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def backward_fault():
    """Corrupt one backward rule inside the block (for negative tests)."""
    global _backward_fault
    prev = _backward_fault
    _backward_fault = True
    try:
        yield
    finally:
        _backward_fault = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array with an optional gradient slot.

    Leaf tensors are created directly; interior nodes are created by the
    ops below, which record how to push gradients back to their parents.
    ``backward()`` may only be called on scalars.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backrefs", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backrefs: tuple = ()
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        Nodes are visited in reverse topological order (iterative DFS, so
        deep graphs do not hit the recursion limit); gradients accumulate
        by += into each parent, which handles fan-out correctly.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._backrefs:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, fn in node._backrefs:
                g = fn(node.grad)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)


def _node(data: np.ndarray, op: str,
          parents: Sequence[Tensor],
          grad_fns: Sequence[Callable[[np.ndarray], np.ndarray]]) -> Tensor:
    """Build an interior node, recording backrefs only while grads are on."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _grad_enabled:
        refs = tuple((p, fn) for p, fn in zip(parents, grad_fns) if p.requires_grad)
        out._backrefs = refs
        out.requires_grad = bool(refs)
    else:
        out._backrefs = ()
        out.requires_grad = False
    return out


# -- primitive operations ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product a @ b."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def grad_a(g):
        return g @ b.data.T

    def grad_b(g):
        gb = a.data.T @ g
        if _backward_fault:
            gb = gb + 0.1
        return gb

    return _node(a.data @ b.data, "matmul", (a, b), (grad_a, grad_b))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")
    return _node(a.data.T.copy(), "transpose", (a,), (lambda g: g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over rows of a 2-D a."""
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _node(a.data + b.data, "add_bias", (a, b),
                     (lambda g: g, lambda g: g.sum(axis=0)))
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")
    return _node(a.data - b.data, "sub", (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    return _node(a.data * b.data, "mul", (a, b),
                 (lambda g: g * b.data, lambda g: g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, "scale", (a,), (lambda g: g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _node(np.array(a.data.sum()), "sum", (a,),
                 (lambda g: np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size
    return _node(np.array(a.data.mean()), "mean", (a,),
                 (lambda g: np.full(a.shape, float(g) * inv),))


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal row counts along columns."""
    if not tensors:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeError(
                f"concat_cols row mismatch: {t.shape} vs {(rows, '*')}")
    widths = [t.shape[1] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def make_grad(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi]

    data = np.concatenate([t.data for t in tensors], axis=1)
    return _node(data, "concat_cols", tuple(tensors),
                 tuple(make_grad(i) for i in range(len(tensors))))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D operand, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(
            f"gather_rows index out of range for shape {a.shape}: "
            f"[{idx.min()}, {idx.max()}]")

    def grad_a(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _node(a.data[idx], "gather_rows", (a,), (grad_a,))


def mask_rows(x: Tensor, indices, embedding: Tensor) -> Tensor:
    """Replace the given rows of x with a single embedding vector.

    Gradients flow into the embedding (summed over replaced rows) and into
    the untouched rows of x only.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or embedding.data.ndim != 1:
        raise ShapeError(f"mask_rows needs (n,d) and (d,), got {x.shape}, {embedding.shape}")
    if x.shape[1] != embedding.shape[0]:
        raise ShapeError(f"mask_rows width mismatch: {x.shape} vs {embedding.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(
            f"mask_rows index out of range for shape {x.shape}: "
            f"[{idx.min()}, {idx.max()}]")
    data = x.data.copy()
    data[idx] = embedding.data

    def grad_x(g):
        gx = g.copy()
        gx[idx] = 0.0
        return gx

    def grad_emb(g):
        return g[idx].sum(axis=0)

    return _node(data, "mask_rows", (x, embedding), (grad_x, grad_emb))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's maximum.

    Backward uses dX = Y * (dY - rowsum(dY * Y)), the standard Jacobian
    contraction for softmax applied independently per row.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D operand, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_a(g):
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _node(y, "softmax_rows", (a,), (grad_a,))


def layernorm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine.

    Variance is the biased (1/d) estimator with ``eps`` added before the
    square root. Backward is the closed form

        dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))

    with the means taken per row, which folds the mean/variance chain rules
    into one pass.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"layernorm needs a 2-D operand, got {a.shape}")
    d = a.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    mu = a.data.mean(axis=1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def grad_a(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)

    def grad_gamma(g):
        return (g * xhat).sum(axis=0)

    def grad_beta(g):
        return g.sum(axis=0)

    return _node(xhat * gamma.data + beta.data, "layernorm",
                 (a, gamma, beta), (grad_a, grad_gamma, grad_beta))


_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU via the frozen tanh approximation
    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3))).
    """
    x = a.data
    u = _GELU_C0 * (x + _GELU_C1 * x ** 3)
    t = np.tanh(u)

    def grad_a(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)

    return _node(0.5 * x * (1.0 + t), "gelu", (a,), (grad_a,))


def l2_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor.

    The subgradient at an exactly-zero row is defined as the zero vector,
    so comparing identical features contributes nothing to the gradient
    instead of dividing by zero.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"l2_rows needs a 2-D operand, got {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1))

    def grad_a(g):
        safe = np.where(norms > 0.0, norms, 1.0)
        out = (g / safe)[:, None] * a.data
        out[norms == 0.0] = 0.0
        return out

    return _node(norms, "l2_rows", (a,), (grad_a,))


# -- verification ------------------------------------------------------------


def grad_check(f: Callable, point, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar function against central
    finite differences.

    ``point`` is one Tensor or a sequence of Tensors with requires_grad
    set; ``f(point)`` must rebuild the scalar output from their current
    ``data`` (coordinates are perturbed in place for the difference
    quotients). Returns max over coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    tensors = [point] if isinstance(point, Tensor) else list(point)
    if not tensors:
        raise GradCheckError("grad_check needs at least one tensor to perturb")
    for t in tensors:
        t.grad = None
    out = f(point)
    if out.data.size != 1:
        raise GradCheckError(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    max_rel = 0.0
    with no_grad():
        for ti, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            ana = analytic[ti].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + epsilon
                    fp = float(f(point).data)
                    flat[i] = orig - epsilon
                    fm = float(f(point).data)
                except NonFiniteError as exc:
                    raise GradCheckError(
                        f"non-finite intermediate at tensor {ti}, coordinate {i}: {exc}"
                    ) from exc
                finally:
                    flat[i] = orig
                numeric = (fp - fm) / (2.0 * epsilon)
                rel = abs(ana[i] - numeric) / max(1.0, abs(ana[i]))
                if rel > max_rel:
                    max_rel = rel
    return max_rel
