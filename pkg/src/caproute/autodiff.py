"""Dense tensor algebra with reverse-mode differentiation on an explicit tape.

Tensors wrap numpy arrays (float32 by default, float64 for checking runs).
Primitives record themselves on the active :class:`Tape` whenever one of
their inputs is tracked; ``Tape.backward`` replays the records in reverse
and accumulates gradients into every ``requires_grad`` leaf.

Every primitive validates its output for NaN/Inf and raises
:class:`NumericalError` naming itself, so silent gate saturation cannot
poison a training step.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class TapeError(RuntimeError):
    """Tape misuse: double backward, non-scalar loss, nested reuse."""


class NumericalError(ArithmeticError):
    """A primitive produced NaN/Inf values (forward or backward)."""

    def __init__(self, op: str, where: str = "forward"):
        self.op = op
        super().__init__(f"non-finite values in {where} pass of primitive '{op}'")


class Tensor:
    """Dense row-major array with optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(n <= 0 for n in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# tape


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Usage::

        with Tape() as tape:
            loss = ...          # primitives touching tracked tensors record here
        tape.backward(loss)     # fills .grad on every requires_grad leaf

    A tape accepts exactly one backward pass; re-entry raises TapeError.
    """

    def __init__(self):
        self.records = []  # (op name, inputs, output, backward fn)
        self._tracked: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, op: str, inputs, output: Tensor, backward_fn):
        self.records.append((op, inputs, output, backward_fn))
        self._tracked.add(id(output))

    def backward(self, loss: Tensor):
        """Reverse-topological gradient accumulation from a scalar loss."""
        if self._consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Tensor) or loss.ndim != 0:
            raise TapeError("backward requires a scalar (0-d) loss tensor")
        self._consumed = True
        adjoint = {id(loss): np.ones((), dtype=loss.data.dtype)}
        leaves: dict[int, Tensor] = {}
        for op, inputs, output, backward_fn in reversed(self.records):
            upstream = adjoint.pop(id(output), None)
            if upstream is None:
                continue
            grads = backward_fn(upstream)
            for t, g in zip(inputs, grads):
                if g is None:
                    continue
                if not np.isfinite(g).all():
                    raise NumericalError(op, where="backward")
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + g
                else:
                    adjoint[key] = g
                if t.requires_grad:
                    leaves[key] = t
        for key, t in leaves.items():
            g = adjoint.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _emit(op: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        raise NumericalError(op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


# float64 products go through einsum: its accumulation order matches a naive
# sequential loop, which the checking oracles rely on. float32 stays on BLAS.


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype == np.float64:
        return np.einsum("ij,jk->ik", a, b)
    return a @ b


def _mv(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    if a.dtype == np.float64:
        return np.einsum("ij,j->i", a, x)
    return a @ x


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda up: (up, up))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda up: (up, -up))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda up: (up * bd, up * ad))


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with python-float constants."""
    s = x.data.dtype.type(scale)
    return _emit("affine", s * x.data + x.data.dtype.type(shift), (x,), lambda up: (s * up,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(
        "matmul",
        _mm(ad, bd),
        (a, b),
        lambda up: (_mm(up, bd.T), _mm(ad.T, up)),
    )


def matvec(a: Tensor, x: Tensor) -> Tensor:
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: {a.shape} x {x.shape}")
    ad, xd = a.data, x.data
    return _emit(
        "matvec",
        _mv(ad, xd),
        (a, x),
        lambda up: (np.outer(up, xd), _mv(ad.T, up)),
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {x.shape}")
    return _emit("transpose", x.data.T, (x,), lambda up: (up.T,))


def vec(x: Tensor) -> Tensor:
    """Flatten a single-row or single-column matrix into a vector."""
    if x.ndim != 2 or 1 not in x.shape:
        raise ShapeError(f"vec needs a 1xn or nx1 matrix, got {x.shape}")
    shape = x.shape
    return _emit("vec", x.data.reshape(-1), (x,), lambda up: (up.reshape(shape),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval (0,1) even where rounding would saturate
    fi = np.finfo(x.dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit("sigmoid", y, (x,), lambda up: (up * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), overflow-safe."""
    xd = x.data
    y = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))
    return _emit("softplus", y, (x,), lambda up: (up * _sigmoid(xd),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, max-subtracted for stability."""
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward_fn(up):
        inner = (up * y).sum(axis=ax, keepdims=True)
        return ((up - inner) * y,)

    return _emit("softmax", y, (x,), backward_fn)


def squash_rate(x: Tensor) -> Tensor:
    """Activation rate ||v||^2 / (1 + ||v||^2).

    1-d input: scalar rate of the whole vector. 2-d input: one rate per
    column, treating each column as a capsule vector.
    """
    xd = x.data
    hi = 1.0 - np.finfo(xd.dtype).epsneg  # keep the half-open interval [0,1)
    if x.ndim == 1:
        q = (xd * xd).sum()
        y = np.asarray(min(q / (1.0 + q), hi))

        def backward_vec(up):
            return (up * 2.0 * xd / (1.0 + q) ** 2,)

        return _emit("squash_rate", y, (x,), backward_vec)
    if x.ndim == 2:
        q = (xd * xd).sum(axis=0)
        y = np.minimum(q / (1.0 + q), hi)

        def backward_mat(up):
            return ((up / (1.0 + q) ** 2)[None, :] * 2.0 * xd,)

        return _emit("squash_rate", y, (x,), backward_mat)
    raise ShapeError(f"squash_rate: expected vector or matrix, got {x.shape}")


def avg_pool_cols(x: Tensor) -> Tensor:
    """Mean of the columns of a d x N matrix (a length-d vector)."""
    if x.ndim != 2:
        raise ShapeError(f"avg_pool_cols needs a matrix, got {x.shape}")
    n = x.shape[1]
    return _emit(
        "avg_pool_cols",
        x.data.sum(axis=1) / n,
        (x,),
        lambda up: (np.repeat(up[:, None], n, axis=1) / n,),
    )


def broadcast_cols(v: Tensor, n: int) -> Tensor:
    """Tile a length-d vector into a d x n matrix of identical columns."""
    if v.ndim != 1:
        raise ShapeError(f"broadcast_cols needs a vector, got {v.shape}")
    if n < 1:
        raise ShapeError("broadcast_cols: n must be >= 1")
    return _emit(
        "broadcast_cols",
        np.repeat(v.data[:, None], n, axis=1),
        (v,),
        lambda up: (up.sum(axis=1),),
    )


def diag_scale_cols(x: Tensor, g: Tensor) -> Tensor:
    """Scale column j of x by g[j]; equals x @ diag(g)."""
    if x.ndim != 2 or g.ndim != 1 or x.shape[1] != g.shape[0]:
        raise ShapeError(f"diag_scale_cols: {x.shape} with {g.shape}")
    xd, gd = x.data, g.data
    return _emit(
        "diag_scale_cols",
        xd * gd[None, :],
        (x, g),
        lambda up: (up * gd[None, :], (up * xd).sum(axis=0)),
    )


def col_mean(x: Tensor) -> Tensor:
    """Per-column mean of a d x N matrix (a length-N vector)."""
    if x.ndim != 2:
        raise ShapeError(f"col_mean needs a matrix, got {x.shape}")
    d = x.shape[0]
    return _emit(
        "col_mean",
        x.data.sum(axis=0) / d,
        (x,),
        lambda up: (np.repeat(up[None, :], d, axis=0) / d,),
    )


def col_std(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-column population standard deviation, stabilized as sqrt(var + eps)."""
    if x.ndim != 2:
        raise ShapeError(f"col_std needs a matrix, got {x.shape}")
    d = x.shape[0]
    mu = x.data.sum(axis=0) / d
    centered = x.data - mu[None, :]
    sigma = np.sqrt((centered * centered).sum(axis=0) / d + x.data.dtype.type(eps))

    def backward_fn(up):
        return ((up / (d * sigma))[None, :] * centered,)

    return _emit("col_std", sigma, (x,), backward_fn)


def col_sum(x: Tensor) -> Tensor:
    """Sum of each column of a matrix (a length-N vector)."""
    if x.ndim != 2:
        raise ShapeError(f"col_sum needs a matrix, got {x.shape}")
    d = x.shape[0]
    return _emit(
        "col_sum",
        x.data.sum(axis=0),
        (x,),
        lambda up: (np.repeat(up[None, :], d, axis=0),),
    )


def sub_cols(x: Tensor, v: Tensor) -> Tensor:
    """Subtract v[j] from every entry of column j."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"sub_cols: {x.shape} with {v.shape}")
    return _emit(
        "sub_cols",
        x.data - v.data[None, :],
        (x, v),
        lambda up: (up, -up.sum(axis=0)),
    )


def div_cols(x: Tensor, v: Tensor) -> Tensor:
    """Divide every entry of column j by v[j]."""
    if x.ndim != 2 or v.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"div_cols: {x.shape} with {v.shape}")
    xd, vd = x.data, v.data
    y = xd / vd[None, :]
    return _emit(
        "div_cols",
        y,
        (x, v),
        lambda up: (up / vd[None, :], -(up * y).sum(axis=0) / vd),
    )


def pick(v: Tensor, i: int) -> Tensor:
    """Select entry i of a vector as a scalar tensor."""
    if v.ndim != 1:
        raise ShapeError(f"pick needs a vector, got {v.shape}")
    if not 0 <= i < v.shape[0]:
        raise ShapeError(f"pick: index {i} out of range for {v.shape}")

    def backward_fn(up):
        g = np.zeros_like(v.data)
        g[i] = up
        return (g,)

    return _emit("pick", v.data[i].copy().reshape(()), (v,), backward_fn)


def smul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar (0-d) tensor."""
    if s.ndim != 0:
        raise ShapeError(f"smul: scaling factor must be 0-d, got {s.shape}")
    xd, sd = x.data, s.data
    return _emit(
        "smul",
        xd * sd,
        (x, s),
        lambda up: (up * sd, np.asarray((up * xd).sum(), dtype=xd.dtype)),
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _emit(
        "mean_all",
        np.asarray(x.data.sum() / n),
        (x,),
        lambda up: (np.full(x.shape, up / n, dtype=x.data.dtype),),
    )


def sum_all(x: Tensor) -> Tensor:
    return _emit(
        "sum_all",
        np.asarray(x.data.sum()),
        (x,),
        lambda up: (np.full(x.shape, up, dtype=x.data.dtype),),
    )


def exchangeable_matvec(w: Tensor, s: Tensor) -> Tensor:
    """Apply the permutation-exchangeable component of a square matrix.

    The action of w on s is restricted to the subspace of linear maps that
    commute with every simultaneous permutation of slots: a*s + b*(sum(s)-s),
    where a is the mean of w's diagonal and b the mean of its off-diagonal
    entries. Gradients reach every entry of w.
    """
    n = s.shape[0] if s.ndim == 1 else 0
    if w.ndim != 2 or w.shape[0] != w.shape[1] or s.ndim != 1 or w.shape[0] != n:
        raise ShapeError(f"exchangeable_matvec: {w.shape} with {s.shape}")
    wd, sd = w.data, s.data
    diag_mean = np.trace(wd) / n
    off_count = n * n - n
    off_mean = (wd.sum() - np.trace(wd)) / off_count if off_count else wd.dtype.type(0.0)
    total = sd.sum()
    y = diag_mean * sd + off_mean * (total - sd)

    def backward_fn(up):
        da = float((up * sd).sum())
        db = float((up * (total - sd)).sum())
        gw = np.full((n, n), db / off_count if off_count else 0.0, dtype=wd.dtype)
        np.fill_diagonal(gw, da / n)
        gs = diag_mean * up + off_mean * (up.sum() - up)
        return (gw, gs)

    return _emit("exchangeable_matvec", y, (w, s), backward_fn)


def column_stats(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, Tensor]:
    """Per-column mean and stabilized standard deviation of a d x N matrix."""
    return col_mean(x), col_std(x, eps=eps)
