"""Dense float64 tensors with a creation-order reverse-mode tape.

Ops record onto the innermost active `Tape`; `Tape.backward` replays the
records in reverse creation order, which is a valid topological order, so
no graph search is needed. The tape is rebuilt per rollout.

Two kernel flavours exist for the hot ops (`dense`, `neighbor_mean`):

* the default BLAS path, fastest, deterministic for fixed shapes;
* a `stable=True` path whose results are bit-independent of row order
  (einsum matmuls, value-sorted reductions). Rollouts that must be
  bit-exactly permutation-equivariant use the stable path.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, ShapeError

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


class Tensor:
    """A dense float64 array, optionally participating in the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    # Arithmetic sugar so generic code (e.g. the RK4 update formula) works
    # on tensors and plain ndarrays alike.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, c):
        return scale(self, float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Creation-order record of taped tensors for one reverse sweep."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None,
                 write_grads: bool = True):
        """Reverse sweep from a 0-d `loss`; returns a leaf -> gradient dict.

        With `params` given, every requested tensor appears in the result
        (zeros when the loss does not depend on it). By default gradients are
        also accumulated into each leaf's `.grad` after the sweep. Adjoints
        live in a sweep-local sink (freed as the sweep passes each node), so
        independent tapes can run backward concurrently on shared read-only
        parameters when `write_grads` is off; merging results across tapes is
        then the caller's serial reduction. One backward call per tape.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward root must be scalar, got shape {loss.data.shape}")
        sink: dict[int, np.ndarray] = {id(loss): np.ones(())}
        _LOCAL.sink = sink
        leaves: list[Tensor] = []
        seen: set[int] = set()
        try:
            for node in reversed(self._nodes):
                g = sink.pop(id(node), None)
                if g is None or node._backward is None:
                    continue
                for parent in node._parents:
                    if parent._backward is None and parent.requires_grad \
                            and id(parent) not in seen:
                        seen.add(id(parent))
                        leaves.append(parent)
                node._backward(g)
        finally:
            _LOCAL.sink = None
        wanted = leaves if params is None else params
        result = {}
        for p in wanted:
            g = sink.get(id(p))
            result[p] = g if g is not None else np.zeros(p.shape)
        if write_grads:
            for p, g in result.items():
                p.grad = g if p.grad is None else p.grad + g
        return result


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


def _record(out: Tensor, parents: tuple, backward: Callable) -> Tensor:
    stack = _tape_stack()
    if stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        stack[-1]._nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    # Adjoints accumulate in the running sweep's sink, never on the tensors
    # themselves; `owned=False` means g may alias another adjoint, so copy.
    sink = _LOCAL.sink
    cur = sink.get(id(t))
    if cur is None:
        sink[id(t)] = g if owned else g.copy()
    else:
        cur += g


def ordered_sum(values: np.ndarray, axis: int) -> np.ndarray:
    """Reduce along `axis` so the result depends only on the multiset of addends.

    Sorting first (after normalizing -0.0 to +0.0) makes the floating-point
    result invariant to any permutation of the addends, which is what makes
    neighbor reductions bit-exactly equivariant under node relabeling.
    """
    return np.sort(values + 0.0, axis=axis).sum(axis=axis)


def assert_finite(x, context: str = "value") -> None:
    """Post-hoc NaN/Inf check; raises DivergenceError naming the context.

    The offending array rides along on the exception's `values` attribute so
    callers can report which rows went bad.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all():
        err = DivergenceError(f"non-finite {context}")
        err.values = arr
        raise err


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """y = W @ x for a matrix W[r, c] and vector x[c]."""
    if w.data.ndim != 2 or x.data.ndim != 1:
        raise ShapeError(f"matvec needs matrix and vector, got {w.shape} and {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec inner dims disagree: {w.shape} vs {x.shape}")
    out = Tensor(w.data @ x.data)
    wd, xd = w.data, x.data

    def backward(g):
        _accumulate(w, np.outer(g, xd), owned=True)
        _accumulate(x, wd.T @ g, owned=True)

    return _record(out, (w, x), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def backward(g):
        _accumulate(a, g @ bd.T, owned=True)
        _accumulate(b, ad.T @ g, owned=True)

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g, owned=True)

    return _record(out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)

    def backward(g):
        _accumulate(x, g * c, owned=True)

    return _record(out, (x,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast bias: x[N, k] + b[k]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes disagree: {x.shape} vs {b.shape}")
    out = Tensor(x.data + b.data)

    def backward(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=0), owned=True)

    return _record(out, (x, b), backward)


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)

    def backward(g):
        _accumulate(x, g * (1.0 - y * y), owned=True)

    return _record(out, (x,), backward)


def relu_act(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)
    out = Tensor(y)

    def backward(g):
        _accumulate(x, g * (y > 0.0), owned=True)

    return _record(out, (x,), backward)


_ACTIVATIONS = {"tanh", "relu"}


def dense(x: Tensor, w: Tensor, b: Tensor, activation: str | None = None,
          stable: bool = False) -> Tensor:
    """Fused affine layer: activation(x @ W.T + b), for x of rank 1 or 2.

    W is stored [out, in]. One fused op keeps the tape short and retains a
    single output array per layer. With `stable=True` the matmul runs
    through einsum, whose per-row bits do not depend on row position.
    """
    if activation is not None and activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[0] != b.shape[0]:
        raise ShapeError(f"dense parameter shapes disagree: W{w.shape} b{b.shape}")
    rank1 = x.data.ndim == 1
    if (x.data.ndim not in (1, 2)) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match W{w.shape}")
    xd, wd = x.data, w.data
    if rank1:
        pre = (np.einsum("oi,i->o", wd, xd) if stable else wd @ xd) + b.data
    else:
        pre = (np.einsum("ni,oi->no", xd, wd) if stable else xd @ wd.T) + b.data
    if activation == "tanh":
        y = np.tanh(pre)
    elif activation == "relu":
        y = np.maximum(pre, 0.0)
    else:
        y = pre
    out = Tensor(y)

    def backward(g):
        if activation == "tanh":
            gp = g * (1.0 - y * y)
        elif activation == "relu":
            gp = g * (y > 0.0)
        else:
            gp = g
        if rank1:
            _accumulate(x, np.einsum("oi,o->i", wd, gp) if stable else wd.T @ gp, owned=True)
            _accumulate(w, np.outer(gp, xd), owned=True)
            _accumulate(b, gp, owned=activation is not None)
        else:
            _accumulate(x, np.einsum("no,oi->ni", gp, wd) if stable else gp @ wd, owned=True)
            _accumulate(w, np.einsum("no,ni->oi", gp, xd) if stable else gp.T @ xd, owned=True)
            _accumulate(b, gp.sum(axis=0), owned=True)

    return _record(out, (x, w, b), backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors in argument order."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat parts must be vectors, got shape {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts]))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[lo:hi])

    return _record(out, tuple(parts), backward)


def vec_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    """Contiguous sub-vector x[lo:hi]; adjoint is zero outside the window."""
    if x.data.ndim != 1:
        raise ShapeError(f"vec_slice needs a vector, got shape {x.shape}")
    if not (0 <= lo <= hi <= x.shape[0]):
        raise ShapeError(f"slice bounds [{lo}, {hi}) out of range for length {x.shape[0]}")
    out = Tensor(x.data[lo:hi].copy())

    def backward(g):
        full = np.zeros(x.shape)
        full[lo:hi] = g
        _accumulate(x, full, owned=True)

    return _record(out, (x,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-2 tensors along columns (equal row counts)."""
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != rows:
            raise ShapeError("concat_cols parts must be rank-2 with equal row counts")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[:, lo:hi])

    return _record(out, tuple(parts), backward)


def col_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"col_slice needs rank 2, got shape {x.shape}")
    if not (0 <= lo <= hi <= x.shape[1]):
        raise ShapeError(f"column bounds [{lo}, {hi}) out of range for width {x.shape[1]}")
    out = Tensor(x.data[:, lo:hi].copy())

    def backward(g):
        full = np.zeros(x.shape)
        full[:, lo:hi] = g
        _accumulate(x, full, owned=True)

    return _record(out, (x,), backward)


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not parts:
        raise ShapeError("stack needs at least one part")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeError("stack parts must share a shape")
    out = Tensor(np.stack([p.data for p in parts]))

    def backward(g):
        for i, p in enumerate(parts):
            _accumulate(p, g[i])

    return _record(out, tuple(parts), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _record(out, (x,), backward)


def mean_over_set(vs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors; order-independent in the bits."""
    if not vs:
        raise ShapeError("mean_over_set needs a nonempty set")
    shape = vs[0].shape
    for v in vs:
        if v.shape != shape:
            raise ShapeError("mean_over_set members must share a shape")
    n = len(vs)
    stacked = np.stack([v.data for v in vs])
    out = Tensor(ordered_sum(stacked, axis=0) / n)

    def backward(g):
        gn = g / n
        for v in vs:
            _accumulate(v, gn)

    return _record(out, tuple(vs), backward)


def neighbor_mean(mask: np.ndarray, x: Tensor, stable: bool = False) -> Tensor:
    """Per-node mean over neighbor rows, batched in row blocks of n.

    `mask` is a constant binary [n, n] matrix with mask[k, j] = 1 when j is a
    neighbor of k. `x` is [B*n, p] laid out batch-major; output row (b, k)
    is the unweighted mean of rows (b, j) over the neighbors j of k, or
    zeros when k is isolated. The stable path sums neighbor contributions
    in value order so the result is invariant to node relabeling.
    """
    n = mask.shape[0]
    if mask.ndim != 2 or mask.shape[1] != n:
        raise ShapeError(f"mask must be square, got {mask.shape}")
    if x.data.ndim != 2 or x.shape[0] % n != 0:
        raise ShapeError(f"input rows {x.shape} not divisible into blocks of {n}")
    batch = x.shape[0] // n
    width = x.shape[1]
    deg = mask.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    m3 = x.data.reshape(batch, n, width)
    if stable:
        contrib = mask[None, :, :, None] * m3[:, None, :, :]
        out3 = ordered_sum(contrib, axis=2) * inv[None, :, None]
    else:
        out3 = np.einsum("kj,bjp->bkp", mask * inv[:, None], m3)
    out = Tensor(out3.reshape(x.shape[0], width))
    wmat = mask * inv[:, None]

    def backward(g):
        g3 = g.reshape(batch, n, width)
        dx = np.einsum("kj,bkp->bjp", wmat, g3)
        _accumulate(x, dx.reshape(x.shape[0], width), owned=True)

    return _record(out, (x,), backward)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)

    def backward(g):
        _accumulate(x, 2.0 * x.data * g, owned=True)

    return _record(out, (x,), backward)


def huber(x: Tensor, delta: float) -> Tensor:
    """Elementwise Huber: quadratic below delta, linear above."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = np.abs(x.data)
    small = a <= delta
    out = Tensor(np.where(small, 0.5 * x.data * x.data, delta * (a - 0.5 * delta)))

    def backward(g):
        _accumulate(x, np.where(small, x.data, delta * np.sign(x.data)) * g, owned=True)

    return _record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.mean())
    count = x.size

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g) / count), owned=True)

    return _record(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g)), owned=True)

    return _record(out, (x,), backward)


def finite_diff_check(f: Callable, params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative disagreement between backward() and central differences.

    `f(params)` must return a scalar Tensor and be re-evaluable (it is called
    ~2 per parameter component with perturbed values, outside any tape).
    Relative error uses denominator max(|g_ad|, |g_fd|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f(params)
    grads = tape.backward(loss, params=params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = grads[p].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params).item()
            flat[i] = orig - eps
            lo = f(params).item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
