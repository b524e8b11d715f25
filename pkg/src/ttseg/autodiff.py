"""Minimal reverse-mode autodiff over numpy arrays.

Model math runs in float32; the finite-difference oracle can run the same
graphs in float64. Each op records a backward closure on its output node
and backward() replays the closures in reverse topological order, so
gradient accumulation order is fixed and results are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    GradCheckError,
    LabelError,
    NumericError,
    ShapeError,
    DegenerateFeatureError,
)

DTYPE = np.float32

# Batch-norm modes. "frozen" normalizes with the running statistics while
# still recording gradients (buffers are never written); "batch" normalizes
# with the current batch statistics without writing the buffers, which is
# what TENT-style adaptation needs.
BN_TRAIN = "train"
BN_EVAL = "eval"
BN_FROZEN = "frozen"
BN_BATCH = "batch"
BN_MODES = (BN_TRAIN, BN_EVAL, BN_FROZEN, BN_BATCH)


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constants of matching dtype
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _coerce(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _tracks(t: Tensor) -> bool:
    """Whether gradients must flow into this node."""
    return t.requires_grad or bool(t._parents)


def _make(data, parents, backward):
    out = Tensor(data)
    if any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g):
    if not _tracks(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(grad, shape):
    """Sum grad over axes that were broadcast to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def const(x, dtype=DTYPE):
    return Tensor(np.asarray(x, dtype=dtype))


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not conform: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.data.shape).copy())

    return _make(data, (a,), backward)


def mean_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    s = sum_(a, axis=axis, keepdims=keepdims)
    return mul(s, const(1.0 / n, dtype=a.dtype))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), backward)


def exp_(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log_(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def sqrt_(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / data)

    return _make(data, (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    """Row gather: out[i] = a[idx[i]]. Repeated indices accumulate gradient."""
    idx = np.asarray(idx)
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear shapes do not conform: x{x.data.shape} @ w{w.data.shape}")
    y = matmul(x, w)
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear bias shape {b.data.shape} does not match w{w.data.shape}")
        y = add(y, b)
    return y


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """1D batch norm over the leading axis.

    "train" uses batch statistics and blends them into the running buffers;
    "eval" and "frozen" use the running buffers untouched ("frozen" is the
    name used at adaptation time: gradients still flow to gamma/beta and the
    input); "batch" uses batch statistics without writing the buffers.
    """
    if mode not in BN_MODES:
        raise ConfigError(f"unknown batchnorm mode {mode!r}; expected one of {BN_MODES}")
    if x.data.ndim != 2:
        raise ShapeError(f"batchnorm expects a BxD input, got {x.data.shape}")
    b = x.data.shape[0]
    if b < 1:
        raise ShapeError("batchnorm needs at least one row")
    if mode == BN_TRAIN and b < 2:
        raise ContractError("batchnorm in train mode needs a batch of at least 2")

    if mode in (BN_TRAIN, BN_BATCH):
        mu = mean_(x, axis=0)
        xc = sub(x, mu)
        var = mean_(mul(xc, xc), axis=0)
        if mode == BN_TRAIN:
            # biased batch variance, matching the normalization path
            rm, rv = running_mean.data, running_var.data
            rm *= 1.0 - momentum
            rm += momentum * mu.data.astype(rm.dtype)
            rv *= 1.0 - momentum
            rv += momentum * var.data.astype(rv.dtype)
        inv = pow_scalar(add(var, const(eps, dtype=x.dtype)), -0.5)
        xn = mul(xc, inv)
    else:
        rm = const(running_mean.data, dtype=x.dtype)
        inv = const(1.0 / np.sqrt(running_var.data + eps), dtype=x.dtype)
        xn = mul(sub(x, rm), inv)
    return add(mul(xn, gamma), beta)


def knn_indices(coords, k: int, tie: str = "index"):
    """Indices of the k nearest neighbors (self included) per point.

    tie="index" breaks distance ties by lower point index; tie="lex" breaks
    them by lexicographic (x, y, z) order of the neighbor, which makes the
    result independent of input ordering.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > n:
        raise ConfigError(f"k={k} exceeds point count N={n}")
    if not np.isfinite(coords).all():
        raise NumericError("knn coords contain non-finite values")

    if tie == "lex":
        perm = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    elif tie == "index":
        perm = np.arange(n)
    else:
        raise ConfigError(f"unknown knn tie rule {tie!r}")

    cand = coords[perm]
    d2 = ((coords[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)

    if k == n:
        sel = np.broadcast_to(np.arange(n), (n, n)).copy()
    else:
        sel = np.argpartition(d2, k - 1, axis=1)[:, :k]
        # argpartition picks an arbitrary subset among boundary ties; redo
        # those rows exactly with a stable full sort
        selvals = np.take_along_axis(d2, sel, axis=1)
        kth = selvals.max(axis=1)
        bad = ((d2 < kth[:, None]).sum(axis=1) + (d2 == kth[:, None]).sum(axis=1)) > k
        if bad.any():
            sel[bad] = np.argsort(d2[bad], axis=1, kind="stable")[:, :k]
    # order the k selected by (distance, candidate rank): sorting candidate
    # positions first makes the stable value sort break ties by lower rank
    sel.sort(axis=1)
    order = np.argsort(np.take_along_axis(d2, sel, axis=1), axis=1, kind="stable")
    return perm[np.take_along_axis(sel, order, axis=1)]


def knn_aggregate(coords, feats: Tensor, k: int, tie: str = "index", neighbors=None) -> Tensor:
    """Per-point max-pool of features over the k nearest neighbors."""
    idx = knn_indices(coords, k, tie=tie) if neighbors is None else neighbors
    gathered = feats.data[idx]  # (N, k, D)
    out = gathered.max(axis=1)
    argmax = gathered.argmax(axis=1)  # first max wins on ties
    n, d = out.shape
    rows = idx[np.arange(n)[:, None], argmax]
    cols = np.broadcast_to(np.arange(d), (n, d))

    def backward(g):
        gf = np.zeros_like(feats.data)
        np.add.at(gf, (rows, cols), g)
        _accum(feats, gf)

    return _make(out, (feats,), backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed cross-entropy over rows of raw logits."""
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.data.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"label outside [0, {c}): {labels.min()}..{labels.max()}")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    logp = log_softmax(logits)
    q = np.full((n, c), smoothing / c, dtype=logits.dtype)
    q[np.arange(n), labels] += 1.0 - smoothing
    return mean_(sum_(mul(const(-q, dtype=logits.dtype), logp), axis=1))


def log_softmax(logits: Tensor) -> Tensor:
    # the max shift is detached; it does not change the gradient
    m = const(logits.data.max(axis=1, keepdims=True), dtype=logits.dtype)
    z = sub(logits, m)
    lse = add(log_(sum_(exp_(z), axis=1, keepdims=True)), m)
    return sub(logits, lse)


def cosine_distill(pred: Tensor, target, norm_floor: float = 1e-8) -> Tensor:
    """Mean negative cosine between rows of pred and constant target rows."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.data.shape != target.shape:
        raise ShapeError(f"distill shapes differ: {pred.data.shape} vs {target.shape}")
    if pred.data.shape[0] < 1:
        raise ContractError("distill loss needs at least one row")
    pn = np.linalg.norm(pred.data, axis=1)
    tn = np.linalg.norm(target, axis=1)
    if pn.min() <= norm_floor:
        raise DegenerateFeatureError(f"predicted feature row norm {pn.min():.3e} <= {norm_floor:.0e}")
    if tn.min() <= norm_floor:
        raise DegenerateFeatureError(f"target feature row norm {tn.min():.3e} <= {norm_floor:.0e}")
    norm = sqrt_(sum_(mul(pred, pred), axis=1, keepdims=True))
    unit = div(pred, norm)
    tgt = target / tn[:, None]
    return neg(mean_(sum_(mul(unit, const(tgt, dtype=pred.dtype)), axis=1)))


def softmax_entropy(logits: Tensor) -> Tensor:
    """Mean Shannon entropy of the row-wise softmax."""
    logp = log_softmax(logits)
    p = exp_(logp)
    return mean_(neg(sum_(mul(p, logp), axis=1)))


# ---------------------------------------------------------------------------
# backward + oracle


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every tracked node."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones((), dtype=loss.dtype)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f, params: dict, eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    f maps the live param dict to a scalar Tensor and must be deterministic;
    it is called twice at the base point and must reproduce bitwise. Run
    with float64 params for tight tolerances.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    base = f(params)
    again = f(params)
    if base.data.shape != () or again.data.shape != ():
        raise ContractError("grad_check requires a scalar-valued f")
    if base.data.tobytes() != again.data.tobytes():
        raise GradCheckError("f is not deterministic: two evaluations at the same point differ")
    for p in params.values():
        p.grad = None
    backward(base)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(ga[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
