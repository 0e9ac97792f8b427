"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every differentiable kernel used by the model and losses is a function of
Tensor arguments. While a Tape is active, each call records the op together
with a closure that maps the output gradient to input gradients; backward()
replays the records in exact reverse order. With no active tape the same
functions are plain numpy evaluation, which is what inference and the
finite-difference probes use.
"""

import numpy as np

_TAPES = []


class Tensor:
    """A float64 array plus a gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; backward() visits them in reverse.

    Gradient accumulators of every tensor touched by the tape are reset at
    the start of each backward call, so a tape can be replayed repeatedly.
    Single-threaded by design; use one tape per worker.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss):
        if loss.value.ndim != 0:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
        seen = set()
        for out, parents, _ in self.entries:
            for t in (out,) + parents:
                if id(t) not in seen:
                    seen.add(id(t))
                    t.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for out, parents, vjp in reversed(self.entries):
            if out.grad is None:
                continue
            for t, g in zip(parents, vjp(out.grad)):
                if g is None:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=np.float64)
                else:
                    t.grad += g


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents, vjp):
    if _TAPES:
        _TAPES[-1].entries.append((out, parents, vjp))
    return out


def _unbroadcast(g, shape):
    """Sum g down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value + b.value)
    ash, bsh = a.value.shape, b.value.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value - b.value)
    ash, bsh = a.value.shape, b.value.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, ash), _unbroadcast(-g, bsh)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value * b.value)
    av, bv = a.value, b.value
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value / b.value)
    av, bv = a.value, b.value
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a):
    a = _wrap(a)
    out = Tensor(-a.value)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product, batched over leading dims (both operands ndim >= 2)."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(
            f"matmul needs ndim >= 2 operands, got {a.value.shape} and {b.value.shape}"
        )
    out = Tensor(a.value @ b.value)
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        return ga, gb

    return _record(out, (a, b), vjp)


def matvec(m, v):
    """2-D matrix times 1-D vector."""
    m, v = _wrap(m), _wrap(v)
    if m.value.ndim != 2 or v.value.ndim != 1 or m.value.shape[1] != v.value.shape[0]:
        raise ValueError(f"matvec shape mismatch: matrix {m.value.shape}, vector {v.value.shape}")
    out = Tensor(m.value @ v.value)
    mv, vv = m.value, v.value
    return _record(out, (m, v), lambda g: (np.outer(g, vv), mv.T @ g))


def tanh(a):
    a = _wrap(a)
    out = Tensor(np.tanh(a.value))
    ov = out.value
    return _record(out, (a,), lambda g: (g * (1.0 - ov * ov),))


def exp(a):
    a = _wrap(a)
    out = Tensor(np.exp(a.value))
    ov = out.value
    return _record(out, (a,), lambda g: (g * ov,))


def log(a):
    a = _wrap(a)
    out = Tensor(np.log(a.value))
    av = a.value
    return _record(out, (a,), lambda g: (g / av,))


def sqrt(a):
    a = _wrap(a)
    out = Tensor(np.sqrt(a.value))
    ov = out.value
    return _record(out, (a,), lambda g: (g / (2.0 * ov),))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims))
    ash = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ash),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ash),)

    return _record(out, (a,), vjp)


def reshape(a, shape):
    a = _wrap(a)
    out = Tensor(a.value.reshape(shape))
    ash = a.value.shape
    return _record(out, (a,), lambda g: (g.reshape(ash),))


def swapaxes(a, ax1, ax2):
    a = _wrap(a)
    out = Tensor(a.value.swapaxes(ax1, ax2))
    return _record(out, (a,), lambda g: (g.swapaxes(ax1, ax2),))


def concat(tensors, axis=0):
    tensors = tuple(_wrap(t) for t in tensors)
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis))
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(a, idx):
    """a[idx] for an integer index array; rows scatter-add on backward."""
    a = _wrap(a)
    idx = np.asarray(idx)
    out = Tensor(a.value[idx])
    ash = a.value.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=np.float64)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), vjp)


def take_per_row(a, idx):
    """out[b] = a[b, idx[b]]; works for a of ndim >= 2."""
    a = _wrap(a)
    idx = np.asarray(idx)
    rows = np.arange(a.value.shape[0])
    out = Tensor(a.value[rows, idx])
    ash = a.value.shape

    def vjp(g):
        ga = np.zeros(ash, dtype=np.float64)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return _record(out, (a,), vjp)


def stop_grad(a):
    """Value passes through; gradient does not."""
    a = _wrap(a)
    return Tensor(a.value.copy())


def softmax(a, axis=-1):
    """Stable softmax (max subtraction) along one axis."""
    a = _wrap(a)
    if a.value.shape[axis] == 0:
        raise ValueError(f"softmax over an empty axis: shape {a.value.shape}, axis {axis}")
    mx = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - mx)
    ov = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(ov)

    def vjp(g):
        return (ov * (g - (g * ov).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def masked_softmax(a, mask, axis=-1):
    """Softmax over positions where mask is true; fully masked rows come out all-zero."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    logits = np.where(mask, a.value, -np.inf)
    mx = logits.max(axis=axis, keepdims=True, initial=-np.inf)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(logits - mx)
    s = e.sum(axis=axis, keepdims=True)
    ov = e / np.where(s == 0.0, 1.0, s)
    out = Tensor(ov)

    def vjp(g):
        return (ov * (g - (g * ov).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), vjp)


def logsumexp(a, axis=None, keepdims=False):
    a = _wrap(a)
    return masked_logsumexp(a, np.ones(a.value.shape, dtype=bool), axis=axis, keepdims=keepdims)


def masked_logsumexp(a, mask, axis=-1, keepdims=False):
    """log Σ exp over unmasked positions; fully masked rows come out -inf with zero gradient."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if axis is None:
        axis = tuple(range(a.value.ndim))
    logits = np.where(mask, a.value, -np.inf)
    mx = logits.max(axis=axis, keepdims=True, initial=-np.inf)
    mx_safe = np.where(np.isfinite(mx), mx, 0.0)
    s = np.exp(logits - mx_safe).sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        ov_keep = mx_safe + np.log(s)
    ov_keep = np.where(np.isfinite(mx), ov_keep, -np.inf)
    out = Tensor(ov_keep if keepdims else np.squeeze(ov_keep, axis=axis))

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            diff = logits - ov_keep
        w = np.zeros_like(diff)
        fin = np.isfinite(diff)
        w[fin] = np.exp(diff[fin])
        return (gk * w,)

    return _record(out, (a,), vjp)


def softplus(a):
    """log(1 + exp(x)), overflow-safe."""
    a = _wrap(a)
    out = Tensor(np.logaddexp(0.0, a.value))
    av = a.value

    def vjp(g):
        sig = np.empty_like(av)
        pos = av >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
        ex = np.exp(av[~pos])
        sig[~pos] = ex / (1.0 + ex)
        return (g * sig,)

    return _record(out, (a,), vjp)


def logaddexp(a, b):
    """Elementwise log(exp(a) + exp(b)); tolerates -inf in either argument."""
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.logaddexp(a.value, b.value))
    av, bv, ov = a.value, b.value, out.value

    def _weight(x):
        with np.errstate(invalid="ignore"):
            diff = x - ov
        w = np.zeros(np.broadcast(x, ov).shape, dtype=np.float64)
        fin = np.isfinite(diff)
        w[fin] = np.exp(np.broadcast_to(diff, w.shape)[fin])
        return w

    def vjp(g):
        return (_unbroadcast(g * _weight(av), av.shape), _unbroadcast(g * _weight(bv), bv.shape))

    return _record(out, (a, b), vjp)


class GradientCheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite loss."""


def check_gradient(f, params, h=1e-4, max_coords=None, rng=None):
    """Compare tape gradients of f(params) against central finite differences.

    f takes the parameter list and returns a scalar Tensor; it is re-run from
    scratch at every probe. Returns the max over checked coordinates of
    |analytic - fd| / max(1, |analytic|). With max_coords set, that many
    coordinates per parameter are sampled using rng instead of sweeping all.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.value) for p in params
    ]
    if max_coords is not None and rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        an_flat = analytic[pi].reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for ci in coords:
            orig = flat[ci]
            # probes may transiently leave the op domains; that is detected below,
            # so keep numpy quiet while evaluating them
            with np.errstate(all="ignore"):
                flat[ci] = orig + h
                fp = float(f(params).value)
                flat[ci] = orig - h
                fm = float(f(params).value)
                flat[ci] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientCheckError(
                    f"non-finite loss probing parameter {pi} coordinate {ci}: "
                    f"f(+h)={fp}, f(-h)={fm}"
                )
            fd = (fp - fm) / (2.0 * h)
            err = abs(an_flat[ci] - fd) / max(1.0, abs(an_flat[ci]))
            worst = max(worst, err)
    return worst
