"""Dense float64 tensors with a reverse-mode tape.

Operations record themselves onto the active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape (or inside :func:`no_grad`)
they evaluate eagerly and record nothing, which is how teacher branches and
finite-difference probes run.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_NORM = 1e-12
EPS_PROB = 1e-12

_ACTIVE_TAPES: list["Tape"] = []
_GRAD_ENABLED = [True]


class Tensor:
    """A row-major float64 array with an optional gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Tape:
    """Ordered record of primitive operations, replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.values)
        for out, inputs, rule in reversed(self.records):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                g = _unbroadcast(g, inp.shape)
                inp.grad = g.copy() if inp.grad is None else inp.grad + g


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording, treating all inputs as constants."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _record(values: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tracked = _GRAD_ENABLED[-1] and _ACTIVE_TAPES and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out.requires_grad = bool(tracked)
    if tracked:
        _ACTIVE_TAPES[-1].records.append((out, tuple(inputs), rule))
    return out


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(f"{what}: non-finite input at index {tuple(int(i) for i in bad)}")


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av / bv
    return _record(out, (a, b), lambda g: (g / bv, -g * out / bv))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _record(out, (x,), lambda g: (g * out,))


def log(x, eps: float = EPS_PROB) -> Tensor:
    """Natural log with the argument clamped below at ``eps``; clamped entries get zero gradient."""
    x = as_tensor(x)
    xv = x.values
    safe = np.maximum(xv, eps)
    live = xv >= eps
    return _record(np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    live = x.values > 0
    return _record(np.where(live, x.values, 0.0), (x,), lambda g: (g * live,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


# reductions and shape


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(np.asarray(out), (x,), rule)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.values.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _record(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _record(np.swapaxes(x.values, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def take(x, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with ``np.take_along_axis`` semantics."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, _along_axis_index(idx, axis, len(shape)), g)
        return (full,)

    return _record(np.take_along_axis(x.values, idx, axis=axis), (x,), rule)


def _along_axis_index(idx: np.ndarray, axis: int, ndim: int):
    axis = axis % ndim
    grids = list(np.ogrid[tuple(slice(0, n) for n in idx.shape)])
    grids[axis] = idx
    return tuple(grids)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return ga, gb

    return _record(av @ bv, (a, b), rule)


# fused, numerically careful ops


def softmax(x, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis`` with max-subtraction."""
    if not temperature > 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    _check_finite(x.values, "softmax")
    scaled = x.values / temperature
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _record(out, (x,), rule)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.values, "log_softmax")
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)
    return _record(out, (x,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x, axis: int = -1, eps: float = EPS_NORM, what: str = "row") -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean norm.

    Raises ValueError naming the first offending vector when its norm is
    at or below ``eps``.
    """
    x = as_tensor(x)
    xv = x.values
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    small = norm <= eps
    if np.any(small):
        where = tuple(int(i) for i in np.argwhere(np.squeeze(small, axis=axis))[0])
        raise ValueError(f"l2_normalize: {what} {where} has near-zero norm ({float(norm[small][0]):.3g})")
    out = xv / norm

    def rule(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, (x,), rule)


def cross_entropy(target_index: int, probabilities) -> Tensor:
    """``-log p[target]`` with the probability clamped to ``[EPS_PROB, 1]``."""
    p = as_tensor(probabilities)
    n = p.shape[-1]
    if not 0 <= int(target_index) < n:
        raise IndexError(f"target index {target_index} out of range for {n} classes")
    picked = take(p, np.array([int(target_index)]), axis=-1)
    return -sum(log(picked))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under row-wise softmax of ``logits``."""
    logp = log_softmax(logits, axis=-1)
    idx = np.asarray(targets, dtype=np.int64)[:, None]
    return -mean(take(logp, idx, axis=-1))


# parameters


def parameters_of(params: dict[str, Tensor]) -> list[Tensor]:
    return [params[k] for k in sorted(params)]


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(
    loss_function: Callable[[], Tensor],
    parameters: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_function`` must rebuild the scalar loss from ``parameters`` on
    every call. The error per entry is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError(f"finite-difference step {step} outside [1e-7, 1e-3]")
    with no_grad():
        first = np.asarray(loss_function().values).copy()
        second = np.asarray(loss_function().values).copy()
    if not np.array_equal(first, second):
        raise ValueError("loss function is not deterministic: two identical evaluations differ")

    flags = [p.requires_grad for p in parameters]
    for p in parameters:
        p.requires_grad = True
        p.grad = None
    try:
        with Tape() as tape:
            loss = loss_function()
        tape.backward(loss)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in parameters]
    finally:
        for p, flag in zip(parameters, flags):
            p.requires_grad = flag

    worst = 0.0
    with no_grad():
        for p, ga in zip(parameters, analytic):
            flat = p.values.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = float(loss_function().values)
                flat[k] = orig - step
                down = float(loss_function().values)
                flat[k] = orig
                numeric = (up - down) / (2.0 * step)
                a = gflat[k]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
    return worst


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and L2 weight decay."""

    def __init__(self, parameters: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.parameters = list(parameters)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros(p.shape) for p in self.parameters]

    def zero_grad(self) -> None:
        zero_grads(self.parameters)

    def step(self) -> None:
        for p, v in zip(self.parameters, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.values if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.values = p.values - self.lr * v


class Adam:
    """Adam with bias correction; ``weight_decay`` is added to the gradient (L2, not decoupled)."""

    def __init__(
        self,
        parameters: Sequence[Tensor],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.parameters = list(parameters)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros(p.shape) for p in self.parameters]
        self._v = [np.zeros(p.shape) for p in self.parameters]
        self._t = 0

    def zero_grad(self) -> None:
        zero_grads(self.parameters)

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self._t, 1.0 - b2**self._t
        for p, m, v in zip(self.parameters, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.values if self.weight_decay else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.values = p.values - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
