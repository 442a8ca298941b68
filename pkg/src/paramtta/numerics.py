"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations on tensors that require gradients
record a backward closure and their parents; ``Tensor.backward`` walks the
resulting DAG in reverse topological order and accumulates gradients into
every reachable leaf.

Broadcasting is deliberately narrow: elementwise binary ops accept operands of
identical shape, or one operand that is a scalar. Row-bias addition has its
own primitive (``bias_add``).
"""
from __future__ import annotations

import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

SERIAL_VERSION = 1


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient contains NaN or inf."""


class InvalidStateError(RuntimeError):
    """An object was used before it was ready (or after it was consumed)."""


ArrayLike = "Tensor | np.ndarray | float | int | Sequence"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # always copies
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple[Tensor, ...]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
        out._backward = None
        out._consumed = False
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ------------------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return reduce_sum(self)

    def mean(self) -> "Tensor":
        return reduce_mean(self)

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. A graph can be differentiated once; call
        ``reset_tape`` on the root to allow a second pass.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._consumed:
            raise InvalidStateError("backward() already called on this graph; reset_tape() first")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite loss value {self.data.reshape(())!r}")
        if not self.requires_grad:
            self._consumed = True
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        upstream: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = upstream.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                prev = upstream.get(id(parent))
                upstream[id(parent)] = pg if prev is None else prev + pg
        self._consumed = True

    def reset_tape(self) -> None:
        self._consumed = False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _attach(out: Tensor, parents: tuple[Tensor, ...], rule) -> Tensor:
    """Install a backward rule yielding one gradient per *trainable* parent."""
    if out.requires_grad:
        keep = [p.requires_grad for p in parents]

        def backward(g):
            grads = rule(g)
            return [pg for pg, k in zip(grads, keep) if k]

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor._node(a.data @ b.data, (a, b))
    return _attach(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    out = Tensor._node(a.data.T.copy(), (a,))
    return _attach(out, (a,), lambda g: (g.T,))


def bias_add(x, b) -> Tensor:
    """``x[n×k] + b[1×k]`` with the row vector repeated over rows."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (1, x.shape[1]):
        raise DimensionError(f"bias_add shape mismatch: {x.shape} + {b.shape}")
    out = Tensor._node(x.data + b.data, (x, b))
    return _attach(out, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def row_sum(x) -> Tensor:
    """Sum over columns: [n×k] -> [n×1]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"row_sum needs a matrix, got shape {x.shape}")
    out = Tensor._node(x.data.sum(axis=1, keepdims=True), (x,))
    return _attach(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def col_mean(x) -> Tensor:
    """Mean over rows: [n×k] -> [1×k]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"col_mean needs a matrix, got shape {x.shape}")
    n = x.shape[0]
    out = Tensor._node(x.data.mean(axis=0, keepdims=True), (x,))
    return _attach(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def select_rows(x, idx: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor._node(x.data[idx].copy(), (x,))

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _attach(out, (x,), rule)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor._node(x.data.reshape(shape).copy(), (x,))
    return _attach(out, (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    out = Tensor._node(a.data + b.data, (a, b))
    return _attach(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    out = Tensor._node(a.data - b.data, (a, b))
    return _attach(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    out = Tensor._node(a.data * b.data, (a, b))
    return _attach(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.maximum(x.data, 0.0), (x,))
    return _attach(out, (x,), lambda g: (g * (x.data > 0),))


def square(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(x.data * x.data, (x,))
    return _attach(out, (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        val = np.exp(x.data)
    out = Tensor._node(val, (x,))
    return _attach(out, (x,), lambda g: (g * val,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(x.data)
    out = Tensor._node(val, (x,))
    return _attach(out, (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    val = np.tanh(x.data)
    out = Tensor._node(val, (x,))
    return _attach(out, (x,), lambda g: (g * (1.0 - val * val),))


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore"):
        val = 1.0 / x.data
    out = Tensor._node(val, (x,))
    return _attach(out, (x,), lambda g: (-g * val * val,))


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.maximum(x.data, floor), (x,))
    return _attach(out, (x,), lambda g: (g * (x.data >= floor),))


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "square": square,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *operands) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(ELEMENTWISE)}") from None
    return fn(*operands)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.asarray(x.data.sum()), (x,))
    return _attach(out, (x,), lambda g: (np.full_like(x.data, float(g)),))


def reduce_mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    out = Tensor._node(np.asarray(x.data.mean()), (x,))
    return _attach(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))


def trace(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"trace needs a square matrix, got shape {x.shape}")
    out = Tensor._node(np.asarray(np.trace(x.data)), (x,))
    return _attach(out, (x,), lambda g: (float(g) * np.eye(x.shape[0]),))


def frobenius_norm_sq(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor._node(np.asarray(np.sum(x.data * x.data)), (x,))
    return _attach(out, (x,), lambda g: (2.0 * float(g) * x.data,))


REDUCTIONS = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "trace": trace,
    "frobenius_norm_sq": frobenius_norm_sq,
}


def reduce(op: str, x) -> Tensor:
    try:
        fn = REDUCTIONS[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}; expected one of {sorted(REDUCTIONS)}") from None
    return fn(x)


def cross_entropy(logits, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy, computed with a max-shifted log-sum-exp."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor._node(np.asarray(-logp[np.arange(n), labels].mean()), (logits,))

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (float(g) * p / n,)

    return _attach(out, (logits,), rule)


def check_finite(x: Tensor, what: str = "loss") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite {what}")
    return x


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``p -= lr * (grad + weight_decay * p)``; clears grads afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise InvalidStateError(f"parameter {p.name or p.shape} has no gradient")
    for p in params:
        p.data -= lr * (p.grad + weight_decay * p.data)
        p.grad = None


class Adam:
    """Adam with bias correction; used only for offline (source-domain) training."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad**2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def gradient_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)`` taken over the full
    gradient vector of each input.
    """
    for x in inputs:
        x.grad = None
    f().backward()
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        numeric = numerical_grad(f, x, h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
        x.grad = None
    return worst


# ---------------------------------------------------------------------------
# serialization and RNG
# ---------------------------------------------------------------------------

def tensor_to_record(x: Tensor | np.ndarray) -> dict:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return {"version": SERIAL_VERSION, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def array_from_record(rec: dict) -> np.ndarray:
    if rec.get("version") != SERIAL_VERSION:
        raise ValueError(f"unsupported tensor record version {rec.get('version')!r}")
    shape = tuple(rec["shape"])
    data = np.asarray(rec["data"], dtype=np.float64)
    if int(np.prod(shape)) != data.size:
        raise DimensionError(f"record shape {shape} does not match {data.size} values")
    return data.reshape(shape)


def tensor_from_record(rec: dict, requires_grad: bool = False) -> Tensor:
    return Tensor(array_from_record(rec), requires_grad=requires_grad)


def make_rng(seed: int, *keys: str | int) -> np.random.Generator:
    """Independent, reproducible generator for ``seed`` and a path of stream names."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=spawn))
