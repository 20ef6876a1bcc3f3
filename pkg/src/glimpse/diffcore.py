"""Small reverse-mode autodiff over float64 numpy arrays.

Operations build a graph as they execute. ``backward`` walks the graph
reachable from a scalar output in reverse topological order and accumulates
gradients into every Tensor that requires them.

The primitive set is deliberately tiny: matmul, add, mul, sigmoid, tanh,
concat, slice, sum, mean, bce_with_logits and squared_error. Everything the
agent and its losses need is composed from these.
"""
from __future__ import annotations

import struct
from collections.abc import Callable, Iterable, Mapping
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Graph",
    "ParamSet",
    "PARAM_GROUPS",
    "constant",
    "parameter",
    "matmul",
    "add",
    "mul",
    "sigmoid",
    "tanh",
    "concat",
    "slice_last",
    "sum_",
    "mean",
    "bce_with_logits",
    "squared_error",
    "detach",
    "forward",
    "backward",
    "grad_check",
    "save_params",
    "load_params",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, op="leaf", parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self.grad = np.zeros_like(self.value) if (requires_grad and op == "leaf") else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _node(value, op, parents, backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, op=op, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    """Classify how two operand shapes combine: same, a broadcast, b broadcast."""
    if a.shape == b.shape:
        return "same"
    if b.value.ndim == 0 or (b.value.ndim >= 1 and a.value.ndim == b.value.ndim + 1 and a.shape[1:] == b.shape):
        return "b"
    if a.value.ndim == 0 or (a.value.ndim >= 1 and b.value.ndim == a.value.ndim + 1 and b.shape[1:] == a.shape):
        return "a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.sum(axis=0)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def back(out):
        if a.requires_grad:
            _accumulate(a, out.grad @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ out.grad)

    return _node(a.value @ b.value, "matmul", (a, b), back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a, b, "add")

    def back(out):
        _accumulate(a, _reduce_to(out.grad, a.shape))
        _accumulate(b, _reduce_to(out.grad, b.shape))

    return _node(a.value + b.value, "add", (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_kind(a, b, "mul")

    def back(out):
        if a.requires_grad:
            _accumulate(a, _reduce_to(out.grad * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(out.grad * a.value, b.shape))

    return _node(a.value * b.value, "mul", (a, b), back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.value)

    def back(out):
        _accumulate(a, out.grad * s * (1.0 - s))

    return _node(s, "sigmoid", (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.value)

    def back(out):
        _accumulate(a, out.grad * (1.0 - t * t))

    return _node(t, "tanh", (a,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: no operands")
    ndim = parts[0].value.ndim
    ax = axis % ndim if ndim else 0
    for p in parts:
        if p.value.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[q.shape for q in parts]} along axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def back(out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                index = [slice(None)] * ndim
                index[ax] = slice(lo, hi)
                _accumulate(p, out.grad[tuple(index)])

    return _node(np.concatenate([p.value for p in parts], axis=ax), "concat", tuple(parts), back)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    a = _as_tensor(a)
    width = a.shape[-1] if a.value.ndim else 0
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {a.shape}")

    def back(out):
        g = np.zeros_like(a.value)
        g[..., start:stop] = out.grad
        _accumulate(a, g)

    return _node(a.value[..., start:stop], "slice", (a,), back)


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)

    def back(out):
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=axis), "sum", (a,), back)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]

    def back(out):
        g = out.grad if axis is None else np.expand_dims(out.grad, axis)
        _accumulate(a, np.broadcast_to(g / count, a.shape))

    return _node(a.value.mean(axis=axis), "mean", (a,), back)


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    z = _as_tensor(logits)
    t = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape} vs targets {t.shape}")
    x = z.value
    loss = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def back(out):
        _accumulate(z, out.grad * (_stable_sigmoid(x) - t))

    return _node(loss, "bce", (z,), back)


def squared_error(a, b) -> Tensor:
    """Elementwise ``(a - b) ** 2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: {a.shape} vs {b.shape}")
    diff = a.value - b.value

    def back(out):
        g = 2.0 * out.grad * diff
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(diff * diff, "sqerr", (a, b), back)


def detach(a: Tensor) -> Tensor:
    return constant(a.value.copy())


class Graph:
    """Topologically ordered nodes reachable from a set of named outputs."""

    def __init__(self, outputs: Mapping[str, Tensor]):
        self.outputs = dict(outputs)
        order: list[Tensor] = []
        seen: set[int] = set()
        for root in self.outputs.values():
            stack = [(root, False)]
            while stack:
                node, expanded = stack.pop()
                if expanded:
                    order.append(node)
                    continue
                if id(node) in seen:
                    continue
                seen.add(id(node))
                stack.append((node, True))
                for p in node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.nodes = order

    def __getitem__(self, name: str) -> Tensor:
        return self.outputs[name]

    def backward(self, seed: str) -> None:
        out = self.outputs[seed]
        if out.size != 1:
            raise ShapeError(f"backward: seed {seed!r} must be scalar, got shape {out.shape}")
        if not out.requires_grad:
            return
        # intermediate gradients are per-pass scratch; leaves keep accumulating
        for node in self.nodes:
            if node.op != "leaf":
                node.grad = None
        _accumulate(out, np.ones_like(out.value))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node)


def forward(fn: Callable[..., Mapping[str, Tensor]], inputs: Mapping[str, Tensor]) -> Graph:
    """Evaluate ``fn(**inputs)`` and return the graph over its named outputs."""
    return Graph(fn(**inputs))


def backward(out: Tensor) -> None:
    Graph({"out": out}).backward("out")


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
    probes: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``fn`` rebuilds the scalar from the current parameter values each call.
    Probed coordinates are drawn uniformly over all entries of ``params``.
    """
    if not 0.0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    params = list(params)
    if not params:
        return 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    out = fn()
    if not np.isfinite(out.value).all():
        raise FloatingPointError("grad_check: function value is not finite")
    backward(out)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    owners = rng.choice(len(params), size=probes, p=sizes / sizes.sum())
    worst = 0.0
    for k in owners:
        p = params[k]
        flat = p.value.reshape(-1)
        i = int(rng.integers(p.size))
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError("grad_check: function value is not finite")
        numeric = (up - down) / (2.0 * step)
        a = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


# Parameter groups, keyed by name prefix.
PARAM_GROUPS = {
    "obs": "observation encoder",
    "core": "recurrent core",
    "det": "detection head",
    "ind": "indicator head",
    "loc": "location head",
    "base": "baseline estimator",
}


class ParamSet:
    """Named parameter tensors; the group is the name's prefix before the first dot."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        group = name.split(".", 1)[0]
        if group not in PARAM_GROUPS:
            raise KeyError(f"parameter {name!r} has unknown group {group!r}")
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        raw = value.value if isinstance(value, Tensor) else value
        t = parameter(np.array(raw, dtype=np.float64), name=name)
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

    def group(self, group: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.split(".", 1)[0] == group]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy(self) -> ParamSet:
        return ParamSet({n: t.value.copy() for n, t in self._params.items()})

    def equals(self, other: ParamSet) -> bool:
        """Bit-exact equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            self[n].shape == other[n].shape and self[n].value.tobytes() == other[n].value.tobytes()
            for n in self
        )


_MAGIC = b"GLIMPSE-PARAMS-1"


def save_params(params: ParamSet, path: str | Path) -> None:
    """Write ``params`` as (name, shape, little-endian float64) records."""
    chunks = [_MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.value.ndim))
        chunks.append(struct.pack(f"<{t.value.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ParamSet:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    pos = len(_MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params = ParamSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        params.add(name, values)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after {count} records")
    return params
