"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a node that remembers its parent tensors and a closure
computing vector-Jacobian products. The closures are themselves written in
terms of tensor ops, so a gradient can be backpropagated through again
(double backward), which the Jacobian penalty relies on.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import BudgetError, DataError, NumericError

_GRAD_ENABLED = True

_FLOAT_KINDS = ("f",)


class Tape:
    """Optional registry of op-produced tensors, for tests and debugging.

    Gradient bookkeeping works without a Tape; entering one simply collects
    every recorded op output so callers can count or inspect nodes.
    """

    _active = None

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._outer = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = self._outer
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if requires_grad and arr.dtype.kind not in _FLOAT_KINDS:
            raise TypeError(f"requires_grad tensors must be float, got {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the graph."""
        return Tensor(self.data)

    def assert_finite(self, name: str = "tensor"):
        """Raise NumericError if any entry is NaN or infinite."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.sum(~np.isfinite(self.data)))
            raise NumericError(f"{name} contains {bad} non-finite entries " f"(shape {self.data.shape})")
        return self

    # -- operators ------------------------------------------------------------

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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Accumulate d(self)/d(t) into t.grad for every reachable requires_grad tensor.

        self must be scalar (size 1). Calling twice on the same tensor without
        clearing gradients raises, since silent double accumulation is almost
        always a bug.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError("backward already called on this tensor; reset gradients and rebuild the graph")
        self._done = True
        seed = Tensor(np.ones_like(self.data))
        grads = _backprop(self, seed, create_graph=False)
        for node, g in grads:
            if node.requires_grad:
                node.grad = g.data if node.grad is None else node.grad + g.data


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(data, parents, vjp, op) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._op = op
        if Tape._active is not None:
            Tape._active.nodes.append(out)
    return out


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce g back to `shape` by summing over axes numpy broadcasting added."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return reshape(g, shape)


# -- primitive ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _record(a.data + b, (a,), lambda g: (g,), "add_s")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -b)
    if not isinstance(a, Tensor) and np.isscalar(a):
        b = _as_tensor(b)
        return _record(a - b.data, (b,), lambda g: (mul(g, -1.0),), "rsub_s")
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(mul(g, -1.0), b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _as_tensor(a)
        return _record(a.data * b, (a,), lambda g: (mul(g, b),), "mul_s")
    if not isinstance(a, Tensor) and np.isscalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record(
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _record(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (reshape(g, old),), "reshape")


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    data = np.broadcast_to(a.data, shape).copy()
    return _record(data, (a,), lambda g: (_unbroadcast(g, old),), "broadcast")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    if axis is None:
        axes = tuple(range(len(in_shape)))
    elif isinstance(axis, int):
        axes = (axis % len(in_shape),)
    else:
        axes = tuple(ax % len(in_shape) for ax in axis)
    kd_shape = tuple(1 if i in axes else n for i, n in enumerate(in_shape))

    def vjp(g):
        return (broadcast_to(reshape(g, kd_shape), in_shape),)

    return _record(data, (a,), vjp, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return mul(a, a)


def power(a: Tensor, p: float) -> Tensor:
    a = _as_tensor(a)
    if p != int(p) and np.any(a.data < 0):
        raise ValueError(f"power with fractional exponent {p} needs nonnegative input")
    if p < 0 and np.any(a.data == 0):
        raise ValueError(f"power with negative exponent {p} needs nonzero input")
    data = np.power(a.data, p)

    def vjp(g):
        return (mul(mul(g, power(a, p - 1.0)), float(p)),)

    return _record(data, (a,), vjp, "power")


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative values")
    return power(a, 0.5)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _record(expit(a.data), (a,), None, "sigmoid")
    if out._op is not None and out.requires_grad:
        out._vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), composed so its derivative is itself differentiable."""
    a = _as_tensor(a)
    return mul(a, sigmoid(a))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = Tensor((a.data > 0).astype(a.data.dtype))
    return _record(np.maximum(a.data, 0), (a,), lambda g: (mul(g, mask),), "relu")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along `axis`."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    total = a.shape[axis]

    def vjp(g):
        return (pad_slice(g, axis, start, total),)

    return _record(a.data[tuple(idx)].copy(), (a,), vjp, "narrow")


def pad_slice(a: Tensor, axis: int, start: int, total: int) -> Tensor:
    """Embed `a` into zeros of size `total` along `axis` (dual of narrow)."""
    a = _as_tensor(a)
    shape = list(a.shape)
    length = shape[axis]
    shape[axis] = total
    data = np.zeros(shape, dtype=a.data.dtype)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    data[tuple(idx)] = a.data

    def vjp(g):
        return (narrow(g, axis, start, length),)

    return _record(data, (a,), vjp, "pad_slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    lengths = [t.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)

    def vjp(g):
        return tuple(narrow(g, axis, int(off), int(n)) for off, n in zip(offsets, lengths))

    return _record(data, tuple(tensors), vjp, "concat")


def embedding_lookup(table: Tensor, idx) -> Tensor:
    """Gather rows of `table` at integer positions `idx`."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("embedding_lookup expects a 1-D index array")
    n_rows = table.shape[0]
    if np.any(idx < 0) or np.any(idx >= n_rows):
        raise IndexError("embedding index out of range")

    def vjp(g):
        return (scatter_rows(g, idx, n_rows),)

    return _record(table.data[idx], (table,), vjp, "embedding")


def scatter_rows(a: Tensor, idx, n_rows: int) -> Tensor:
    """Sum rows of `a` into a zero table at positions `idx` (dual of embedding_lookup)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n_rows,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(data, idx, a.data)

    def vjp(g):
        return (embedding_lookup(g, idx),)

    return _record(data, (a,), vjp, "scatter")


# -- backprop drivers ---------------------------------------------------------


def _toposort(root: Tensor):
    """Tensors reachable from root that carry graph structure, children first."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(output: Tensor, seed: Tensor, create_graph: bool):
    """Run reverse sweep from output; yields (tensor, grad Tensor) pairs."""
    order = _toposort(output)
    grads = {id(output): seed}
    holder = {id(output): output}
    ctx = _null_ctx() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = add(grads[id(p)], pg)
                else:
                    grads[id(p)] = pg
                    holder[id(p)] = p
    return [(holder[k], g) for k, g in grads.items()]


@contextmanager
def _null_ctx():
    yield


def grad(output: Tensor, inputs, grad_output=None, create_graph: bool = False):
    """Gradients of `output` with respect to each tensor in `inputs`.

    output must be scalar unless grad_output supplies the seed cotangent.
    Inputs not reached by the graph get a zero gradient. With create_graph the
    returned tensors participate in further differentiation.
    """
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad of non-scalar output requires grad_output")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = _as_tensor(grad_output)
        if seed.shape != output.shape:
            raise ValueError(f"grad_output shape {seed.shape} != output shape {output.shape}")
    pairs = dict((id(t), g) for t, g in _backprop(output, seed, create_graph))
    out = []
    for t in inputs:
        g = pairs.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# -- Jacobian penalties --------------------------------------------------------

EXACT_JACOBIAN_LIMIT = 64


def jacobian_frobenius_sq(
    f,
    x,
    exact_limit: int = EXACT_JACOBIAN_LIMIT,
    n_probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Squared Frobenius norm of the Jacobian of f at x, as a differentiable scalar.

    f must map rows of a batch independently (no mixing across rows); the
    per-output-dimension sweep then recovers each row's Jacobian exactly. For a
    2-D x of shape (n, d) the result is the mean over rows of the per-row
    squared Frobenius norm; for 1-D x it is the plain squared norm.

    When the output dimension exceeds exact_limit, the exact sweep is refused
    (BudgetError) unless n_probes opts into the Hutchinson estimator, which is
    unbiased: E[||v^T J||^2] = ||J||_F^2 for Rademacher v.
    """
    x = _as_tensor(x)
    leaf = x.detach()
    leaf.requires_grad = True
    y = f(leaf)
    if y.ndim not in (1, 2):
        raise ValueError(f"f must return a 1-D or 2-D tensor, got shape {y.shape}")
    batched = y.ndim == 2
    d_out = y.shape[-1]

    if n_probes is None:
        if d_out > exact_limit:
            raise BudgetError(
                f"output dimension {d_out} exceeds exact budget {exact_limit}; pass n_probes to use the estimator"
            )
        seeds = []
        for j in range(d_out):
            s = np.zeros(y.shape, dtype=y.dtype)
            s[..., j] = 1.0
            seeds.append(Tensor(s))
        scale = 1.0
    else:
        if n_probes <= 0:
            raise ValueError("n_probes must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        seeds = [Tensor(rng.choice([-1.0, 1.0], size=y.shape).astype(y.dtype)) for _ in range(n_probes)]
        scale = 1.0 / n_probes

    total = None
    for s in seeds:
        (gx,) = grad(y, [leaf], grad_output=s, create_graph=True)
        contrib = tsum(square(gx))
        total = contrib if total is None else add(total, contrib)
    total = mul(total, scale)
    if batched:
        total = mul(total, 1.0 / y.shape[0])
    return total


# -- binary serialization --------------------------------------------------------

_TENSOR_MAGIC = b"DLT1"
_BUNDLE_MAGIC = b"DLB1"
_DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1"}
_CODE_FOR_KIND = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3, np.dtype("uint8"): 4}


def _write_array(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr)
    code = _CODE_FOR_KIND.get(arr.dtype)
    if code is None:
        raise DataError(f"unsupported dtype for serialization: {arr.dtype}")
    f.write(_TENSOR_MAGIC)
    f.write(struct.pack("<BB", code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.astype(_DTYPE_CODES[code]).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_array(f) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != _TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_CODES:
        raise DataError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    dt = np.dtype(_DTYPE_CODES[code])
    n_bytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    data = np.frombuffer(_read_exact(f, n_bytes), dtype=dt).reshape(shape)
    return data.astype(dt.newbyteorder("=")).copy()


def save_tensors(path, named):
    """Write a dict of name -> array/Tensor to a little-endian binary bundle."""
    items = list(named.items())
    with open(path, "wb") as f:
        f.write(_BUNDLE_MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            _write_array(f, arr)


def load_tensors(path) -> dict:
    """Read a bundle written by save_tensors. Round-trips bit-exactly."""
    out = {}
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != _BUNDLE_MAGIC:
            raise DataError(f"bad bundle magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            out[name] = _read_array(f)
        extra = f.read(1)
        if extra:
            raise DataError("trailing bytes after bundle payload")
    return out
