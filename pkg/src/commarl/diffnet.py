"""Minimal reverse-mode differentiation core.

Everything the agent networks need and nothing more: dense array ops, MLP and
GRU-cell forward passes, a Wengert-list tape whose adjoints are replayed in
reverse for gradients, an RMSProp step, and a binary checkpoint format.

Values are numpy arrays. Parameters live in a :class:`ParamStore` and keep
persistent gradient buffers, so repeated ``backward`` calls accumulate
additively until ``zero_grads``/``optimizer_step`` clears them. Intermediate
nodes belong to a single :class:`Tape` and have their gradients reset on every
backward pass. Production code runs in float32; the ops are dtype-generic so
tests can run the identical computation in float64 against finite differences.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterator

import numpy as np

DEFAULT_DTYPE = np.float32

CHECKPOINT_MAGIC = b"CMRL"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class TrainingError(RuntimeError):
    """Optimization cannot proceed (e.g. non-finite gradients)."""


class Var:
    """A value tracked on the tape.

    ``is_param`` marks store-owned parameters whose ``grad`` buffer persists
    across backward calls; all other nodes get a fresh gradient per pass.
    """

    __slots__ = ("value", "grad", "needs_grad", "is_param", "name")

    def __init__(self, value, needs_grad=False, is_param=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.needs_grad = needs_grad
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or ("param" if self.is_param else "var")
        return f"Var({tag}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Ordered record of primitive ops; adjoints replay in reverse order."""

    def __init__(self):
        self._adjoints: list[Callable[[], None]] = []
        self._nodes: list[Var] = []

    def __len__(self):
        return len(self._adjoints)

    def _emit(self, value, parents, adjoint):
        out = Var(value, needs_grad=any(p.needs_grad for p in parents))
        self._nodes.append(out)
        if out.needs_grad and adjoint is not None:
            self._adjoints.append(adjoint(out))
        return out


def backward(tape: Tape, loss_grad: float = 1.0) -> None:
    """Accumulate d(scalar)/d(param) into every parameter the tape touched.

    The tape must end in a scalar node. An empty tape is a no-op. Parameter
    gradients add up across calls; intermediate gradients are reset here.
    """
    if not tape._nodes:
        return
    out = tape._nodes[-1]
    if out.value.ndim != 0:
        raise ShapeError(f"tape must end in a scalar, got shape {out.value.shape}")
    for node in tape._nodes:
        node.grad = None
    out.grad = np.asarray(loss_grad, dtype=out.value.dtype)
    for fn in reversed(tape._adjoints):
        fn()


def _accum(var: Var, g: np.ndarray) -> None:
    if not var.needs_grad:
        return
    if var.is_param:
        var.grad += g
    elif var.grad is None:
        var.grad = g
    else:
        var.grad = var.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(tape: Tape, value) -> Var:
    """Wrap an input array; no gradient flows into it."""
    v = Var(value)
    tape._nodes.append(v)
    return v


def matmul(tape: Tape, a: Var, b: Var) -> Var:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {a.value.shape} @ {b.value.shape} do not match"
        )
    val = a.value @ b.value

    def adjoint(out):
        def fn():
            g = out.grad
            if a.needs_grad:
                _accum(a, g @ b.value.T)
            if b.needs_grad:
                if a.value.ndim == 1:
                    _accum(b, np.outer(a.value, g))
                else:
                    _accum(b, a.value.T @ g)
        return fn

    return tape._emit(val, (a, b), adjoint)


def add(tape: Tape, a: Var, b: Var) -> Var:
    val = a.value + b.value

    def adjoint(out):
        def fn():
            g = out.grad
            if a.needs_grad:
                _accum(a, _unbroadcast(g, a.value.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(g, b.value.shape))
        return fn

    return tape._emit(val, (a, b), adjoint)


def sub(tape: Tape, a: Var, b: Var) -> Var:
    val = a.value - b.value

    def adjoint(out):
        def fn():
            g = out.grad
            if a.needs_grad:
                _accum(a, _unbroadcast(g, a.value.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(-g, b.value.shape))
        return fn

    return tape._emit(val, (a, b), adjoint)


def mul(tape: Tape, a: Var, b: Var) -> Var:
    val = a.value * b.value

    def adjoint(out):
        def fn():
            g = out.grad
            if a.needs_grad:
                _accum(a, _unbroadcast(g * b.value, a.value.shape))
            if b.needs_grad:
                _accum(b, _unbroadcast(g * a.value, b.value.shape))
        return fn

    return tape._emit(val, (a, b), adjoint)


def scale(tape: Tape, a: Var, c: float) -> Var:
    cc = a.value.dtype.type(c)
    val = a.value * cc

    def adjoint(out):
        def fn():
            _accum(a, out.grad * cc)
        return fn

    return tape._emit(val, (a,), adjoint)


def sigmoid(tape: Tape, a: Var) -> Var:
    val = 1.0 / (1.0 + np.exp(-a.value))
    val = val.astype(a.value.dtype, copy=False)

    def adjoint(out):
        def fn():
            _accum(a, out.grad * val * (1.0 - val))
        return fn

    return tape._emit(val, (a,), adjoint)


def tanh(tape: Tape, a: Var) -> Var:
    val = np.tanh(a.value)

    def adjoint(out):
        def fn():
            _accum(a, out.grad * (1.0 - val * val))
        return fn

    return tape._emit(val, (a,), adjoint)


def relu(tape: Tape, a: Var) -> Var:
    val = np.maximum(a.value, 0)

    def adjoint(out):
        def fn():
            _accum(a, out.grad * (a.value > 0))
        return fn

    return tape._emit(val, (a,), adjoint)


def square(tape: Tape, a: Var) -> Var:
    val = a.value * a.value

    def adjoint(out):
        def fn():
            _accum(a, out.grad * 2 * a.value)
        return fn

    return tape._emit(val, (a,), adjoint)


def sum_all(tape: Tape, a: Var) -> Var:
    val = a.value.sum()

    def adjoint(out):
        def fn():
            _accum(a, np.broadcast_to(out.grad, a.value.shape))
        return fn

    return tape._emit(val, (a,), adjoint)


def sum_axis(tape: Tape, a: Var, axis: int, keepdims: bool = False) -> Var:
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def adjoint(out):
        def fn():
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.value.shape))
        return fn

    return tape._emit(val, (a,), adjoint)


def reshape(tape: Tape, a: Var, shape: tuple) -> Var:
    val = a.value.reshape(shape)

    def adjoint(out):
        def fn():
            _accum(a, out.grad.reshape(a.value.shape))
        return fn

    return tape._emit(val, (a,), adjoint)


def slice_last(tape: Tape, a: Var, start: int, stop: int) -> Var:
    val = a.value[..., start:stop]

    def adjoint(out):
        def fn():
            g = np.zeros_like(a.value)
            g[..., start:stop] = out.grad
            _accum(a, g)
        return fn

    return tape._emit(val, (a,), adjoint)


def take_per_row(tape: Tape, a: Var, idx: np.ndarray) -> Var:
    """Pick one column per row: out[r] = a[r, idx[r]]."""
    if a.value.ndim != 2:
        raise ShapeError(f"take_per_row expects a matrix, got shape {a.value.shape}")
    rows = np.arange(a.value.shape[0])
    idx = np.asarray(idx, dtype=np.intp)
    val = a.value[rows, idx]

    def adjoint(out):
        def fn():
            g = np.zeros_like(a.value)
            np.add.at(g, (rows, idx), out.grad)
            _accum(a, g)
        return fn

    return tape._emit(val, (a,), adjoint)


def max_per_row(tape: Tape, a: Var) -> Var:
    """Row-wise max; on exact ties the subgradient goes to the lowest index."""
    if a.value.ndim != 2:
        raise ShapeError(f"max_per_row expects a matrix, got shape {a.value.shape}")
    rows = np.arange(a.value.shape[0])
    idx = np.argmax(a.value, axis=1)
    val = a.value[rows, idx]

    def adjoint(out):
        def fn():
            g = np.zeros_like(a.value)
            np.add.at(g, (rows, idx), out.grad)
            _accum(a, g)
        return fn

    return tape._emit(val, (a,), adjoint)


def top2_gap_per_row(tape: Tape, a: Var) -> Var:
    """Row-wise (largest - second largest); ties resolve to the lowest index.

    The subgradient flows +1 into the selected top entry and -1 into the
    runner-up, with the selection frozen at forward time.
    """
    if a.value.ndim != 2 or a.value.shape[1] < 2:
        raise ShapeError(f"top2_gap_per_row needs >=2 columns, got {a.value.shape}")
    rows = np.arange(a.value.shape[0])
    i1 = np.argmax(a.value, axis=1)
    masked = a.value.copy()
    masked[rows, i1] = -np.inf
    i2 = np.argmax(masked, axis=1)
    val = a.value[rows, i1] - a.value[rows, i2]

    def adjoint(out):
        def fn():
            g = np.zeros_like(a.value)
            np.add.at(g, (rows, i1), out.grad)
            np.add.at(g, (rows, i2), -out.grad)
            _accum(a, g)
        return fn

    return tape._emit(val, (a,), adjoint)


class ParamStore:
    """Named parameter tensors plus gradient buffers and optimizer state.

    One store holds every trainable tensor of the system (the shared local
    action generator, the shared message encoder, and any head weights), each
    name resolving to exactly one tensor.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Var] = {}
        self._ms: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            raise ValueError(f"parameter '{name}' already exists")
        arr = np.asarray(value, dtype=self.dtype)
        v = Var(arr, needs_grad=True, is_param=True, name=name)
        v.grad = np.zeros_like(arr)
        self._params[name] = v
        return v

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Var]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in self._params.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != v.value.shape:
                raise ShapeError(f"parameter '{k}': shape {arr.shape} != {v.value.shape}")
            v.value[...] = arr

    def copy(self) -> "ParamStore":
        """Value-only copy (fresh gradients, no optimizer state); used for target nets."""
        other = ParamStore(dtype=self.dtype)
        for k, v in self._params.items():
            other.add(k, v.value.copy())
        return other


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def add_linear(store: ParamStore, rng: np.random.Generator, prefix: str,
               n_in: int, n_out: int, index: int = 0) -> None:
    store.add(f"{prefix}.w{index}", uniform_init(rng, (n_in, n_out), n_in, store.dtype))
    store.add(f"{prefix}.b{index}", uniform_init(rng, (n_out,), n_in, store.dtype))


def add_gru(store: ParamStore, rng: np.random.Generator, prefix: str,
            n_in: int, n_hidden: int) -> None:
    """Fused-gate GRU weights: columns ordered [update | reset | candidate]."""
    store.add(f"{prefix}.w_in", uniform_init(rng, (n_in, 3 * n_hidden), n_in, store.dtype))
    store.add(f"{prefix}.w_hid", uniform_init(rng, (n_hidden, 3 * n_hidden), n_hidden, store.dtype))
    store.add(f"{prefix}.bias", uniform_init(rng, (3 * n_hidden,), n_in, store.dtype))


def mlp_forward(store: ParamStore, prefix: str, x: Var, tape: Tape) -> Var:
    """Affine stacks under ``prefix.w0/b0, w1/b1, ...`` with ReLU between layers.

    The final layer is linear. Raises :class:`ShapeError` when the input width
    does not match the first layer.
    """
    if f"{prefix}.w0" not in store:
        raise KeyError(f"no MLP parameters under prefix '{prefix}'")
    out = x
    i = 0
    while f"{prefix}.w{i}" in store:
        w = store[f"{prefix}.w{i}"]
        b = store[f"{prefix}.b{i}"]
        if out.value.shape[-1] != w.value.shape[0]:
            raise ShapeError(
                f"{prefix}.w{i}: input width {out.value.shape[-1]} != {w.value.shape[0]}"
            )
        out = add(tape, matmul(tape, out, w), b)
        if f"{prefix}.w{i + 1}" in store:
            out = relu(tape, out)
        i += 1
    return out


def gru_step(store: ParamStore, prefix: str, x: Var, h_prev: Var, tape: Tape) -> Var:
    """One GRU cell update.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    c = tanh(W_c x + b_c + r * (U_c h))
    h' = (1 - z) * h + z * c
    """
    w_in = store[f"{prefix}.w_in"]
    w_hid = store[f"{prefix}.w_hid"]
    bias = store[f"{prefix}.bias"]
    n_hidden = w_hid.value.shape[0]
    if x.value.shape[-1] != w_in.value.shape[0]:
        raise ShapeError(f"gru input width {x.value.shape[-1]} != {w_in.value.shape[0]}")
    if h_prev.value.shape[-1] != n_hidden:
        raise ShapeError(f"gru hidden width {h_prev.value.shape[-1]} != {n_hidden}")

    gi = add(tape, matmul(tape, x, w_in), bias)
    gh = matmul(tape, h_prev, w_hid)
    z = sigmoid(tape, add(tape, slice_last(tape, gi, 0, n_hidden),
                          slice_last(tape, gh, 0, n_hidden)))
    r = sigmoid(tape, add(tape, slice_last(tape, gi, n_hidden, 2 * n_hidden),
                          slice_last(tape, gh, n_hidden, 2 * n_hidden)))
    cand = tanh(tape, add(tape, slice_last(tape, gi, 2 * n_hidden, 3 * n_hidden),
                          mul(tape, r, slice_last(tape, gh, 2 * n_hidden, 3 * n_hidden))))
    return add(tape, h_prev, mul(tape, z, sub(tape, cand, h_prev)))


def mlp_forward_np(store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    """Tape-free twin of :func:`mlp_forward` for rollouts and target networks."""
    out = x
    i = 0
    while f"{prefix}.w{i}" in store:
        out = out @ store[f"{prefix}.w{i}"].value + store[f"{prefix}.b{i}"].value
        if f"{prefix}.w{i + 1}" in store:
            out = np.maximum(out, 0)
        i += 1
    return out


def gru_step_np(store: ParamStore, prefix: str, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """Tape-free twin of :func:`gru_step`; bit-identical op order."""
    n_hidden = store[f"{prefix}.w_hid"].value.shape[0]
    gi = x @ store[f"{prefix}.w_in"].value + store[f"{prefix}.bias"].value
    gh = h_prev @ store[f"{prefix}.w_hid"].value
    z = 1.0 / (1.0 + np.exp(-(gi[..., :n_hidden] + gh[..., :n_hidden])))
    z = z.astype(gi.dtype, copy=False)
    r = 1.0 / (1.0 + np.exp(-(gi[..., n_hidden:2 * n_hidden] + gh[..., n_hidden:2 * n_hidden])))
    r = r.astype(gi.dtype, copy=False)
    cand = np.tanh(gi[..., 2 * n_hidden:] + r * gh[..., 2 * n_hidden:])
    return h_prev + z * (cand - h_prev)


def clip_gradients(store: ParamStore, max_norm: float) -> float:
    """Scale every gradient so their joint l2 norm is at most max_norm.

    Returns the pre-clip norm. A nonpositive max_norm leaves the
    gradients untouched.
    """
    total = 0.0
    for _, p in store.items():
        g = p.grad.reshape(-1)
        total += float(np.dot(g, g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for _, p in store.items():
            p.grad *= factor
    return norm


def optimizer_step(store: ParamStore, learning_rate: float = 5e-4,
                   decay: float = 0.99, eps: float = 1e-5) -> None:
    """RMSProp update; clears gradients afterwards.

    v <- decay * v + (1 - decay) * g^2 ;  p <- p - lr * g / (sqrt(v) + eps)
    """
    for name, p in store.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        ms = store._ms.get(name)
        if ms is None:
            ms = np.zeros_like(p.value)
            store._ms[name] = ms
        ms *= decay
        ms += (1.0 - decay) * g * g
        p.value -= (learning_rate * g / (np.sqrt(ms) + eps)).astype(p.value.dtype, copy=False)
    store.zero_grads()


def save_checkpoint(path, tensors) -> None:
    """Write named tensors: magic, version, count, then per tensor the name,
    shape and little-endian float32 payload. Bit-exact for float32 inputs."""
    if isinstance(tensors, ParamStore):
        tensors = {k: v.value for k, v in tensors.items()}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            payload = fh.read(4 * n_items)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return tensors
