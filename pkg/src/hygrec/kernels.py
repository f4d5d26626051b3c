"""Dense kernels: a minimal reverse-mode tape, parameters, and forwards.

Everything is double precision numpy. A ``Tape`` is a Wengert list:
tensors are appended in creation order (already topological), and
``backward`` walks it in reverse with a fixed accumulation order, so
gradients are deterministic for a fixed seed and independent of thread
count. The primitive set is exactly what the model needs; this is not a
general-purpose autodiff.

Graph-aware propagation (hypergraph two-stage averaging, symmetric
normalized line-graph smoothing) is implemented as dedicated primitives
whose adjoints exploit the symmetry of the underlying operators.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
import scipy.sparse as sp

from .errors import (
    DisconnectedLoss,
    EmptySelection,
    HeadDivisibility,
    ShapeMismatch,
    ZeroVector,
)

CHECKPOINT_MAGIC = b"HGRC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameters


class Parameter:
    """A named trainable array with its gradient and Adam moments."""

    __slots__ = ("name", "value", "grad", "trainable", "m", "v")

    def __init__(self, name, value, trainable=True):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


def _named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator derived from (seed, name); creation order never matters."""
    return np.random.default_rng((seed, zlib.crc32(name.encode("utf-8"))))


def glorot(seed: int, name: str, rows: int, cols: int) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (rows + cols))
    return _named_rng(seed, name).uniform(-a, a, size=(rows, cols))


class ParameterStore:
    """Name -> Parameter map with deterministic seeded initialization."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.params: dict[str, Parameter] = {}
        self.step_count = 0

    def get(self, name: str, shape: tuple[int, int], init: str = "glorot") -> Parameter:
        if name in self.params:
            p = self.params[name]
            if p.value.shape != tuple(shape):
                raise ShapeMismatch(
                    f"parameter {name!r} has shape {p.value.shape}, requested {shape}"
                )
            return p
        rows, cols = shape
        if init == "glorot":
            value = glorot(self.seed, name, rows, cols)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "identity":
            value = np.eye(rows, cols)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, value)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def sorted_params(self):
        return [self.params[k] for k in sorted(self.params)]

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0.0

    def save(self, path):
        """Binary checkpoint: versioned header, name-length-prefixed
        entries, little-endian doubles."""
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IqI", CHECKPOINT_VERSION, self.seed, len(self.params)))
            for name in sorted(self.params):
                p = self.params[name]
                raw = name.encode("utf-8")
                rows, cols = p.value.shape
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<BII", 1 if p.trainable else 0, rows, cols))
                fh.write(p.value.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a parameter checkpoint")
            version, seed, count = struct.unpack("<IqI", fh.read(16))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            store = cls(seed)
            for _ in range(count):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                trainable, rows, cols = struct.unpack("<BII", fh.read(9))
                data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
                p = Parameter(name, data.reshape(rows, cols).copy(), bool(trainable))
                store.params[name] = p
        return store


def adam_step(store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected Adam over trainable parameters.

    Parameters are visited in sorted-name order and gradients are zeroed
    afterwards, so two runs from the same state are bit-identical.
    """
    store.step_count += 1
    t = store.step_count
    for p in store.sorted_params():
        if not p.trainable:
            continue
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**t)
        v_hat = p.v / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grads()


# ---------------------------------------------------------------------------
# tape


class Tensor:
    __slots__ = ("value", "grad", "tape", "index", "vjp", "param")

    def __init__(self, value, tape, index, vjp=None, param=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.index = index
        self.vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, leaf={self.vjp is None})"


class Tape:
    """Ordered record of primitive operations; each output produced once."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _record(self, value, vjp=None, param=None) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), self, len(self.nodes), vjp, param)
        self.nodes.append(t)
        return t

    def leaf(self, param: Parameter) -> Tensor:
        return self._record(param.value, param=param)

    def constant(self, value) -> Tensor:
        return self._record(value)


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def backward(tape: Tape, loss: Tensor):
    """Reverse accumulation from a scalar loss; fills Parameter.grad."""
    if loss.tape is not tape or loss.index >= len(tape.nodes) or tape.nodes[loss.index] is not loss:
        raise DisconnectedLoss("loss tensor was not produced by this tape")
    if loss.value.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.index + 1]):
        if node.grad is None or node.vjp is None:
            continue
        node.vjp(node.grad)
    for node in tape.nodes:
        if node.param is not None and node.param.trainable and node.grad is not None:
            node.param.grad += node.grad


# ---------------------------------------------------------------------------
# primitives


def _same_tape(*ts) -> Tape:
    tape = ts[0].tape
    for t in ts[1:]:
        if t.tape is not tape:
            raise ValueError("tensors belong to different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to its source shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul {a.value.shape} x {b.value.shape}")
    out = a.value @ b.value

    def vjp(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return tape._record(out, vjp)


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        _acc(a, g.T)

    return a.tape._record(a.value.T, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(g, b.value.shape))

    return tape._record(a.value + b.value, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)

    def vjp(g):
        _acc(a, _unbroadcast(g, a.value.shape))
        _acc(b, _unbroadcast(-g, b.value.shape))

    return tape._record(a.value - b.value, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)

    def vjp(g):
        _acc(a, _unbroadcast(g * b.value, a.value.shape))
        _acc(b, _unbroadcast(g * a.value, b.value.shape))

    return tape._record(a.value * b.value, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        _acc(a, g * c)

    return a.tape._record(a.value * c, vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0

    def vjp(g):
        _acc(a, g * mask)

    return a.tape._record(np.where(mask, a.value, 0.0), vjp)


def tanh_act(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def vjp(g):
        _acc(a, g * (1.0 - out * out))

    return a.tape._record(out, vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def vjp(g):
        _acc(a, g * out)

    return a.tape._record(out, vjp)


def log(a: Tensor) -> Tensor:
    def vjp(g):
        _acc(a, g / a.value)

    return a.tape._record(np.log(a.value), vjp)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def vjp(g):
        _acc(a, g / (2.0 * out))

    return a.tape._record(out, vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value > lo) & (a.value < hi)

    def vjp(g):
        _acc(a, g * inside)

    return a.tape._record(np.clip(a.value, lo, hi), vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g):
        _acc(a, np.full_like(a.value, float(g)))

    return a.tape._record(a.value.sum(), vjp)


def row_sum(a: Tensor) -> Tensor:
    """Sum over columns -> (n, 1)."""

    def vjp(g):
        _acc(a, np.broadcast_to(g, a.value.shape))

    return a.tape._record(a.value.sum(axis=1, keepdims=True), vjp)


def col_sum(a: Tensor) -> Tensor:
    """Sum over rows -> (1, d)."""

    def vjp(g):
        _acc(a, np.broadcast_to(g, a.value.shape))

    return a.tape._record(a.value.sum(axis=0, keepdims=True), vjp)


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        _acc(a, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return a.tape._record(out, vjp)


def row_normalize(a: Tensor) -> Tensor:
    """Rows scaled to unit L2 norm; zero rows are an error."""
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector("cannot cosine-normalize a zero row")
    out = a.value / norms

    def vjp(g):
        _acc(a, (g - out * (g * out).sum(axis=1, keepdims=True)) / norms)

    return a.tape._record(out, vjp)


def gather_rows(a: Tensor, rows) -> Tensor:
    idx = np.asarray(rows, dtype=np.int64)

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _acc(a, full)

    return a.tape._record(a.value[idx], vjp)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    tape = _same_tape(*tensors)
    sizes = [t.value.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, g[lo:hi])

    return tape._record(np.concatenate([t.value for t in tensors], axis=0), vjp)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    tape = _same_tape(*tensors)
    sizes = [t.value.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, g[:, lo:hi])

    return tape._record(np.concatenate([t.value for t in tensors], axis=1), vjp)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, lo:hi] = g
        _acc(a, full)

    return a.tape._record(a.value[:, lo:hi], vjp)


def mean_rows(a: Tensor) -> Tensor:
    """Column means as a single row -> (1, d)."""
    return scale(col_sum(a), 1.0 / a.value.shape[0])


def mean_pool(m: Tensor, rows) -> Tensor:
    """Arithmetic mean of the selected rows -> (1, d)."""
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size == 0:
        raise EmptySelection("mean_pool over an empty row selection")
    if idx.size and (idx.min() < 0 or idx.max() >= m.value.shape[0]):
        raise ShapeMismatch("mean_pool row index out of range")
    return scale(col_sum(gather_rows(m, idx)), 1.0 / idx.size)


# ---------------------------------------------------------------------------
# graph propagation primitives


def _hyper_mats(g):
    """Zero-copy CSR views of the incidence plus degree reciprocals.

    ``H`` is node x edge, built directly on the inverted index; ``HT``
    is edge x node, built on the hyperedge-major arrays. Memoized on the
    (immutable) hypergraph.
    """
    cached = getattr(g, "_conv_cache", None)
    if cached is not None:
        return cached
    nnz = len(g.edge_nodes)
    ones = np.ones(nnz)
    ht = sp.csr_matrix((ones, g.edge_nodes, g.edge_offsets), shape=(g.edge_count, g.node_count))
    h = sp.csr_matrix((ones, g.node_edges, g.node_offsets), shape=(g.node_count, g.edge_count))
    d = g.node_degrees.astype(np.float64)
    inv_d = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    inv_delta = 1.0 / g.edge_degrees.astype(np.float64)
    cached = (h, ht, inv_d, inv_delta)
    object.__setattr__(g, "_conv_cache", cached)
    return cached


def hyper_propagate(g, x: Tensor) -> Tensor:
    """Two-stage degree-averaged propagation on a hypergraph.

    Gather node features to hyperedges (mean over members), scatter back
    to nodes (mean over containing hyperedges). Rows of isolated nodes
    pass through unchanged. The underlying node->node operator is
    row-stochastic on non-isolated nodes, and it is symmetric up to the
    degree scalings, which the adjoint below exploits.
    """
    if x.value.shape[0] != g.node_count:
        raise ShapeMismatch(
            f"features have {x.value.shape[0]} rows, hypergraph has {g.node_count} nodes"
        )
    h, ht, inv_d, inv_delta = _hyper_mats(g)
    isolated = inv_d == 0.0

    def apply_core(y):
        return h @ (inv_delta[:, None] * (ht @ y))

    out = inv_d[:, None] * apply_core(x.value)
    out[isolated] = x.value[isolated]

    def vjp(grad):
        back = apply_core(inv_d[:, None] * grad)
        back[isolated] = grad[isolated]
        _acc(x, back)

    return x.tape._record(out, vjp)


def edge_mean(g, x: Tensor) -> Tensor:
    """Per-hyperedge mean of member node rows -> (edge_count, d)."""
    if x.value.shape[0] != g.node_count:
        raise ShapeMismatch(
            f"features have {x.value.shape[0]} rows, hypergraph has {g.node_count} nodes"
        )
    h, ht, _inv_d, inv_delta = _hyper_mats(g)
    out = inv_delta[:, None] * (ht @ x.value)

    def vjp(grad):
        _acc(x, h @ (inv_delta[:, None] * grad))

    return x.tape._record(out, vjp)


def line_propagate(lg, x: Tensor) -> Tensor:
    """Symmetric-normalized smoothing on a line graph with self-loops.

    Applies D^{-1/2} (L + I) D^{-1/2}; the operator is symmetric so the
    adjoint is the same map.
    """
    if x.value.shape[0] != lg.hyperedge_count:
        raise ShapeMismatch(
            f"features have {x.value.shape[0]} rows, line graph has "
            f"{lg.hyperedge_count} nodes"
        )
    cached = getattr(lg, "_conv_cache", None)
    if cached is None:
        n = lg.hyperedge_count
        adj = sp.csr_matrix((lg.weights, lg.cols, lg.row_offsets), shape=(n, n))
        deg = 1.0 + np.asarray(adj.sum(axis=1)).ravel()
        cached = (adj, 1.0 / np.sqrt(deg))
        object.__setattr__(lg, "_conv_cache", cached)
    adj, inv_sqrt_deg = cached

    def apply_s(y):
        z = y * inv_sqrt_deg[:, None]
        return (z + adj @ z) * inv_sqrt_deg[:, None]

    def vjp(grad):
        _acc(x, apply_s(grad))

    return x.tape._record(apply_s(x.value), vjp)


# ---------------------------------------------------------------------------
# model forwards


_ACTIVATIONS = {
    "rectifier": relu,
    "identity": lambda t: t,
    "tanh": tanh_act,
}


def hgconv_forward(g, o0: Tensor, weights) -> Tensor:
    """Stacked hypergraph convolution layers (linear, no activation).

    Each layer propagates node features through hyperedges with degree
    averaging, then applies that layer's feature transform.
    """
    if not weights:
        raise ValueError("hgconv needs at least one layer weight")
    out = o0
    for w in weights:
        out = matmul(hyper_propagate(g, out), w)
    return out


def gconv_forward(lg, o0: Tensor, weights, activation: str = "rectifier") -> Tensor:
    """Stacked line-graph convolution layers with nonlinearity."""
    if not weights:
        raise ValueError("gconv needs at least one layer weight")
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}") from None
    out = o0
    for w in weights:
        out = act(matmul(line_propagate(lg, out), w))
    return out


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product attention with per-head projections.

    Projections are bias-free; the concatenated heads go through the
    output projection ``wo``. Output has as many rows as ``q``.
    """
    if k.value.shape[0] != v.value.shape[0]:
        raise ShapeMismatch("key and value row counts differ")
    d = q.value.shape[1]
    if d % heads != 0:
        raise HeadDivisibility(f"model dim {d} not divisible by {heads} heads")
    dk = d // heads
    qp, kp, vp = matmul(q, wq), matmul(k, wk), matmul(v, wv)
    outputs, attn_mats = [], []
    for j in range(heads):
        lo, hi = j * dk, (j + 1) * dk
        scores = scale(
            matmul(slice_cols(qp, lo, hi), transpose(slice_cols(kp, lo, hi))),
            1.0 / np.sqrt(dk),
        )
        attn = row_softmax(scores)
        attn_mats.append(attn)
        outputs.append(matmul(attn, slice_cols(vp, lo, hi)))
    out = matmul(concat_cols(outputs), wo)
    if return_weights:
        return out, attn_mats
    return out


def feed_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two-layer fully connected block with rectifier hidden activation."""
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2)
