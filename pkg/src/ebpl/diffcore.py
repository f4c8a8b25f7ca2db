"""Dense float64 tensors with reverse-mode autodiff on a per-call tape.

Every differentiable quantity in the toolkit (classifier logits, Gaussian
energies, the joint loss, sampler drift terms) is built from the ops in this
module.  Ops evaluate eagerly; when a tape is active they additionally record
nodes so that :func:`backward` can replay the chain rule, including gradients
with respect to *inputs* (needed by the Langevin sampler).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError("item", self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # arithmetic: every dunder routes through the module-level ops so the
    # active tape (if any) sees the operation
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded operation: id, parent node indices, cached value, pullback."""

    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Ordered operation records for one forward pass (dynamic graph).

    Nodes are appended in execution order, which is automatically a
    topological order; `backward` walks them once in reverse.
    """

    def __init__(self, wrt: Sequence[Tensor] | None = None):
        self.nodes: list[TapeNode] = []
        self.output_index: int | None = None
        self._index: dict[int, int] = {}
        self._retain: list[Tensor] = []
        self._leaves: list[Tensor] = []
        self._wrt_ids = None if wrt is None else {id(t) for t in wrt}

    def _tracks(self, t: Tensor) -> bool:
        if id(t) in self._index:
            return True
        if not t.requires_grad:
            return False
        return self._wrt_ids is None or id(t) in self._wrt_ids

    def _node_for(self, t: Tensor) -> int:
        """Node index for t, registering it as a leaf if needed; -1 = constant."""
        idx = self._index.get(id(t))
        if idx is not None:
            return idx
        if not self._tracks(t):
            return -1
        idx = len(self.nodes)
        self.nodes.append(TapeNode("leaf", (), t.data, None))
        self._index[id(t)] = idx
        self._retain.append(t)
        self._leaves.append(t)
        return idx

    def _record(self, op: str, parents: Sequence[Tensor], out: Tensor, vjp) -> None:
        idxs = tuple(self._node_for(p) for p in parents)
        pos = len(self.nodes)
        self.nodes.append(TapeNode(op, idxs, out.data, vjp))
        self._index[id(out)] = pos
        self._retain.append(out)

    def mark_output(self, out: Tensor) -> None:
        self.output_index = self._index.get(id(out))
        if self.output_index is None:
            # output did not depend on any tracked leaf; register it so
            # backward still has a seed target
            self._record("const_output", (), out, lambda g: ())
            self.output_index = self._index[id(out)]

    @property
    def output_shape(self) -> tuple[int, ...]:
        if self.output_index is None:
            raise ValueError("tape has no marked output")
        return self.nodes[self.output_index].value.shape


_TLS = threading.local()


def _active_tape() -> Tape | None:
    return getattr(_TLS, "tape", None)


class _TapeScope:
    def __init__(self, tape: Tape):
        self.tape = tape

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("nested tapes are not supported (single-threaded per tape)")
        _TLS.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _TLS.tape = None
        return False


def _apply(op: str, parents: Sequence[Tensor], out_data: np.ndarray, vjp_factory) -> Tensor:
    """Create the output tensor, recording a node if a tape is listening."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(tape._tracks(p) for p in parents):
        tape._record(op, parents, out, vjp_factory())
    return out


class GradientMap:
    """Leaf gradients from one backward pass; untouched leaves read as zero."""

    def __init__(self, grads: dict[int, np.ndarray], leaves: list[Tensor]):
        self._grads = grads
        self._leaves = {id(t): t for t in leaves}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def forward(graph_fn, inputs: Sequence[Tensor], wrt: Sequence[Tensor] | None = None):
    """Run graph_fn under a fresh tape; returns (output Tensor, Tape).

    `wrt`, when given, restricts leaf tracking to those tensors (everything
    else is treated as a constant — used for input-only gradients).
    """
    tape = Tape(wrt=wrt)
    with _TapeScope(tape):
        out = graph_fn(*inputs)
    if not isinstance(out, Tensor):
        out = _wrap(out)
    tape.mark_output(out)
    return out, tape


def backward(tape: Tape, seed: Tensor) -> GradientMap:
    """Accumulate chain-rule gradients for every leaf of the tape."""
    seed_arr = _wrap(seed).data
    if seed_arr.shape != tape.output_shape:
        raise ShapeError("backward seed", seed_arr.shape, tape.output_shape)
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[tape.output_index] = np.array(seed_arr, dtype=np.float64)
    for idx in range(tape.output_index, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for p_idx, pg in zip(node.parents, parent_grads):
            if p_idx < 0 or pg is None:
                continue
            if grads[p_idx] is None:
                grads[p_idx] = np.array(pg, dtype=np.float64)
            else:
                grads[p_idx] = grads[p_idx] + pg
    leaf_grads: dict[int, np.ndarray] = {}
    for t in tape._leaves:
        idx = tape._index[id(t)]
        g = grads[idx]
        leaf_grads[id(t)] = np.zeros_like(t.data) if g is None else g
    return GradientMap(leaf_grads, tape._leaves)


def grad_wrt_input(model_fn, x: Tensor) -> Tensor:
    """Gradient of a scalar-valued model_fn with respect to x only.

    Model parameters are treated as constants, which is what the Langevin
    update needs.
    """
    leaf = Tensor(x.data, requires_grad=True)
    out, tape = forward(model_fn, [leaf], wrt=[leaf])
    if out.size != 1:
        raise ShapeError("grad_wrt_input output", out.shape)
    gm = backward(tape, Tensor(np.ones_like(out.data)))
    return Tensor(gm[leaf])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp():
        sa, sb = a.shape, b.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _apply("add", (a, b), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp():
        sa, sb = a.shape, b.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _apply("sub", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp():
        ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
        return lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))

    return _apply("mul", (a, b), out, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp():
        ad, bd, sa, sb = a.data, b.data, a.shape, b.shape
        return lambda g: (
            _unbroadcast(g / bd, sa),
            _unbroadcast(-g * ad / (bd * bd), sb),
        )

    return _apply("div", (a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data, lambda: lambda g: (-g,))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = ad @ bd

    def vjp():
        def pull(g):
            if ad.ndim == 2 and bd.ndim == 2:
                return g @ bd.T, ad.T @ g
            if ad.ndim == 2 and bd.ndim == 1:  # (n,d)@(d,) -> (n,)
                return np.outer(g, bd), ad.T @ g
            if ad.ndim == 1 and bd.ndim == 2:  # (d,)@(d,c) -> (c,)
                return bd @ g, np.outer(ad, g)
            return g * bd, g * ad  # (d,)@(d,) -> scalar

        return pull

    return _apply("matmul", (a, b), out, vjp)


def transpose(a: Tensor) -> Tensor:
    return _apply("transpose", (a,), a.data.T, lambda: lambda g: (g.T,))


def diagonal(a: Tensor) -> Tensor:
    """Diagonal of a square matrix as a vector."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("diagonal", a.shape)
    n = a.shape[0]

    def vjp():
        def pull(g):
            out = np.zeros((n, n))
            np.fill_diagonal(out, g)
            return (out,)

        return pull

    return _apply("diagonal", (a,), np.diagonal(a.data).copy(), vjp)


def diag_matrix(v: Tensor) -> Tensor:
    """Square matrix with v on the diagonal."""
    if v.data.ndim != 1:
        raise ShapeError("diag_matrix", v.shape)
    return _apply("diag_matrix", (v,), np.diag(v.data), lambda: lambda g: (np.diagonal(g).copy(),))


def column_stack(cols: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into the columns of a matrix."""
    n = cols[0].shape[0] if cols[0].data.ndim == 1 else None
    for c in cols:
        if c.data.ndim != 1 or c.shape[0] != n:
            raise ShapeError("column_stack", *[c.shape for c in cols])
    out = np.stack([c.data for c in cols], axis=1)
    return _apply(
        "column_stack", tuple(cols), out,
        lambda: lambda g: tuple(g[:, i] for i in range(len(cols))),
    )


def trisolve(L: Tensor, b: Tensor, transpose_l: bool = False) -> Tensor:
    """Rows of b solved against lower-triangular L: z_i = L^{-1} b_i (or L^{-T} b_i).

    Only the lower triangle of L is read; gradients to its upper triangle
    are zero accordingly.
    """
    Ld, bd = L.data, b.data
    if Ld.ndim != 2 or Ld.shape[0] != Ld.shape[1]:
        raise ShapeError("trisolve", Ld.shape, bd.shape)
    squeeze = bd.ndim == 1
    B = bd[None, :] if squeeze else bd
    if B.ndim != 2 or B.shape[1] != Ld.shape[0]:
        raise ShapeError("trisolve", Ld.shape, bd.shape)
    trans = "T" if transpose_l else "N"
    Z = solve_triangular(Ld, B.T, lower=True, trans=trans).T
    out = Z[0] if squeeze else Z

    def vjp():
        def pull(g):
            G = g[None, :] if squeeze else g
            # rows of Bbar solve against the opposite transpose
            Bbar = solve_triangular(Ld, G.T, lower=True, trans="N" if transpose_l else "T").T
            if transpose_l:
                Lbar = -(Z.T @ Bbar)
            else:
                Lbar = -(Bbar.T @ Z)
            Lbar = np.tril(Lbar)
            return Lbar, (Bbar[0] if squeeze else Bbar)

        return pull

    return _apply("trisolve", (L, b), out, vjp)


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp():
        shape = a.shape

        def pull(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return pull

    return _apply("sum", (a,), out, vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def vjp():
        shape = a.shape

        def pull(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape) / count,)

        return pull

    return _apply("mean", (a,), out, vjp)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp via max subtraction."""
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_kept = m + np.log(total)
    out = out_kept if keepdims else np.squeeze(out_kept, axis=axis)

    def vjp():
        soft = shifted / total

        def pull(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * soft,)

        return pull

    return _apply("logsumexp", (a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp():
        soft = np.exp(out)
        return lambda g: (g - soft * g.sum(axis=axis, keepdims=True),)

    return _apply("log_softmax", (a,), out, vjp)


# -- elementwise nonlinearities ---------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp():
        return lambda g: (g * out,)

    return _apply("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    def vjp():
        ad = a.data
        return lambda g: (g / ad,)

    return _apply("log", (a,), np.log(a.data), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp():
        return lambda g: (g * (1.0 - out * out),)

    return _apply("tanh", (a,), out, vjp)


def relu(a: Tensor) -> Tensor:
    def vjp():
        mask = a.data > 0
        return lambda g: (g * mask,)

    return _apply("relu", (a,), np.maximum(a.data, 0.0), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    def vjp():
        factor = np.where(a.data > 0, 1.0, slope)
        return lambda g: (g * factor,)

    return _apply("leaky_relu", (a,), np.where(a.data > 0, a.data, slope * a.data), vjp)


def softplus(a: Tensor) -> Tensor:
    # stable: log(1+e^x) = max(x,0) + log1p(e^{-|x|})
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def vjp():
        sig = 1.0 / (1.0 + np.exp(-a.data))
        return lambda g: (g * sig,)

    return _apply("softplus", (a,), out, vjp)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "leaky-relu": leaky_relu,
}


class MlpExtractor:
    """Fully-connected feature extractor: x -> hidden stack -> feature vector.

    Hidden layers are activated (tanh by default; smooth gradients keep the
    sampler well behaved), the output layer is linear.  An empty layer list
    is the identity map, used by sampler validation.
    """

    def __init__(self, input_dim: int, hidden_dims: Sequence[int], feature_dim: int,
                 activation: str = "tanh", rng: np.random.Generator | None = None):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; pick from {sorted(_ACTIVATIONS)}")
        self.input_dim = int(input_dim)
        self.feature_dim = int(feature_dim)
        self.activation = activation
        self.layers: list[tuple[Tensor, Tensor]] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [self.input_dim, *hidden_dims, self.feature_dim]
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                       requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            self.layers.append((w, b))

    @classmethod
    def identity(cls, dim: int) -> "MlpExtractor":
        ext = cls.__new__(cls)
        ext.input_dim = int(dim)
        ext.feature_dim = int(dim)
        ext.activation = "tanh"
        ext.layers = []
        return ext

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim not in (1, 2) or x.shape[-1] != self.input_dim:
            raise ShapeError("MlpExtractor", x.shape, (self.input_dim,))
        if not self.layers:
            return x
        act = _ACTIVATIONS[self.activation]
        h = x
        for w, b in self.layers[:-1]:
            h = act(h @ w + b)
        w, b = self.layers[-1]
        return h @ w + b

    def parameters(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def reinitialize(self, rng: np.random.Generator) -> None:
        for w, b in self.layers:
            fan_in = w.shape[0]
            w.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
            b.data[...] = 0.0
