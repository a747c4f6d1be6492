"""Dense-tensor computation graphs with reverse-mode differentiation.

Tensors are float64 C-contiguous numpy arrays; a :class:`Graph` is an
append-only list of op records (op kind, input node ids, cached output)
whose insertion order is a topological order.  The op vocabulary is a
small closed set (exactly what the bag-classification pipeline needs),
so every forward and backward rule below can be audited directly:

    matmul (with transpose flags), add, sub, mul (broadcasting),
    smul (constant scalar), powc (constant exponent), tanh, sigmoid,
    relu, exp, log, softmax (row or masked-neighborhood, max-subtracted),
    layernorm (last axis, learnable affine), sum, mean, concat, gather,
    reshape

Leaves are ``input`` placeholders (frozen by default), registered
``param`` tensors, and ``const`` values.  ``forward`` populates every
node's cached output and checks it is finite; ``backward`` walks the
records in reverse and returns one gradient per registered parameter
(plus any input explicitly flagged trainable).
"""

from __future__ import annotations

import numpy as np


class GraphError(Exception):
    """Graph construction or evaluation-order misuse."""


class ShapeError(GraphError):
    """Operand shapes incompatible with an op signature."""


class NonFiniteError(GraphError):
    """A node produced NaN or Inf; message names the node and flat index."""


def as_tensor(value) -> np.ndarray:
    """Coerce to the engine's tensor representation (float64, C order)."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(sa: tuple, sb: tuple, label: str) -> tuple:
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{label}: cannot broadcast {sa} with {sb}") from None


class Node:
    __slots__ = ("id", "op", "inputs", "shape", "value", "extra", "requires_grad", "name", "cache")

    def __init__(self, id, op, inputs, shape, extra=None, requires_grad=False, name=None):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.shape = tuple(shape)
        self.value = None
        self.extra = extra or {}
        self.requires_grad = requires_grad
        self.name = name
        self.cache = None

    @property
    def label(self) -> str:
        base = f"#{self.id}:{self.op}"
        return f"{base}({self.name})" if self.name else base

    def __repr__(self):
        return f"<Node {self.label} shape={self.shape}>"


class Graph:
    """Single-writer computation graph; build ops, then forward/backward."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}
        self.outputs: dict[str, Node] = {}
        self.check_finite = check_finite
        self._ran_forward = False

    # ------------------------------------------------------------- leaves

    def _new(self, op, inputs, shape, extra=None, requires_grad=False, name=None) -> Node:
        node = Node(len(self.nodes), op, [n.id for n in inputs], shape,
                    extra=extra, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def input(self, name: str, shape, requires_grad: bool = False) -> Node:
        """Placeholder bound at forward time; frozen unless flagged."""
        if name in self.inputs:
            raise GraphError(f"duplicate input name {name!r}")
        node = self._new("input", [], shape, requires_grad=requires_grad, name=name)
        self.inputs[name] = node
        return node

    def param(self, name: str, value) -> Node:
        """Register a named leaf parameter (always trainable)."""
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        arr = as_tensor(value)
        node = self._new("param", [], arr.shape, requires_grad=True, name=name)
        node.value = arr
        self.params[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        arr = as_tensor(value)
        node = self._new("const", [], arr.shape, name=name)
        node.value = arr
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    # ---------------------------------------------------------------- ops

    def matmul(self, a: Node, b: Node, transpose_a=False, transpose_b=False) -> Node:
        sa = a.shape[::-1] if transpose_a else a.shape
        sb = b.shape[::-1] if transpose_b else b.shape
        if len(sa) != 2 or len(sb) != 2:
            raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
        if sa[1] != sb[0]:
            raise ShapeError(f"matmul inner dims differ: {sa} @ {sb}")
        rg = a.requires_grad or b.requires_grad
        return self._new("matmul", [a, b], (sa[0], sb[1]),
                         extra={"ta": transpose_a, "tb": transpose_b}, requires_grad=rg)

    def _ewise(self, op, a: Node, b: Node) -> Node:
        shape = _broadcast_shape(a.shape, b.shape, op)
        return self._new(op, [a, b], shape, requires_grad=a.requires_grad or b.requires_grad)

    def add(self, a, b):
        return self._ewise("add", a, b)

    def sub(self, a, b):
        return self._ewise("sub", a, b)

    def mul(self, a, b):
        return self._ewise("mul", a, b)

    def smul(self, a: Node, scalar: float) -> Node:
        return self._new("smul", [a], a.shape, extra={"c": float(scalar)},
                         requires_grad=a.requires_grad)

    def powc(self, a: Node, exponent: float) -> Node:
        """x ** c for constant c >= 0 (finite at x == 0, unlike exp(c*log x))."""
        c = float(exponent)
        if c < 0:
            raise GraphError(f"powc exponent must be >= 0, got {c}")
        return self._new("powc", [a], a.shape, extra={"c": c}, requires_grad=a.requires_grad)

    def _unary(self, op, a: Node) -> Node:
        return self._new(op, [a], a.shape, requires_grad=a.requires_grad)

    def tanh(self, a):
        return self._unary("tanh", a)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def relu(self, a):
        return self._unary("relu", a)

    def exp(self, a):
        return self._unary("exp", a)

    def log(self, a):
        return self._unary("log", a)

    def softmax(self, a: Node, axis: int = -1, mask: np.ndarray | None = None) -> Node:
        """Max-subtracted softmax along `axis`; a boolean `mask` restricts each
        group to its valid entries (masked-out positions get exactly 0)."""
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != a.shape:
                raise ShapeError(f"softmax mask shape {mask.shape} != operand {a.shape}")
        return self._new("softmax", [a], a.shape, extra={"axis": axis, "mask": mask},
                         requires_grad=a.requires_grad)

    def layernorm(self, x: Node, scale: Node, shift: Node, eps: float = 1e-5) -> Node:
        d = x.shape[-1]
        if scale.shape != (d,) or shift.shape != (d,):
            raise ShapeError(
                f"layernorm affine shapes {scale.shape}/{shift.shape} != ({d},)")
        rg = x.requires_grad or scale.requires_grad or shift.requires_grad
        return self._new("layernorm", [x, scale, shift], x.shape,
                         extra={"eps": float(eps)}, requires_grad=rg)

    def _reduce(self, op, a: Node, axis, keepdims) -> Node:
        if axis is None:
            shape = (1,) * len(a.shape) if keepdims else ()
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(a.shape) for ax in axes)
            if keepdims:
                shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
            else:
                shape = tuple(s for i, s in enumerate(a.shape) if i not in axes)
            axis = axes
        return self._new(op, [a], shape, extra={"axis": axis, "keepdims": keepdims},
                         requires_grad=a.requires_grad)

    def sum(self, a, axis=None, keepdims=False):
        return self._reduce("sum", a, axis, keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self._reduce("mean", a, axis, keepdims)

    def concat(self, parts: list[Node], axis: int = 0) -> Node:
        if not parts:
            raise GraphError("concat of zero nodes")
        ref = parts[0].shape
        axis = axis % len(ref)
        for p in parts[1:]:
            other = p.shape
            if len(other) != len(ref) or any(
                    s != r for i, (s, r) in enumerate(zip(other, ref)) if i != axis):
                raise ShapeError(f"concat shapes {ref} vs {other} along axis {axis}")
        shape = list(ref)
        shape[axis] = sum(p.shape[axis] for p in parts)
        rg = any(p.requires_grad for p in parts)
        return self._new("concat", parts, tuple(shape), extra={"axis": axis}, requires_grad=rg)

    def gather(self, a: Node, index: np.ndarray) -> Node:
        """Rows of `a` selected by an integer index array (axis 0); the
        adjoint scatter-adds gradients back onto the selected rows."""
        idx = np.asarray(index, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ShapeError(
                f"gather index out of range [0, {a.shape[0]}): min={idx.min()} max={idx.max()}")
        shape = idx.shape + a.shape[1:]
        return self._new("gather", [a], shape, extra={"idx": idx}, requires_grad=a.requires_grad)

    def reshape(self, a: Node, shape) -> Node:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(a.shape)):
            raise ShapeError(f"reshape {a.shape} -> {shape} changes element count")
        return self._new("reshape", [a], shape, extra={"shape": shape},
                         requires_grad=a.requires_grad)


# ------------------------------------------------------------------ forward

def _eval_node(node: Node, vals: list) -> np.ndarray:
    op = node.op
    x = [vals[i] for i in node.inputs]
    ex = node.extra
    if op == "matmul":
        a = x[0].T if ex["ta"] else x[0]
        b = x[1].T if ex["tb"] else x[1]
        return a @ b
    if op == "add":
        return x[0] + x[1]
    if op == "sub":
        return x[0] - x[1]
    if op == "mul":
        return x[0] * x[1]
    if op == "smul":
        return x[0] * ex["c"]
    if op == "powc":
        return x[0] ** ex["c"]
    if op == "tanh":
        return np.tanh(x[0])
    if op == "sigmoid":
        v = x[0]
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    if op == "relu":
        return np.maximum(x[0], 0.0)
    if op == "exp":
        return np.exp(x[0])
    if op == "log":
        return np.log(x[0])
    if op == "softmax":
        axis, mask = ex["axis"], ex["mask"]
        v = x[0] if mask is None else np.where(mask, x[0], -np.inf)
        m = np.max(v, axis=axis, keepdims=True)
        e = np.exp(v - m)
        return e / e.sum(axis=axis, keepdims=True)
    if op == "layernorm":
        v, scale, shift = x
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + ex["eps"])
        xhat = xc * inv
        node.cache = (xhat, inv)
        return xhat * scale + shift
    if op == "sum":
        return np.sum(x[0], axis=ex["axis"], keepdims=ex["keepdims"])
    if op == "mean":
        return np.mean(x[0], axis=ex["axis"], keepdims=ex["keepdims"])
    if op == "concat":
        return np.concatenate(x, axis=ex["axis"])
    if op == "gather":
        return x[0][ex["idx"]]
    if op == "reshape":
        return x[0].reshape(ex["shape"])
    raise GraphError(f"unknown op kind {op!r} at {node.label}")


def forward(graph: Graph, inputs: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Evaluate every node in insertion order; returns the named outputs.

    Pure in (graph structure, inputs, parameter values): repeated calls give
    bitwise-identical results.
    """
    inputs = inputs or {}
    unknown = set(inputs) - set(graph.inputs)
    if unknown:
        raise GraphError(f"unknown input names {sorted(unknown)}")
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound input names {sorted(missing)}")

    vals: list = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.op == "input":
            arr = as_tensor(inputs[node.name])
            if arr.shape != node.shape:
                raise ShapeError(
                    f"input {node.name!r} bound with shape {arr.shape}, declared {node.shape}")
            value = arr
        elif node.op in ("param", "const"):
            value = node.value
        else:
            value = _eval_node(node, vals)
            value = np.asarray(value, dtype=np.float64)
        if graph.check_finite and node.op not in ("param", "const"):
            bad = ~np.isfinite(value)
            if bad.any():
                idx = tuple(map(int, np.unravel_index(int(np.argmax(bad)), value.shape))) if value.ndim else ()
                raise NonFiniteError(f"non-finite value at node {node.label}, index {idx}")
        vals[node.id] = value
        node.value = value
    graph._ran_forward = True
    return {name: vals[node.id] for name, node in graph.outputs.items()}


# ----------------------------------------------------------------- backward

def _accumulate(grads, node_id, g):
    if grads[node_id] is None:
        grads[node_id] = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        grads[node_id] += g


def _backprop_node(node: Node, vals, grads, needs):
    g = grads[node.id]
    op, ex = node.op, node.extra
    x = [vals[i] for i in node.inputs]

    def send(slot, grad):
        nid = node.inputs[slot]
        if needs[nid]:
            _accumulate(grads, nid, grad)

    if op == "matmul":
        a, b = x
        ta, tb = ex["ta"], ex["tb"]
        ap = a.T if ta else a
        bp = b.T if tb else b
        ga = g @ bp.T
        gb = ap.T @ g
        send(0, ga.T if ta else ga)
        send(1, gb.T if tb else gb)
    elif op == "add":
        send(0, _unbroadcast(g, x[0].shape))
        send(1, _unbroadcast(g, x[1].shape))
    elif op == "sub":
        send(0, _unbroadcast(g, x[0].shape))
        send(1, _unbroadcast(-g, x[1].shape))
    elif op == "mul":
        send(0, _unbroadcast(g * x[1], x[0].shape))
        send(1, _unbroadcast(g * x[0], x[1].shape))
    elif op == "smul":
        send(0, g * ex["c"])
    elif op == "powc":
        c = ex["c"]
        if c == 0.0:
            send(0, np.zeros_like(x[0]))
        else:
            base = x[0] ** (c - 1.0) if c >= 1.0 else \
                np.where(x[0] > 0, x[0], 1.0) ** (c - 1.0) * (x[0] > 0)
            send(0, g * c * base)
    elif op == "tanh":
        y = node.value
        send(0, g * (1.0 - y * y))
    elif op == "sigmoid":
        y = node.value
        send(0, g * y * (1.0 - y))
    elif op == "relu":
        send(0, g * (x[0] > 0))
    elif op == "exp":
        send(0, g * node.value)
    elif op == "log":
        send(0, g / x[0])
    elif op == "softmax":
        y = node.value
        axis = ex["axis"]
        dot = np.sum(g * y, axis=axis, keepdims=True)
        send(0, y * (g - dot))
    elif op == "layernorm":
        xhat, inv = node.cache
        scale = x[1]
        batch_axes = tuple(range(g.ndim - 1))
        send(2, g.sum(axis=batch_axes))
        send(1, (g * xhat).sum(axis=batch_axes))
        gxhat = g * scale
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        send(0, inv * (gxhat - m1 - xhat * m2))
    elif op in ("sum", "mean"):
        axis, keepdims = ex["axis"], ex["keepdims"]
        src_shape = x[0].shape
        gg = g
        if not keepdims and axis is not None:
            expand = tuple(sorted(axis))
            for ax in expand:
                gg = np.expand_dims(gg, ax)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * len(src_shape))
        if op == "mean":
            count = x[0].size if axis is None else int(np.prod([src_shape[a] for a in axis]))
            gg = gg / count
        send(0, np.broadcast_to(gg, src_shape))
    elif op == "concat":
        axis = ex["axis"]
        offset = 0
        for slot, part in enumerate(x):
            width = part.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + width)
            send(slot, g[tuple(sl)])
            offset += width
    elif op == "gather":
        if needs[node.inputs[0]]:
            gx = np.zeros_like(x[0])
            np.add.at(gx, ex["idx"], g)
            _accumulate(grads, node.inputs[0], gx)
    elif op == "reshape":
        send(0, g.reshape(x[0].shape))
    else:
        raise GraphError(f"no backward rule for op {op!r} at {node.label}")


def backward(graph: Graph, loss: Node | str) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss node for every registered parameter.

    Inputs flagged ``requires_grad=True`` are included under their names;
    frozen inputs are omitted (and their subtrees never touched).
    """
    if not graph._ran_forward:
        raise GraphError("backward called before forward")
    node = graph.outputs[loss] if isinstance(loss, str) else loss
    if int(np.prod(node.shape)) != 1:
        raise GraphError(f"loss node {node.label} is not scalar: shape {node.shape}")

    vals = [n.value for n in graph.nodes]
    needs = [n.requires_grad for n in graph.nodes]
    grads: list = [None] * len(graph.nodes)
    grads[node.id] = np.ones(node.shape, dtype=np.float64)

    for n in reversed(graph.nodes[: node.id + 1]):
        if grads[n.id] is None or not needs[n.id]:
            continue
        if n.op in ("input", "param", "const"):
            continue
        _backprop_node(n, vals, grads, needs)

    out: dict[str, np.ndarray] = {}
    for name, pnode in graph.params.items():
        g = grads[pnode.id]
        out[name] = g if g is not None else np.zeros(pnode.shape, dtype=np.float64)
    for name, inode in graph.inputs.items():
        if inode.requires_grad:
            g = grads[inode.id]
            out[name] = g if g is not None else np.zeros(inode.shape, dtype=np.float64)
    return out


# --------------------------------------------------------------- fd oracle

def finite_diff_grad(fn, point: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a
    time: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).  Test oracle; stays
    independent of the graph machinery it checks."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = as_tensor(point).copy()
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite probe value at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)
