"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Graph` is a static, topologically ordered list of primitive nodes
assembled through builder methods.  Evaluation is functional: `forward_eval`
and `backward_grad` never mutate the graph or its bindings, so graphs and
tensors can safely be shared across threads.

Also hosts the norm-ball projections (`project_ball`) and entrywise `sign`
that every gradient-based attack in this package relies on.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "GraphError",
    "Tensor",
    "Graph",
    "forward_eval",
    "backward_grad",
    "value_and_grad",
    "eval_with_grad",
    "finite_diff_grad",
    "sign",
    "project_ball",
    "project_array",
]

# Norm-ball membership is verified against closed balls with this slack; the
# l2/l1 projections treat points this close to the boundary as inside, which
# makes repeated projection bitwise idempotent.
BALL_TOL = 1e-12

_ELEMENTWISE = ("tanh", "sigmoid", "relu", "abs")


class GraphError(ValueError):
    """Structural problem in a graph: bad shape, unknown node, bad binding."""


class Tensor:
    """Immutable dense array of 64-bit floats with all entries finite."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor entries must be finite (no NaN/Inf)")
        arr.setflags(write=False)
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def data(self) -> np.ndarray:
        """Read-only ndarray view of the values (row-major)."""
        return self._data

    @property
    def flat(self) -> np.ndarray:
        """Read-only flat view in row-major order."""
        return self._data.reshape(-1)

    def item(self) -> float:
        return float(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def allequal(self, other) -> bool:
        """Bitwise equality against another Tensor or array."""
        other_arr = other.data if isinstance(other, Tensor) else np.asarray(other)
        return self.shape == tuple(other_arr.shape) and np.array_equal(
            self._data, other_arr
        )


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("op", "inputs", "shape", "name", "attrs")

    def __init__(self, op, inputs, shape, name=None, attrs=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.shape = tuple(shape)
        self.name = name
        self.attrs = attrs or {}

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<{self.op}{label} shape={self.shape}>"


def _matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D GEMM whose per-row bits do not depend on the number of rows.

    BLAS routes single-row products to GEMV, whose accumulation order differs
    from GEMM; duplicating the row and discarding the copy keeps every batch
    size on the same kernel, so evaluating one sample or a thousand yields
    bitwise-identical rows.
    """
    if a.shape[0] == 1:
        return (np.concatenate([a, a], axis=0) @ b)[:1]
    return a @ b


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _conv2d_same(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """'Same' zero-padded 2-D correlation over the trailing two axes."""
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    xp = np.pad(x, pad)
    h, w = x.shape[-2], x.shape[-1]
    out = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            out += kernel[a, b] * xp[..., a : a + h, b : b + w]
    return out


class Graph:
    """Static computation graph over float64 tensors.

    Nodes are appended in topological order; node handles are plain integer
    indices.  Inputs are named leaves bound at evaluation time; constants
    carry their data.  Use :meth:`mark_output` to give result nodes names
    that `forward_eval` will report.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._input_ids: dict[str, int] = {}
        self._output_ids: dict[str, int] = {}

    # -- construction ------------------------------------------------------

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _shape(self, nid: int, context: str) -> tuple[int, ...]:
        if not isinstance(nid, (int, np.integer)) or not 0 <= nid < len(self.nodes):
            raise GraphError(f"{context}: unknown node handle {nid!r}")
        return self.nodes[nid].shape

    def input(self, name: str, shape) -> int:
        if name in self._input_ids:
            raise GraphError(f"duplicate input name {name!r}")
        shape = tuple(int(s) for s in shape)
        nid = self._append(_Node("input", (), shape, name=name))
        self._input_ids[name] = nid
        return nid

    def const(self, data) -> int:
        arr = _as_array(data)
        return self._append(_Node("const", (), arr.shape, attrs={"value": arr}))

    def add(self, a: int, b: int) -> int:
        sa, sb = self._shape(a, "add"), self._shape(b, "add")
        try:
            out = np.broadcast_shapes(sa, sb)
        except ValueError:
            raise GraphError(f"add: shapes {sa} and {sb} do not broadcast") from None
        return self._append(_Node("add", (a, b), out))

    def mul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a, "mul"), self._shape(b, "mul")
        try:
            out = np.broadcast_shapes(sa, sb)
        except ValueError:
            raise GraphError(f"mul: shapes {sa} and {sb} do not broadcast") from None
        return self._append(_Node("mul", (a, b), out))

    def scalar_mul(self, a: int, c: float) -> int:
        return self._append(
            _Node("scalar_mul", (a,), self._shape(a, "scalar_mul"), attrs={"c": float(c)})
        )

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.scalar_mul(b, -1.0))

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a, "matmul"), self._shape(b, "matmul")
        if len(sb) != 2:
            raise GraphError(f"matmul: right operand must be 2-D, got {sb}")
        if len(sa) == 1:
            if sa[0] != sb[0]:
                raise GraphError(f"matmul: inner dims {sa} x {sb} do not match")
            out = (sb[1],)
        elif len(sa) == 2:
            if sa[1] != sb[0]:
                raise GraphError(f"matmul: inner dims {sa} x {sb} do not match")
            out = (sa[0], sb[1])
        else:
            raise GraphError(f"matmul: left operand must be 1-D or 2-D, got {sa}")
        return self._append(_Node("matmul", (a, b), out))

    def tanh(self, a: int) -> int:
        return self._append(_Node("tanh", (a,), self._shape(a, "tanh")))

    def sigmoid(self, a: int) -> int:
        return self._append(_Node("sigmoid", (a,), self._shape(a, "sigmoid")))

    def relu(self, a: int) -> int:
        return self._append(_Node("relu", (a,), self._shape(a, "relu")))

    def abs(self, a: int) -> int:
        return self._append(_Node("abs", (a,), self._shape(a, "abs")))

    def clamp(self, a: int, lo: float, hi: float) -> int:
        if not lo < hi:
            raise GraphError(f"clamp: need lo < hi, got [{lo}, {hi}]")
        return self._append(
            _Node("clamp", (a,), self._shape(a, "clamp"),
                  attrs={"lo": float(lo), "hi": float(hi)})
        )

    def reshape(self, a: int, shape) -> int:
        shape = tuple(int(s) for s in shape)
        sa = self._shape(a, "reshape")
        if int(np.prod(sa, dtype=np.int64)) != int(np.prod(shape, dtype=np.int64)):
            raise GraphError(f"reshape: cannot reshape {sa} to {shape}")
        return self._append(_Node("reshape", (a,), shape))

    def sum(self, a: int) -> int:
        self._shape(a, "sum")
        return self._append(_Node("sum", (a,), ()))

    def mean(self, a: int) -> int:
        sa = self._shape(a, "mean")
        n = int(np.prod(sa, dtype=np.int64)) if sa else 1
        return self.scalar_mul(self.sum(a), 1.0 / n)

    def softmax_cross_entropy(self, logits: int, labels) -> int:
        """Mean cross-entropy of softmax(logits) against integer labels."""
        s = self._shape(logits, "softmax_cross_entropy")
        lab = np.asarray(labels, dtype=np.int64)
        if len(s) == 1:
            if lab.shape not in ((), (1,)):
                raise GraphError("softmax_cross_entropy: scalar label expected")
            lab = lab.reshape(())
        elif len(s) == 2:
            if lab.shape != (s[0],):
                raise GraphError(
                    f"softmax_cross_entropy: labels shape {lab.shape} does not"
                    f" match batch of {s[0]}"
                )
        else:
            raise GraphError(f"softmax_cross_entropy: logits must be 1-D/2-D, got {s}")
        if lab.size and (lab.min() < 0 or lab.max() >= s[-1]):
            raise GraphError("softmax_cross_entropy: label out of range")
        return self._append(
            _Node("softmax_ce", (logits,), (), attrs={"labels": lab})
        )

    def kl_softmax(self, p_logits: int, q_logits: int) -> int:
        """Mean KL(softmax(p) || softmax(q)); uses the 0*ln(0/q) = 0 convention."""
        sp = self._shape(p_logits, "kl_softmax")
        sq = self._shape(q_logits, "kl_softmax")
        if sp != sq or len(sp) not in (1, 2):
            raise GraphError(f"kl_softmax: logits shapes {sp} and {sq} must match 1-D/2-D")
        return self._append(_Node("kl_softmax", (p_logits, q_logits), ()))

    def conv2d(self, a: int, kernel) -> int:
        """'Same' zero-padded correlation with a fixed (non-learned) 2-D kernel."""
        k = _as_array(kernel)
        if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
            raise GraphError(f"conv2d: kernel must be 2-D with odd sides, got {k.shape}")
        sa = self._shape(a, "conv2d")
        if len(sa) not in (2, 3):
            raise GraphError(f"conv2d: input must be (H,W) or (N,H,W), got {sa}")
        return self._append(_Node("conv2d", (a,), sa, attrs={"kernel": k}))

    # -- bookkeeping ---------------------------------------------------------

    def mark_output(self, name: str, nid: int) -> int:
        self._shape(nid, "mark_output")
        self._output_ids[name] = nid
        return nid

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(self._input_ids)

    @property
    def output_names(self) -> tuple[str, ...]:
        return tuple(self._output_ids)

    def node_shape(self, nid: int) -> tuple[int, ...]:
        return self._shape(nid, "node_shape")

    def _resolve(self, ref) -> int:
        """Map an output name or node handle to a node index."""
        if isinstance(ref, str):
            if ref in self._output_ids:
                return self._output_ids[ref]
            if ref in self._input_ids:
                return self._input_ids[ref]
            raise GraphError(f"unknown node name {ref!r}")
        self._shape(ref, "node reference")
        return int(ref)


# -- evaluation --------------------------------------------------------------


def _bind(graph: Graph, inputs) -> dict[int, np.ndarray]:
    bound: dict[int, np.ndarray] = {}
    for name, nid in graph._input_ids.items():
        if name not in inputs:
            raise GraphError(f"input {name!r} not bound")
        arr = _as_array(inputs[name])
        if arr.shape != graph.nodes[nid].shape:
            raise GraphError(
                f"input {name!r}: bound shape {arr.shape} does not match"
                f" declared {graph.nodes[nid].shape}"
            )
        bound[nid] = arr
    return bound


def _forward(graph: Graph, bound: dict[int, np.ndarray]) -> list[np.ndarray]:
    values: list[np.ndarray] = [None] * len(graph.nodes)  # type: ignore[list-item]
    for i, node in enumerate(graph.nodes):
        op = node.op
        if op == "input":
            values[i] = bound[i]
        elif op == "const":
            values[i] = node.attrs["value"]
        elif op == "add":
            values[i] = values[node.inputs[0]] + values[node.inputs[1]]
        elif op == "mul":
            values[i] = values[node.inputs[0]] * values[node.inputs[1]]
        elif op == "scalar_mul":
            values[i] = values[node.inputs[0]] * node.attrs["c"]
        elif op == "matmul":
            a = values[node.inputs[0]]
            b = values[node.inputs[1]]
            if a.ndim == 1:
                values[i] = _matmul_rows(a[None, :], b)[0]
            else:
                values[i] = _matmul_rows(a, b)
        elif op == "tanh":
            values[i] = np.tanh(values[node.inputs[0]])
        elif op == "sigmoid":
            x = values[node.inputs[0]]
            values[i] = 0.5 * (np.tanh(0.5 * x) + 1.0)
        elif op == "relu":
            values[i] = np.maximum(values[node.inputs[0]], 0.0)
        elif op == "abs":
            values[i] = np.abs(values[node.inputs[0]])
        elif op == "clamp":
            values[i] = np.clip(values[node.inputs[0]], node.attrs["lo"], node.attrs["hi"])
        elif op == "reshape":
            values[i] = values[node.inputs[0]].reshape(node.shape)
        elif op == "sum":
            values[i] = np.asarray(values[node.inputs[0]].sum())
        elif op == "softmax_ce":
            z = values[node.inputs[0]]
            lab = node.attrs["labels"]
            lp = _log_softmax(z)
            if z.ndim == 1:
                values[i] = np.asarray(-lp[int(lab)])
            else:
                picked = lp[np.arange(z.shape[0]), lab]
                values[i] = np.asarray(-picked.mean())
        elif op == "kl_softmax":
            zp = values[node.inputs[0]]
            zq = values[node.inputs[1]]
            lp = _log_softmax(zp)
            lq = _log_softmax(zq)
            p = np.exp(lp)
            rows = np.where(p > 0.0, p * (lp - lq), 0.0).sum(axis=-1)
            values[i] = np.asarray(rows.mean()) if zp.ndim == 2 else np.asarray(rows)
        elif op == "conv2d":
            values[i] = _conv2d_same(values[node.inputs[0]], node.attrs["kernel"])
        else:  # pragma: no cover - builder only emits known ops
            raise GraphError(f"unknown op {op!r} at node {i}")
    return values


def _needed(graph: Graph, out_id: int, seed_ids: set[int]) -> np.ndarray:
    """Mask of nodes lying on a path from any seed input to the output."""
    reach = np.zeros(len(graph.nodes), dtype=bool)
    for nid in seed_ids:
        reach[nid] = True
    for i, node in enumerate(graph.nodes):
        if node.inputs and any(reach[j] for j in node.inputs):
            reach[i] = True
    used = np.zeros(len(graph.nodes), dtype=bool)
    used[out_id] = True
    for i in range(out_id, -1, -1):
        if used[i]:
            for j in graph.nodes[i].inputs:
                used[j] = True
    return reach & used


def _backward(
    graph: Graph,
    values: list[np.ndarray],
    out_id: int,
    seed_ids: set[int],
) -> dict[int, np.ndarray]:
    if graph.nodes[out_id].shape != ():
        raise GraphError(
            f"backward requires a scalar output node, got shape"
            f" {graph.nodes[out_id].shape} at node {out_id}"
        )
    active = _needed(graph, out_id, seed_ids)
    grads: dict[int, np.ndarray] = {out_id: np.asarray(1.0)}

    def _acc(nid: int, g: np.ndarray) -> None:
        if not active[nid]:
            return
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g

    for i in range(out_id, -1, -1):
        if i not in grads or not active[i]:
            continue
        node = graph.nodes[i]
        g = grads[i]
        op = node.op
        if op in ("input", "const"):
            continue
        ia = node.inputs[0]
        if op == "add":
            ib = node.inputs[1]
            _acc(ia, _unbroadcast(g, graph.nodes[ia].shape))
            _acc(ib, _unbroadcast(g, graph.nodes[ib].shape))
        elif op == "mul":
            ib = node.inputs[1]
            _acc(ia, _unbroadcast(g * values[ib], graph.nodes[ia].shape))
            _acc(ib, _unbroadcast(g * values[ia], graph.nodes[ib].shape))
        elif op == "scalar_mul":
            _acc(ia, g * node.attrs["c"])
        elif op == "matmul":
            ib = node.inputs[1]
            a, b = values[ia], values[ib]
            if a.ndim == 1:
                _acc(ia, g @ b.T)
                _acc(ib, np.outer(a, g))
            else:
                _acc(ia, g @ b.T)
                _acc(ib, a.T @ g)
        elif op == "tanh":
            _acc(ia, g * (1.0 - values[i] ** 2))
        elif op == "sigmoid":
            s = values[i]
            _acc(ia, g * s * (1.0 - s))
        elif op == "relu":
            _acc(ia, g * (values[ia] > 0.0))
        elif op == "abs":
            _acc(ia, g * np.sign(values[ia]))
        elif op == "clamp":
            x = values[ia]
            mask = (x >= node.attrs["lo"]) & (x <= node.attrs["hi"])
            _acc(ia, g * mask)
        elif op == "reshape":
            _acc(ia, g.reshape(graph.nodes[ia].shape))
        elif op == "sum":
            _acc(ia, np.broadcast_to(g, graph.nodes[ia].shape).copy())
        elif op == "softmax_ce":
            z = values[ia]
            lab = node.attrs["labels"]
            p = np.exp(_log_softmax(z))
            if z.ndim == 1:
                p[int(lab)] -= 1.0
                _acc(ia, g * p)
            else:
                p[np.arange(z.shape[0]), lab] -= 1.0
                _acc(ia, g * p / z.shape[0])
        elif op == "kl_softmax":
            ib = node.inputs[1]
            zp, zq = values[ia], values[ib]
            lp, lq = _log_softmax(zp), _log_softmax(zq)
            p, q = np.exp(lp), np.exp(lq)
            diff = np.where(p > 0.0, lp - lq, 0.0)
            rows = (np.where(p > 0.0, p * diff, 0.0)).sum(axis=-1, keepdims=True)
            n = zp.shape[0] if zp.ndim == 2 else 1
            _acc(ia, g * p * (diff - rows) / n)
            _acc(ib, g * (q - p) / n)
        elif op == "conv2d":
            k = node.attrs["kernel"]
            _acc(ia, _conv2d_same(g, k[::-1, ::-1]))
        else:  # pragma: no cover
            raise GraphError(f"unknown op {op!r} at node {i}")
    return grads


def forward_eval(graph: Graph, inputs, outputs=None) -> dict[str, Tensor]:
    """Evaluate the graph on bound inputs and return the requested outputs.

    `outputs` defaults to every node registered via `mark_output`; it may
    also be a list of output names.  Pure: no state is mutated.
    """
    bound = _bind(graph, inputs)
    values = _forward(graph, bound)
    names = list(graph._output_ids) if outputs is None else list(outputs)
    if not names:
        raise GraphError("graph has no marked outputs and none were requested")
    result = {}
    for name in names:
        nid = graph._resolve(name)
        result[name] = Tensor(values[nid])
    return result


def backward_grad(graph: Graph, output, inputs, wrt) -> dict[str, Tensor]:
    """Gradient of a scalar output node with respect to named inputs.

    Inputs that do not reach the output get a zero gradient of their shape.
    """
    _, grads = value_and_grad(graph, output, inputs, wrt)
    return {name: Tensor(g) for name, g in grads.items()}


def value_and_grad(graph: Graph, output, inputs, wrt):
    """Array-level companion of `backward_grad`; returns (value, grads)."""
    out_id = graph._resolve(output)
    wrt = list(wrt)
    seed_ids = set()
    for name in wrt:
        if name not in graph._input_ids:
            raise GraphError(f"wrt: {name!r} is not an input of this graph")
        seed_ids.add(graph._input_ids[name])
    bound = _bind(graph, inputs)
    values = _forward(graph, bound)
    grads = _backward(graph, values, out_id, seed_ids)
    out = {}
    for name in wrt:
        nid = graph._input_ids[name]
        out[name] = grads.get(nid, np.zeros(graph.nodes[nid].shape))
    return float(values[out_id]), out


def eval_with_grad(graph: Graph, inputs, output, wrt, extras=()):
    """One forward plus one backward pass, also reporting extra node values.

    Returns (value, grads: dict name->ndarray, extras: dict name->ndarray).
    The attack loops use this to read logits or crafted images from the same
    forward pass that produced the gradient.
    """
    out_id = graph._resolve(output)
    seed_ids = {graph._input_ids[name] for name in wrt}
    bound = _bind(graph, inputs)
    values = _forward(graph, bound)
    grads = _backward(graph, values, out_id, seed_ids)
    gout = {
        name: grads.get(
            graph._input_ids[name], np.zeros(graph.nodes[graph._input_ids[name]].shape)
        )
        for name in wrt
    }
    extra_vals = {name: values[graph._resolve(name)] for name in extras}
    return float(values[out_id]), gout, extra_vals


def finite_diff_grad(graph: Graph, output, inputs, wrt: str, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate, one coordinate at a time.

    Test oracle only: costs two forward passes per coordinate of `wrt`.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    out_id = graph._resolve(output)
    if graph.nodes[out_id].shape != ():
        raise GraphError("finite_diff_grad requires a scalar output node")
    if wrt not in graph._input_ids:
        raise GraphError(f"wrt: {wrt!r} is not an input of this graph")
    base = _as_array(inputs[wrt]).copy()
    bound = {k: _as_array(v) for k, v in inputs.items()}
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        bound[wrt] = base
        hi = float(_forward(graph, _bind(graph, bound))[out_id])
        flat[i] = orig - h
        lo = float(_forward(graph, _bind(graph, bound))[out_id])
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad)


# -- sign and projections ------------------------------------------------------


def sign(t) -> Tensor:
    """Entrywise sign with sign(0) = 0."""
    return Tensor(np.sign(_as_array(t)))


def project_array(v: np.ndarray, norm: str, radius: float) -> np.ndarray:
    """Euclidean-nearest point of the closed `norm`-ball of given radius.

    Array-level fast path used by the attack loops; `project_ball` is the
    Tensor-facing wrapper.  Points already inside the ball (up to BALL_TOL)
    are returned unchanged, which makes the projection bitwise idempotent.
    """
    if not radius > 0:
        raise ValueError(f"project: radius must be positive, got {radius}")
    v = np.asarray(v, dtype=np.float64)
    if norm == "linf":
        return np.clip(v, -radius, radius)
    if norm == "l2":
        n = float(np.sqrt((v * v).sum()))
        if n <= radius + BALL_TOL:
            return v
        return v * (radius / n)
    if norm == "l1":
        a = np.abs(v)
        if float(a.sum()) <= radius + BALL_TOL:
            return v
        # Duchi et al. sort-and-threshold projection of |v| onto the simplex.
        u = np.sort(a.reshape(-1))[::-1]
        css = np.cumsum(u)
        idx = np.arange(1, u.size + 1)
        rho = int(np.nonzero(u * idx > (css - radius))[0][-1])
        theta = (css[rho] - radius) / (rho + 1.0)
        return np.sign(v) * np.maximum(a - theta, 0.0)
    raise ValueError(f"project: unknown norm {norm!r}")


def project_ball(v, norm: str, radius: float) -> Tensor:
    """Project a tensor onto the closed linf/l2/l1 ball of the given radius."""
    return Tensor(project_array(_as_array(v), norm, radius))
