"""Reverse-mode differentiation over an explicit operation graph.

Graphs are built once per working resolution and re-evaluated many times
with fresh leaf bindings, which is the access pattern of the per-octave
optimization loop. Only pixel leaves ever receive gradients; convolution
weights are baked into the graph as constants with their forward and
adjoint matmul operands precomputed.

Tensors are float32 throughout; sum/mean reductions emit float64 scalars
so loss values stay precise enough for finite-difference checks.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .kernels import F32


class GraphError(ValueError):
    """Raised for malformed graphs or mismatched evaluation inputs."""


class Node:
    """One operation in the graph. Parents always precede children."""

    __slots__ = ("op", "parents", "params", "shape", "name")

    def __init__(self, op: str, parents: list["Node"], params: dict, shape: tuple,
                 name: str | None = None):
        self.op = op
        self.parents = parents
        self.params = params
        self.shape = tuple(int(s) for s in shape)
        self.name = name

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Node {self.op}{tag} {self.shape}>"


def _label(node: Node) -> str:
    return f"{node.op}" + (f" {node.name!r}" if node.name else "")


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def leaf(name: str, shape: tuple) -> Node:
    return Node("leaf", [], {}, shape, name=name)


def const(value: np.ndarray, name: str | None = None) -> Node:
    value = np.asarray(value)
    if value.dtype not in (np.float32, np.float64):
        value = np.ascontiguousarray(value, dtype=F32)
    return Node("const", [], {"value": value}, value.shape, name=name)


def _require(cond: bool, msg: str):
    if not cond:
        raise GraphError(msg)


def add(*terms: Node, name: str | None = None) -> Node:
    _require(len(terms) >= 1, "add needs at least one term")
    shape = terms[0].shape
    for t in terms[1:]:
        _require(t.shape == shape, f"shape mismatch at node add: {t.shape} vs {shape}")
    return Node("add", list(terms), {}, shape, name=name)


def sub(a: Node, b: Node) -> Node:
    _require(a.shape == b.shape, f"shape mismatch at node sub: {a.shape} vs {b.shape}")
    return Node("sub", [a, b], {}, a.shape)


def scale(x: Node, c: float, name: str | None = None) -> Node:
    return Node("scale", [x], {"c": float(c)}, x.shape, name=name)


def square(x: Node) -> Node:
    return Node("square", [x], {}, x.shape)


def relu(x: Node) -> Node:
    return Node("relu", [x], {}, x.shape)


def abs_elem(x: Node) -> Node:
    return Node("abs", [x], {}, x.shape)


def conv2d(x: Node, weight: np.ndarray, bias: np.ndarray | None,
           pad_mode: str = "zero", name: str | None = None) -> Node:
    """Correlate (H, W, Cin) with weight [out, in, kh, kw]; size-preserving."""
    _require(len(x.shape) == 3, f"conv2d input must be (H,W,C), got {x.shape} at node {name or 'conv2d'}")
    out_c, in_c, kh, kw = weight.shape
    _require(kh % 2 == 1 and kw % 2 == 1, f"conv2d kernel dims must be odd, got {kh}x{kw}")
    _require(x.shape[2] == in_c,
             f"shape mismatch at node conv2d {name or ''}: input has {x.shape[2]} channels, kernel expects {in_c}")
    _require(pad_mode in ("zero", "reflect"), f"unknown pad mode {pad_mode!r}")
    w_fwd, w_bwd = K.prepare_conv_weights(weight)
    b = None if bias is None else np.ascontiguousarray(bias, dtype=F32)
    params = {"w_fwd": w_fwd, "w_bwd": w_bwd, "bias": b, "kh": kh, "kw": kw, "pad": pad_mode}
    return Node("conv2d", [x], params, (x.shape[0], x.shape[1], out_c), name=name)


def conv_frame_pair(pair: Node, bank: np.ndarray, pad_mode: str = "reflect",
                    name: str | None = None) -> Node:
    """Spatiotemporal correlation of a 2-frame stack (H, W, 2) with a filter
    bank [K, 2, kh, kw]; the 2-sample temporal axis rides as channels."""
    _require(len(pair.shape) == 3 and pair.shape[2] == 2,
             f"frame-pair input must be (H,W,2), got {pair.shape}")
    _require(bank.ndim == 4 and bank.shape[1] == 2,
             f"filter bank must be [K,2,kh,kw], got {bank.shape}")
    return conv2d(pair, bank, None, pad_mode=pad_mode, name=name)


def maxpool2(x: Node) -> Node:
    _require(len(x.shape) == 3, f"maxpool2 input must be (H,W,C), got {x.shape}")
    return Node("maxpool2", [x], {}, (x.shape[0] // 2, x.shape[1] // 2, x.shape[2]))


def avgpool2(x: Node) -> Node:
    _require(len(x.shape) == 3, f"avgpool2 input must be (H,W,C), got {x.shape}")
    return Node("avgpool2", [x], {}, (x.shape[0] // 2, x.shape[1] // 2, x.shape[2]))


def concat_channels(parts: list[Node]) -> Node:
    _require(len(parts) >= 1, "concat needs at least one part")
    h, w = parts[0].shape[0], parts[0].shape[1]
    for p in parts:
        _require(len(p.shape) == 3 and (p.shape[0], p.shape[1]) == (h, w),
                 f"shape mismatch at node concat: {p.shape} vs ({h},{w},*)")
    c = sum(p.shape[2] for p in parts)
    return Node("concat", list(parts), {"splits": [p.shape[2] for p in parts]}, (h, w, c))


def divisive_norm(x: Node, eps: float) -> Node:
    """y_i = x_i / (sum_j x_j + eps) across the channel axis."""
    _require(len(x.shape) == 3, f"divisive_norm input must be (H,W,C), got {x.shape}")
    _require(eps > 0, "divisive_norm needs eps > 0")
    return Node("divnorm", [x], {"eps": float(eps)}, x.shape)


def resize_bilinear(x: Node, out_hw: tuple[int, int]) -> Node:
    _require(len(x.shape) == 3, f"resize input must be (H,W,C), got {x.shape}")
    mr = K.resize_matrix(x.shape[0], out_hw[0])
    mc = K.resize_matrix(x.shape[1], out_hw[1])
    params = {"mr": mr, "mc": mc, "mrt": np.ascontiguousarray(mr.T), "mct": np.ascontiguousarray(mc.T)}
    return Node("resize", [x], params, (out_hw[0], out_hw[1], x.shape[2]))


def grayscale(x: Node, coeffs=(0.299, 0.587, 0.114)) -> Node:
    """Project (H, W, 3) onto luminance, keeping a trailing channel axis."""
    _require(len(x.shape) == 3 and x.shape[2] == len(coeffs),
             f"grayscale input must be (H,W,{len(coeffs)}), got {x.shape}")
    c = np.asarray(coeffs, dtype=F32)
    return Node("gray", [x], {"coeffs": c}, (x.shape[0], x.shape[1], 1))


def channel_affine(x: Node, scale_c: np.ndarray, offset_c: np.ndarray) -> Node:
    """y[..., c] = x[..., c] * scale_c[c] + offset_c[c] (preprocessing)."""
    _require(len(x.shape) == 3, f"channel_affine input must be (H,W,C), got {x.shape}")
    s = np.ascontiguousarray(scale_c, dtype=F32)
    o = np.ascontiguousarray(offset_c, dtype=F32)
    _require(s.shape == (x.shape[2],) and o.shape == (x.shape[2],),
             "channel_affine constants must match the channel count")
    return Node("chaffine", [x], {"s": s, "o": o}, x.shape)


def as_filter_matrix(x: Node) -> Node:
    """Rearrange an (H, W, C) map into the (C, H*W) activation-matrix layout."""
    _require(len(x.shape) == 3, f"as_filter_matrix input must be (H,W,C), got {x.shape}")
    return Node("filtmat", [x], {"hwc": x.shape}, (x.shape[2], x.shape[0] * x.shape[1]))


def matmul(a: Node, b: Node) -> Node:
    _require(len(a.shape) == 2 and len(b.shape) == 2, "matmul operands must be 2-d")
    _require(a.shape[1] == b.shape[0],
             f"shape mismatch at node matmul: {a.shape} @ {b.shape}")
    return Node("matmul", [a, b], {}, (a.shape[0], b.shape[1]))


def transpose2d(x: Node) -> Node:
    _require(len(x.shape) == 2, "transpose2d operand must be 2-d")
    return Node("transpose", [x], {}, (x.shape[1], x.shape[0]))


def crop2d(x: Node, r0: int, r1: int, c0: int, c1: int) -> Node:
    _require(len(x.shape) == 3, f"crop2d input must be (H,W,C), got {x.shape}")
    _require(0 <= r0 < r1 <= x.shape[0] and 0 <= c0 < c1 <= x.shape[1],
             f"crop2d window ({r0}:{r1},{c0}:{c1}) outside {x.shape}")
    return Node("crop", [x], {"win": (r0, r1, c0, c1)}, (r1 - r0, c1 - c0, x.shape[2]))


def reduce_sum(x: Node, name: str | None = None) -> Node:
    return Node("sum", [x], {}, (), name=name)


def reduce_mean(x: Node, name: str | None = None) -> Node:
    return Node("mean", [x], {}, (), name=name)


# ---------------------------------------------------------------------------
# Forward / backward rules
# ---------------------------------------------------------------------------

def _forward(node: Node, pv: list[np.ndarray], leaves: dict, aux: dict,
             dtype: np.dtype) -> np.ndarray:
    op = node.op
    if op == "leaf":
        try:
            v = leaves[node.name]
        except KeyError:
            raise GraphError(f"no value bound for leaf {node.name!r}") from None
        v = np.ascontiguousarray(v, dtype=dtype)
        if v.shape != node.shape:
            raise GraphError(
                f"shape mismatch at node leaf {node.name!r}: expected {node.shape}, got {v.shape}")
        return v
    if op == "const":
        v = node.params["value"]
        if v.ndim > 0 and v.dtype != dtype:
            v = v.astype(dtype)
        return v
    if op == "add":
        out = pv[0].copy()
        for v in pv[1:]:
            out += v
        return out
    if op == "sub":
        return pv[0] - pv[1]
    if op == "scale":
        return pv[0] * node.params["c"]
    if op == "square":
        return pv[0] * pv[0]
    if op == "relu":
        return np.maximum(pv[0], 0)
    if op == "abs":
        return np.abs(pv[0])
    if op == "conv2d":
        p = node.params
        return K.conv2d_forward(pv[0], p["w_fwd"], p["bias"], p["kh"], p["kw"], p["pad"])
    if op == "maxpool2":
        y, idx = K.maxpool2_forward(pv[0])
        aux[id(node)] = idx
        return y
    if op == "avgpool2":
        return K.avgpool2_forward(pv[0])
    if op == "concat":
        return np.concatenate(pv, axis=2)
    if op == "divnorm":
        e = pv[0]
        denom = e.sum(axis=2, keepdims=True) + F32(node.params["eps"])
        aux[id(node)] = denom
        return e / denom
    if op == "resize":
        p = node.params
        return K.apply_resize(pv[0], p["mr"], p["mc"])
    if op == "gray":
        return (pv[0] @ node.params["coeffs"])[:, :, None]
    if op == "chaffine":
        return pv[0] * node.params["s"] + node.params["o"]
    if op == "filtmat":
        h, w, c = node.params["hwc"]
        return np.ascontiguousarray(pv[0].transpose(2, 0, 1).reshape(c, h * w))
    if op == "matmul":
        return pv[0] @ pv[1]
    if op == "transpose":
        return np.ascontiguousarray(pv[0].T)
    if op == "crop":
        r0, r1, c0, c1 = node.params["win"]
        return np.ascontiguousarray(pv[0][r0:r1, c0:c1])
    if op == "sum":
        return np.asarray(pv[0].sum(dtype=np.float64))
    if op == "mean":
        return np.asarray(pv[0].mean(dtype=np.float64))
    raise GraphError(f"unknown op {op!r}")


def _backward(node: Node, g: np.ndarray, pv: list[np.ndarray],
              v: np.ndarray, aux: dict) -> list[np.ndarray | None]:
    op = node.op
    if op in ("leaf", "const"):
        return []
    if op == "add":
        return [g] * len(node.parents)
    if op == "sub":
        return [g, -g]
    if op == "scale":
        return [g * node.params["c"]]
    if op == "square":
        return [2.0 * pv[0] * g]
    if op == "relu":
        return [np.where(pv[0] > 0, g, 0)]
    if op == "abs":
        return [np.sign(pv[0]) * g]
    if op == "conv2d":
        p = node.params
        return [K.conv2d_backward_input(np.ascontiguousarray(g),
                                        p["w_bwd"], p["kh"], p["kw"], p["pad"])]
    if op == "maxpool2":
        return [K.maxpool2_backward(g, aux[id(node)], node.parents[0].shape)]
    if op == "avgpool2":
        return [K.avgpool2_backward(g, node.parents[0].shape)]
    if op == "concat":
        outs = []
        start = 0
        for width in node.params["splits"]:
            outs.append(np.ascontiguousarray(g[:, :, start:start + width]))
            start += width
        return outs
    if op == "divnorm":
        denom = aux[id(node)]
        e = pv[0]
        dot = (g * e).sum(axis=2, keepdims=True)
        return [g / denom - dot / (denom * denom)]
    if op == "resize":
        p = node.params
        return [K.apply_resize(np.ascontiguousarray(g), p["mrt"], p["mct"])]
    if op == "gray":
        return [np.ascontiguousarray(g[:, :, 0:1] * node.params["coeffs"])]
    if op == "chaffine":
        return [g * node.params["s"]]
    if op == "filtmat":
        h, w, c = node.params["hwc"]
        return [np.ascontiguousarray(g.reshape(c, h, w).transpose(1, 2, 0))]
    if op == "matmul":
        a, b = pv
        return [np.ascontiguousarray(g @ b.T), np.ascontiguousarray(a.T @ g)]
    if op == "transpose":
        return [np.ascontiguousarray(g.T)]
    if op == "crop":
        r0, r1, c0, c1 = node.params["win"]
        dx = np.zeros(node.parents[0].shape, dtype=g.dtype)
        dx[r0:r1, c0:c1] = g
        return [dx]
    if op == "sum":
        return [np.full(node.parents[0].shape, g, dtype=pv[0].dtype)]
    if op == "mean":
        n = 1
        for s in node.parents[0].shape:
            n *= s
        return [np.full(node.parents[0].shape, g / n, dtype=pv[0].dtype)]
    raise GraphError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# Graph container
# ---------------------------------------------------------------------------

class Graph:
    """A root node plus optional named auxiliary outputs.

    forward() caches every intermediate value so backward() can run;
    one Graph instance serves one synthesis job at a time. The default
    element type is float32; float64 graphs exist for the
    finite-difference oracle, where float32 forward noise would swamp
    central differences.
    """

    def __init__(self, root: Node, outputs: dict[str, Node] | None = None,
                 dtype=np.float32):
        self.root = root
        self.dtype = np.dtype(dtype)
        self.outputs = dict(outputs or {})
        self.nodes: list[Node] = []
        self._index: dict[int, int] = {}
        sinks = [root] + list(self.outputs.values())
        for s in sinks:
            self._collect(s)
        self.leaves = {n.name: n for n in self.nodes if n.op == "leaf"}
        self._values: list[np.ndarray] | None = None
        self._aux: dict[int, np.ndarray] = {}
        self._dep_cache: dict[str, np.ndarray] = {}

    def _collect(self, node: Node):
        if id(node) in self._index:
            return
        stack = [(node, False)]
        while stack:
            n, done = stack.pop()
            if id(n) in self._index:
                continue
            if done:
                self._index[id(n)] = len(self.nodes)
                self.nodes.append(n)
            else:
                stack.append((n, True))
                for p in reversed(n.parents):
                    if id(p) not in self._index:
                        stack.append((p, False))

    # -- evaluation ---------------------------------------------------------

    def forward(self, leaf_values: dict[str, np.ndarray]) -> np.ndarray:
        for name in leaf_values:
            if name not in self.leaves:
                raise GraphError(f"unknown leaf {name!r}")
        self._aux.clear()
        values: list[np.ndarray] = []
        for n in self.nodes:
            pv = [values[self._index[id(p)]] for p in n.parents]
            values.append(_forward(n, pv, leaf_values, self._aux, self.dtype))
        self._values = values
        return values[self._index[id(self.root)]]

    def output_values(self) -> dict[str, np.ndarray]:
        if self._values is None:
            raise GraphError("forward() has not been run")
        return {k: self._values[self._index[id(n)]] for k, n in self.outputs.items()}

    def value_of(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward() has not been run")
        return self._values[self._index[id(node)]]

    def _depends_on(self, leaf_name: str) -> np.ndarray:
        mask = self._dep_cache.get(leaf_name)
        if mask is None:
            mask = np.zeros(len(self.nodes), dtype=bool)
            for i, n in enumerate(self.nodes):
                if n.op == "leaf" and n.name == leaf_name:
                    mask[i] = True
                elif any(mask[self._index[id(p)]] for p in n.parents):
                    mask[i] = True
            self._dep_cache[leaf_name] = mask
        return mask

    def backward(self, leaf_name: str) -> np.ndarray:
        if self._values is None:
            raise GraphError("backward() before forward()")
        if self.root.shape != ():
            raise GraphError(f"backward needs a scalar root, got shape {self.root.shape}")
        if leaf_name not in self.leaves:
            raise GraphError(f"unknown leaf {leaf_name!r}")
        mask = self._depends_on(leaf_name)
        root_i = self._index[id(self.root)]
        if not mask[root_i]:
            return np.zeros(self.leaves[leaf_name].shape, dtype=self.dtype)
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root_i] = np.asarray(1.0, dtype=np.float64)
        for i in range(len(self.nodes) - 1, -1, -1):
            g = grads[i]
            if g is None or not mask[i]:
                continue
            n = self.nodes[i]
            if n.op in ("leaf", "const"):
                continue
            pv = [self._values[self._index[id(p)]] for p in n.parents]
            pgrads = _backward(n, g, pv, self._values[i], self._aux)
            for p, pg in zip(n.parents, pgrads):
                if pg is None:
                    continue
                j = self._index[id(p)]
                if not mask[j]:
                    continue
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        out = grads[self._index[id(self.leaves[leaf_name])]]
        if out is None:
            return np.zeros(self.leaves[leaf_name].shape, dtype=self.dtype)
        return np.ascontiguousarray(out, dtype=self.dtype)

    def relu_sign_pattern(self, leaf_values: dict[str, np.ndarray]) -> np.ndarray:
        """Concatenated rectifier input signs; used to spot kink crossings."""
        self.forward(leaf_values)
        signs = []
        for i, n in enumerate(self.nodes):
            if n.op == "relu":
                signs.append((self._values[self._index[id(n.parents[0])]] > 0).ravel())
        if not signs:
            return np.zeros(0, dtype=bool)
        return np.concatenate(signs)


# ---------------------------------------------------------------------------
# Spec-level entry points
# ---------------------------------------------------------------------------

def forward_eval(graph: Graph, leaf_values: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate the graph root, caching intermediates for backward_grad."""
    return graph.forward(leaf_values)


def backward_grad(graph: Graph, leaf_name: str) -> np.ndarray:
    """Gradient of the (scalar) root with respect to one leaf."""
    return graph.backward(leaf_name)


def finite_difference_check(graph: Graph, leaf_values: dict[str, np.ndarray],
                            leaf_name: str, h: float = 1e-3,
                            skip_kinks: bool = True) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error per element is |analytic - central| / (|central| + 1e-8).
    Elements whose +-h probes land on different rectifier activation
    patterns straddle a kink and are excluded (the convention also covers
    a rectifier input sitting exactly at 0, whose subgradient is defined
    as 0 here).
    """
    if h <= 0:
        raise GraphError("finite-difference step must be positive")
    graph.forward(leaf_values)
    analytic = graph.backward(leaf_name).astype(np.float64)
    base = np.ascontiguousarray(leaf_values[leaf_name], dtype=graph.dtype)
    flat = base.ravel()
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        if skip_kinks:
            pat_plus = graph.relu_sign_pattern({**leaf_values, leaf_name: base})
            l_plus = float(graph.value_of(graph.root))
        else:
            l_plus = float(graph.forward({**leaf_values, leaf_name: base}))
        flat[i] = orig - h
        if skip_kinks:
            pat_minus = graph.relu_sign_pattern({**leaf_values, leaf_name: base})
            l_minus = float(graph.value_of(graph.root))
        else:
            l_minus = float(graph.forward({**leaf_values, leaf_name: base}))
        flat[i] = orig
        if skip_kinks and not np.array_equal(pat_plus, pat_minus):
            continue
        central = (l_plus - l_minus) / (2.0 * h)
        err = abs(analytic.ravel()[i] - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst
