"""Loss terms driving pixel optimization.

Per selected layer, the content term penalizes squared activation
differences (normalized by 2*N*M) and the texture term penalizes squared
Gram-matrix differences (normalized by 2*N^2); the Gram matrix is the
location-averaged co-activation of filter pairs, G = A A^T / (N*M).
Stream losses sum their layer terms; the total adds both streams plus an
anisotropic total-variation penalty on the generated frame.

Each loss exists twice: as a plain-numpy function over activation
matrices (target statistics, reporting, tests) and as a graph builder so
pixel gradients flow to the generated frame. Terms whose weight is zero
are never built.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .spatial import ActivationMap, SpatialNetwork, build_spatial_graph
from .temporal import TemporalNetwork, build_temporal_graph


class ObjectiveError(ValueError):
    """Raised for mismatched activation shapes or missing targets."""


@dataclass(frozen=True)
class GramMatrix:
    """Normalized filter co-activation summary of one layer."""

    layer: str
    matrix: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """Term weights; a zero-weight term is never evaluated."""

    spatial_content: float = 0.0
    spatial_texture: float = 1.0
    temporal_content: float = 0.0
    temporal_texture: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ObjectiveError(f"loss weight {f.name} must be nonnegative")

    @property
    def active_terms(self) -> tuple:
        return tuple(f.name for f in fields(self) if getattr(self, f.name) > 0)


TERMS = ("spatial_content", "spatial_texture", "temporal_content", "temporal_texture")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term scalars; parts are unweighted, total carries the weights."""

    spatial_content: float = 0.0
    spatial_texture: float = 0.0
    temporal_content: float = 0.0
    temporal_texture: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# Plain-numpy reference implementations
# ---------------------------------------------------------------------------

def _as_matrix(a) -> np.ndarray:
    m = a.matrix if isinstance(a, ActivationMap) else np.asarray(a)
    if m.ndim != 2:
        raise ObjectiveError(f"activation matrix must be 2-d, got shape {m.shape}")
    return m


def content_loss(a, a_hat) -> float:
    """Mean squared activation difference, 1/(2*N*M) * sum((A - A_hat)^2)."""
    m, mh = _as_matrix(a), _as_matrix(a_hat)
    if m.shape != mh.shape:
        raise ObjectiveError(f"activation shapes differ: {m.shape} vs {mh.shape}")
    n, loc = m.shape
    diff = m.astype(np.float64) - mh.astype(np.float64)
    return float((diff * diff).sum() / (2.0 * n * loc))


def gram_matrix(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    n, loc = m.shape
    return (m @ m.T) / (n * loc)


def gram(a) -> GramMatrix:
    m = _as_matrix(a)
    layer = a.layer if isinstance(a, ActivationMap) else ""
    return GramMatrix(layer=layer, matrix=gram_matrix(m))


def texture_loss(a, a_hat) -> float:
    """Squared Gram difference, 1/(2*N^2) * sum((G - G_hat)^2)."""
    m, mh = _as_matrix(a), _as_matrix(a_hat)
    if m.shape[0] != mh.shape[0]:
        raise ObjectiveError(
            f"filter counts differ: {m.shape[0]} vs {mh.shape[0]}")
    n = m.shape[0]
    diff = gram_matrix(m) - gram_matrix(mh)
    return float((diff * diff).sum() / (2.0 * n * n))


def tv_loss(frame: np.ndarray) -> float:
    """Anisotropic total variation over in-bounds neighbor pairs, / (H*W*C)."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    h, w, c = f.shape
    if h < 2 or w < 2:
        raise ObjectiveError(f"TV needs at least 2x2 frames, got {h}x{w}")
    vert = np.abs(f[1:, :, :] - f[:-1, :, :]).sum()
    horiz = np.abs(f[:, 1:, :] - f[:, :-1, :]).sum()
    return float((vert + horiz) / (h * w * c))


# ---------------------------------------------------------------------------
# Graph builders
# ---------------------------------------------------------------------------

def content_node(a: ad.Node, target: ad.Node) -> ad.Node:
    if a.shape != target.shape:
        raise ObjectiveError(f"activation shapes differ: {a.shape} vs {target.shape}")
    n, loc = a.shape
    return ad.scale(ad.reduce_sum(ad.square(ad.sub(a, target))), 1.0 / (2.0 * n * loc))


def gram_node(a: ad.Node) -> ad.Node:
    n, loc = a.shape
    return ad.scale(ad.matmul(a, ad.transpose2d(a)), 1.0 / (n * loc))


def texture_node(a: ad.Node, target_gram: ad.Node) -> ad.Node:
    n = a.shape[0]
    if target_gram.shape != (n, n):
        raise ObjectiveError(
            f"target Gram shape {target_gram.shape} does not match {n} filters")
    return ad.scale(ad.reduce_sum(ad.square(ad.sub(gram_node(a), target_gram))),
                    1.0 / (2.0 * n * n))


def tv_node(frame: ad.Node) -> ad.Node:
    h, w, c = frame.shape
    if h < 2 or w < 2:
        raise ObjectiveError(f"TV needs at least 2x2 frames, got {h}x{w}")
    vert = ad.reduce_sum(ad.abs_elem(ad.sub(ad.crop2d(frame, 1, h, 0, w),
                                            ad.crop2d(frame, 0, h - 1, 0, w))))
    horiz = ad.reduce_sum(ad.abs_elem(ad.sub(ad.crop2d(frame, 0, h, 1, w),
                                             ad.crop2d(frame, 0, h, 0, w - 1))))
    return ad.scale(ad.add(vert, horiz), 1.0 / (h * w * c))


@dataclass
class LossGraph:
    """A compiled total-loss graph for one working resolution.

    Leaves: ``g`` (generated frame), ``g_prev`` when temporal terms are
    active, plus one target-statistic leaf per term and layer
    (activations for content terms, Gram matrices for texture terms).
    """

    graph: ad.Graph
    target_leaves: dict[str, tuple]   # term -> tuple of (leaf_name, layer)
    has_temporal: bool
    hw: tuple


def build_loss_graph(spatial_net: SpatialNetwork, temporal_net: TemporalNetwork | None,
                     weights: LossWeights, hw: tuple[int, int], tv_weight: float,
                     temporal_active: bool = True) -> LossGraph:
    h, w = hw
    g = ad.leaf("g", (h, w, 3))
    terms: dict[str, ad.Node] = {}
    target_leaves: dict[str, tuple] = {}

    spatial_terms = [t for t in ("spatial_content", "spatial_texture")
                     if getattr(weights, t) > 0]
    temporal_terms = [t for t in ("temporal_content", "temporal_texture")
                      if getattr(weights, t) > 0] if temporal_active else []

    if spatial_terms:
        acts = build_spatial_graph(spatial_net, g)
        for term in spatial_terms:
            pieces = []
            leaves = []
            for layer in spatial_net.selected:
                a = acts[layer]
                if term == "spatial_content":
                    tgt = ad.leaf(f"target.{term}.{layer}", a.shape)
                    pieces.append(content_node(a, tgt))
                else:
                    n = a.shape[0]
                    tgt = ad.leaf(f"target.{term}.{layer}", (n, n))
                    pieces.append(texture_node(a, tgt))
                leaves.append((tgt.name, layer))
            terms[term] = ad.add(*pieces) if len(pieces) > 1 else pieces[0]
            target_leaves[term] = tuple(leaves)

    has_temporal = bool(temporal_terms)
    if has_temporal:
        if temporal_net is None:
            raise ObjectiveError("temporal terms are active but no temporal network given")
        g_prev = ad.leaf("g_prev", (h, w, 3))
        concat = build_temporal_graph(temporal_net, g, g_prev)
        for term in temporal_terms:
            if term == "temporal_content":
                tgt = ad.leaf(f"target.{term}.concat", concat.shape)
                terms[term] = content_node(concat, tgt)
            else:
                n = concat.shape[0]
                tgt = ad.leaf(f"target.{term}.concat", (n, n))
                terms[term] = texture_node(concat, tgt)
            target_leaves[term] = ((tgt.name, "concat"),)

    parts = []
    for term, node in terms.items():
        parts.append(ad.scale(node, getattr(weights, term)))
    outputs = dict(terms)
    if tv_weight > 0:
        tv = tv_node(g)
        outputs["tv"] = tv
        parts.append(ad.scale(tv, tv_weight))
    if parts:
        total = ad.add(*parts) if len(parts) > 1 else parts[0]
    else:
        total = ad.const(np.asarray(0.0, dtype=np.float64))
    outputs["total"] = total
    return LossGraph(graph=ad.Graph(total, outputs=outputs),
                     target_leaves=target_leaves, has_temporal=has_temporal, hw=hw)


def breakdown_from_outputs(values: dict[str, np.ndarray]) -> LossBreakdown:
    def val(key):
        v = values.get(key)
        return float(v) if v is not None else 0.0
    return LossBreakdown(
        spatial_content=val("spatial_content"),
        spatial_texture=val("spatial_texture"),
        temporal_content=val("temporal_content"),
        temporal_texture=val("temporal_texture"),
        tv=val("tv"),
        total=val("total"),
    )


def _spatial_stat_graph(spatial_net: SpatialNetwork, hw: tuple,
                        stat_cache: dict | None) -> ad.Graph:
    key = ("spatial", hw)
    graph = stat_cache.get(key) if stat_cache is not None else None
    if graph is None:
        leaf = ad.leaf("frame", (hw[0], hw[1], 3))
        nodes = build_spatial_graph(spatial_net, leaf)
        graph = ad.Graph(ad.reduce_sum(nodes[spatial_net.selected[0]]), outputs=nodes)
        if stat_cache is not None:
            stat_cache[key] = graph
    return graph


def _temporal_stat_graph(temporal_net: TemporalNetwork, hw: tuple,
                         stat_cache: dict | None) -> ad.Graph:
    key = ("temporal", hw)
    graph = stat_cache.get(key) if stat_cache is not None else None
    if graph is None:
        f_leaf = ad.leaf("frame", (hw[0], hw[1], 3))
        p_leaf = ad.leaf("frame_prev", (hw[0], hw[1], 3))
        node = build_temporal_graph(temporal_net, f_leaf, p_leaf)
        graph = ad.Graph(ad.reduce_sum(node), outputs={"concat": node})
        if stat_cache is not None:
            stat_cache[key] = graph
    return graph


def target_statistics(loss_graph: LossGraph, spatial_net: SpatialNetwork,
                      temporal_net: TemporalNetwork | None,
                      term_targets: dict[str, tuple],
                      stat_cache: dict | None = None) -> dict[str, np.ndarray]:
    """Evaluate per-term target activations/Grams for one frame.

    ``term_targets`` maps an active term to its (frame, frame_prev)
    target pair at the working resolution (frame_prev may be None for
    spatial terms). Returns leaf bindings for the loss graph. stat_cache,
    when given, reuses the target-side activation graphs across frames.
    """
    bindings: dict[str, np.ndarray] = {}
    spatial_cache: dict[int, dict[str, np.ndarray]] = {}
    temporal_cache: dict[tuple, np.ndarray] = {}

    for term, leaves in loss_graph.target_leaves.items():
        if term not in term_targets:
            raise ObjectiveError(f"active loss term {term!r} has no assigned target")
        frame, frame_prev = term_targets[term]
        if term.startswith("spatial"):
            key = id(frame)
            acts = spatial_cache.get(key)
            if acts is None:
                graph = _spatial_stat_graph(spatial_net, frame.shape[:2], stat_cache)
                graph.forward({"frame": frame})
                acts = graph.output_values()
                spatial_cache[key] = acts
            for leaf_name, layer in leaves:
                if term == "spatial_content":
                    bindings[leaf_name] = acts[layer]
                else:
                    bindings[leaf_name] = gram_matrix(acts[layer]).astype(np.float32)
        else:
            if frame_prev is None:
                raise ObjectiveError(
                    f"temporal term {term!r} needs the previous target frame")
            key = (id(frame), id(frame_prev))
            concat = temporal_cache.get(key)
            if concat is None:
                graph = _temporal_stat_graph(temporal_net, frame.shape[:2], stat_cache)
                graph.forward({"frame": frame, "frame_prev": frame_prev})
                concat = graph.output_values()["concat"]
                temporal_cache[key] = concat
            leaf_name = leaves[0][0]
            if term == "temporal_content":
                bindings[leaf_name] = concat
            else:
                bindings[leaf_name] = gram_matrix(concat).astype(np.float32)
    return bindings


def total_loss(term_targets: dict[str, tuple], g_t: np.ndarray,
               g_prev: np.ndarray | None, spatial_net: SpatialNetwork,
               temporal_net: TemporalNetwork | None, weights: LossWeights,
               tv_weight: float = 0.0) -> LossBreakdown:
    """Evaluate the full objective for one generated frame.

    ``term_targets`` maps each active term name to (frame, frame_prev)
    numpy arrays; temporal terms require both members and ``g_prev``.
    """
    g_t = np.asarray(g_t, dtype=np.float32)
    temporal_active = g_prev is not None
    lg = build_loss_graph(spatial_net, temporal_net, weights, g_t.shape[:2],
                          tv_weight, temporal_active=temporal_active)
    for term in weights.active_terms:
        if term.startswith("temporal") and not temporal_active:
            continue
        if term not in term_targets:
            raise ObjectiveError(f"active loss term {term!r} has no assigned target")
    bindings = target_statistics(lg, spatial_net, temporal_net,
                                 {t: term_targets[t] for t in lg.target_leaves})
    bindings["g"] = g_t
    if lg.has_temporal:
        bindings["g_prev"] = np.asarray(g_prev, dtype=np.float32)
    lg.graph.forward(bindings)
    return breakdown_from_outputs(lg.graph.output_values())
