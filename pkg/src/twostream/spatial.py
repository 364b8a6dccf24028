"""Per-frame appearance stream: a VGG-19-style convolutional stack.

The layer plan runs the stock VGG-19 widths up to conv5_1, the deepest
layer the texture objective touches; nothing past it is instantiated.
Weights come either from an archive (names ``vgg.<layer>.weight`` with
shape [out, in, 3, 3] and ``vgg.<layer>.bias``) or from a seeded He
initializer for self-contained tests. Preprocessing constants (per-channel
mean/std applied to [0,1] RGB input) are archive metadata, not code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .archive import ArchiveError, TensorArchive

# (name, width) conv stages interleaved with ("pool", 0) markers.
VGG19_STAGES: tuple = (
    ("conv1_1", 64), ("conv1_2", 64), ("pool", 0),
    ("conv2_1", 128), ("conv2_2", 128), ("pool", 0),
    ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256), ("conv3_4", 256), ("pool", 0),
    ("conv4_1", 512), ("conv4_2", 512), ("conv4_3", 512), ("conv4_4", 512), ("pool", 0),
    ("conv5_1", 512),
)

# Reduced plan for desk-scale runs and self-contained tests.
SMALL_STAGES: tuple = (
    ("conv1_1", 16), ("conv1_2", 16), ("pool", 0),
    ("conv2_1", 32), ("conv2_2", 32), ("pool", 0),
    ("conv3_1", 64),
)

PLANS = {"vgg19": VGG19_STAGES, "small": SMALL_STAGES}
DEFAULT_LAYERS = ("conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1")


class SpatialStreamError(ValueError):
    """Raised for plan/weight mismatches or invalid inputs."""


@dataclass(frozen=True)
class ActivationMap:
    """Post-rectification responses of one layer, as (filters, locations)."""

    layer: str
    matrix: np.ndarray

    @property
    def n_filters(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_locations(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SpatialNetwork:
    stages: tuple
    weights: dict
    mean: np.ndarray
    std: np.ndarray
    selected: tuple
    pooling: str = "max"

    @property
    def conv_names(self) -> tuple:
        return tuple(name for name, _ in self.stages if name != "pool")

    def stride_of(self, layer: str) -> int:
        stride = 1
        for name, _ in self.stages:
            if name == "pool":
                stride *= 2
            elif name == layer:
                return stride
        raise SpatialStreamError(f"unknown layer {layer!r}")


def _check_selected(stages, selected) -> tuple:
    names = {name for name, _ in stages if name != "pool"}
    out = tuple(selected)
    for layer in out:
        if layer not in names:
            raise SpatialStreamError(f"selected layer {layer!r} not in the layer plan")
    if not out:
        raise SpatialStreamError("at least one layer must be selected")
    return out


def load_spatial_network(archive: TensorArchive, selected=DEFAULT_LAYERS,
                         pooling: str = "max", plan: str = "vgg19") -> SpatialNetwork:
    """Validate archive weights against the layer plan and attach preprocessing."""
    if plan not in PLANS:
        raise SpatialStreamError(f"unknown layer plan {plan!r}")
    stages = PLANS[plan]
    selected = _check_selected(stages, selected)
    if pooling not in ("max", "avg"):
        raise SpatialStreamError(f"pooling must be 'max' or 'avg', got {pooling!r}")
    weights = {}
    in_c = 3
    for name, width in stages:
        if name == "pool":
            continue
        try:
            w = archive.require(f"vgg.{name}.weight")
            b = archive.require(f"vgg.{name}.bias")
        except ArchiveError as exc:
            raise SpatialStreamError(str(exc)) from exc
        if w.shape != (width, in_c, 3, 3):
            raise SpatialStreamError(
                f"layer {name}: weight shape {w.shape} does not match plan "
                f"({width}, {in_c}, 3, 3)")
        if b.shape != (width,):
            raise SpatialStreamError(
                f"layer {name}: bias shape {b.shape} does not match plan ({width},)")
        weights[name] = (w, b)
        in_c = width
    mean = _meta_floats(archive.metadata, "vgg.preprocess.mean", (0.0, 0.0, 0.0))
    std = _meta_floats(archive.metadata, "vgg.preprocess.std", (1.0, 1.0, 1.0))
    if np.any(std <= 0):
        raise SpatialStreamError("preprocessing std must be positive")
    return SpatialNetwork(stages=stages, weights=weights, mean=mean, std=std,
                          selected=selected, pooling=pooling)


def _meta_floats(metadata: dict, key: str, default) -> np.ndarray:
    raw = metadata.get(key)
    if raw is None:
        return np.asarray(default, dtype=np.float32)
    try:
        vals = [float(v) for v in raw.split(",")]
    except ValueError as exc:
        raise SpatialStreamError(f"metadata {key} is not a float list: {raw!r}") from exc
    return np.asarray(vals, dtype=np.float32)


def synthetic_spatial_network(plan: str = "vgg19", seed: int = 0,
                              selected=None, pooling: str = "max") -> SpatialNetwork:
    """He-initialized random weights, zero biases, identity preprocessing."""
    if plan not in PLANS:
        raise SpatialStreamError(f"unknown layer plan {plan!r}")
    stages = PLANS[plan]
    if selected is None:
        conv_names = [n for n, _ in stages if n != "pool"]
        selected = tuple(n for n in DEFAULT_LAYERS if n in conv_names)
    selected = _check_selected(stages, selected)
    rng = np.random.default_rng(seed)
    weights = {}
    in_c = 3
    for name, width in stages:
        if name == "pool":
            continue
        fan_in = in_c * 9
        w = rng.standard_normal((width, in_c, 3, 3)).astype(np.float32)
        w *= np.float32(np.sqrt(2.0 / fan_in))
        weights[name] = (w, np.zeros(width, dtype=np.float32))
        in_c = width
    return SpatialNetwork(stages=stages, weights=weights,
                          mean=np.zeros(3, np.float32), std=np.ones(3, np.float32),
                          selected=selected, pooling=pooling)


def spatial_network_archive(net: SpatialNetwork) -> TensorArchive:
    """Serialize a network back into archive form (used by tests/fixtures)."""
    archive = TensorArchive()
    for name in net.conv_names:
        w, b = net.weights[name]
        archive.add(f"vgg.{name}.weight", w)
        archive.add(f"vgg.{name}.bias", b)
    archive.metadata["vgg.preprocess.mean"] = ",".join(f"{v:.8g}" for v in net.mean)
    archive.metadata["vgg.preprocess.std"] = ",".join(f"{v:.8g}" for v in net.std)
    return archive


# ---------------------------------------------------------------------------
# Graph construction / evaluation
# ---------------------------------------------------------------------------

def build_spatial_graph(net: SpatialNetwork, frame: ad.Node) -> dict[str, ad.Node]:
    """Run the stack on a frame node; returns (N, M) matrix nodes for the
    selected layers, post-rectification."""
    h, w = frame.shape[0], frame.shape[1]
    deepest = max(net.stride_of(layer) for layer in net.selected)
    if min(h, w) < deepest:
        raise SpatialStreamError(
            f"input {h}x{w} too small for selected layers (needs >= {deepest} px)")
    x = ad.channel_affine(frame, 1.0 / net.std, -net.mean / net.std)
    out: dict[str, ad.Node] = {}
    remaining = set(net.selected)
    for name, _ in net.stages:
        if name == "pool":
            x = ad.maxpool2(x) if net.pooling == "max" else ad.avgpool2(x)
            continue
        wgt, bias = net.weights[name]
        x = ad.relu(ad.conv2d(x, wgt, bias, pad_mode="zero", name=name))
        if name in remaining:
            out[name] = ad.as_filter_matrix(x)
            remaining.discard(name)
            if not remaining:
                break
    return out


def spatial_activations(frame: np.ndarray, net: SpatialNetwork) -> dict[str, ActivationMap]:
    """Evaluate the selected layers on one (H, W, 3) frame in [0, 1]."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise SpatialStreamError(f"frame must be (H,W,3), got {frame.shape}")
    leaf = ad.leaf("frame", frame.shape)
    nodes = build_spatial_graph(net, leaf)
    graph = ad.Graph(ad.reduce_sum(nodes[net.selected[0]]), outputs=nodes)
    graph.forward({"frame": frame})
    values = graph.output_values()
    return {layer: ActivationMap(layer=layer, matrix=values[layer])
            for layer in net.selected}
