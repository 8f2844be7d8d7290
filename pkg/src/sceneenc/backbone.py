"""PointNet-style per-point encoder with a scene-descriptor head.

Layout (default widths)::

    xyz -> 32 -> 64 -> 128 --maxpool--> global (128)
                        \\___ concat(point, global) -> 128 -> 64 = point features
    point features -> class logits -> softmax                    = probs
    global -> 64 -> 64 -> n -> sigmoid                            = descriptor
    probs masked by stop_gradient(descriptor), renormalised       = refined
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .descriptor import binarize, refine_probabilities, scene_encoder_forward
from .geometry import PointCloud


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int = 8
    encoder_widths: tuple[int, ...] = (32, 64, 128)
    head_widths: tuple[int, ...] = (128, 64)
    descriptor_widths: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        for name in ("encoder_widths", "head_widths", "descriptor_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            if not widths or min(widths) < 1:
                raise ValueError(f"{name} must be a non-empty list of positive widths")
            object.__setattr__(self, name, widths)
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        dims = (3,) + self.encoder_widths
        for i in range(len(self.encoder_widths)):
            shapes[f"enc{i}"] = (dims[i], dims[i + 1])
        dims = (2 * self.encoder_widths[-1],) + self.head_widths
        for i in range(len(self.head_widths)):
            shapes[f"head{i}"] = (dims[i], dims[i + 1])
        shapes["cls"] = (self.head_widths[-1], self.n_classes)
        dims = (self.encoder_widths[-1],) + self.descriptor_widths + (self.n_classes,)
        for i in range(len(dims) - 1):
            shapes[f"des{i}"] = (dims[i], dims[i + 1])
        return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for layer, (fan_in, fan_out) in config.layer_shapes().items():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{layer}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{layer}.b"] = np.zeros((1, fan_out))
    return params


def param_group(name: str) -> str:
    return name.split(".")[0]


def is_descriptor_param(name: str) -> bool:
    return name.startswith("des")


def bind(graph: dc.Graph, params: dict[str, np.ndarray]) -> dict[str, dc.Var]:
    return {name: graph.param(value, name) for name, value in params.items()}


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Shift to the origin and scale uniformly into the unit cube."""
    lo = coords.min(axis=0)
    extent = float((coords.max(axis=0) - lo).max())
    return (coords - lo) / (extent if extent > 0 else 1.0)


@dataclass
class ForwardOutput:
    graph: dc.Graph
    point_features: dc.Var
    global_feature: dc.Var
    probs: dc.Var
    descriptor: dc.Var | None
    refined: dc.Var
    params: dict[str, dc.Var] = field(repr=False, default_factory=dict)


def _dense(x, pv, layer, activate=True):
    y = x @ pv[f"{layer}.W"] + pv[f"{layer}.b"]
    return dc.relu(y) if activate else y


def encode(x: dc.Var, pv: dict[str, dc.Var]) -> tuple[dc.Var, dc.Var]:
    """Shared MLP per point, max-pooled global feature, then a mixing MLP
    over [point embedding, broadcast global]."""
    h = x
    i = 0
    while f"enc{i}.W" in pv:
        h = _dense(h, pv, f"enc{i}")
        i += 1
    global_feature = dc.maxpool_cols(h)
    h = dc.concat_cols([h, dc.broadcast_rows(global_feature, x.shape[0])])
    i = 0
    while f"head{i}.W" in pv:
        h = _dense(h, pv, f"head{i}")
        i += 1
    return h, global_feature


def classify(point_features: dc.Var, pv: dict[str, dc.Var]) -> dc.Var:
    return dc.softmax_rows(_dense(point_features, pv, "cls", activate=False))


def forward_full(cloud: PointCloud, params: dict[str, np.ndarray], *,
                 scene_encoder: bool = True, stop_gradient: bool = True,
                 threshold: float | None = None, graph: dc.Graph | None = None) -> ForwardOutput:
    """Whole pipeline on one cloud, recorded on a fresh graph.

    ``scene_encoder=False`` skips the descriptor head and uses the raw
    probabilities as the refined map. ``threshold`` binarizes the predicted
    descriptor before masking. ``stop_gradient=False`` is a debug switch that
    lets the classification loss reach the descriptor head.
    """
    graph = graph or dc.Graph()
    pv = bind(graph, params)
    x = graph.const(normalize_coords(cloud.coords))
    point_features, global_feature = encode(x, pv)
    probs = classify(point_features, pv)
    if not scene_encoder:
        return ForwardOutput(graph, point_features, global_feature, probs, None, probs, pv)
    descriptor = scene_encoder_forward(global_feature, pv)
    if threshold is not None:
        mask = graph.const(binarize(descriptor.value, threshold))
    elif stop_gradient:
        mask = dc.stop_gradient(descriptor)
    else:
        mask = descriptor
    refined = refine_probabilities(probs, mask)
    return ForwardOutput(graph, point_features, global_feature, probs, descriptor, refined, pv)
