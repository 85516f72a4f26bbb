"""Bottleneck adapters: skip-connected two-layer blocks grafted onto a
frozen encoder at configurable insertion points.

Each adapter down-projects the hosted stream to a small bottleneck,
applies ReLU, and up-projects back, with the result added to its input.
Weights start as zero-mean Gaussian noise (variance 0.002 by default) so
a freshly initialized adapter is a near-identity map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ShapeError

DEFAULT_INIT_VARIANCE = 0.002


class PlacementKind(str, Enum):
    EMBEDDING = "embedding"
    ATTENTION = "attention"
    FF_INTERMEDIATE = "ff_intermediate"
    FF_OUTPUT = "ff_output"


_KIND_ORDER = {k: i for i, k in enumerate(PlacementKind)}


@dataclass(frozen=True, eq=True)
class InsertionPoint:
    """A transformer sub-module whose output an adapter transforms."""

    kind: PlacementKind
    layer: int | None = None

    def __post_init__(self):
        if self.kind == PlacementKind.EMBEDDING:
            if self.layer is not None:
                raise ConfigError("embedding insertion point carries no layer")
        elif self.layer is None or self.layer < 0:
            raise ConfigError(f"{self.kind.value} insertion point needs a layer")

    @property
    def sort_key(self) -> tuple[int, int]:
        return (-1 if self.layer is None else self.layer, _KIND_ORDER[self.kind])

    def label(self) -> str:
        if self.layer is None:
            return self.kind.value
        return f"{self.kind.value}@{self.layer}"

    @staticmethod
    def parse(label: str) -> "InsertionPoint":
        if "@" in label:
            kind, layer = label.split("@", 1)
            return InsertionPoint(PlacementKind(kind), int(layer))
        return InsertionPoint(PlacementKind(label), None)


def default_placements(n_layers: int) -> tuple[InsertionPoint, ...]:
    """Attention and feed-forward output at every layer."""
    points = []
    for layer in range(n_layers):
        points.append(InsertionPoint(PlacementKind.ATTENTION, layer))
        points.append(InsertionPoint(PlacementKind.FF_OUTPUT, layer))
    return tuple(sorted(points, key=lambda p: p.sort_key))


@dataclass(frozen=True)
class AdapterConfig:
    """Bottleneck width, Gaussian init magnitude, and placements.

    `init_noise` is read as a variance unless `noise_is_std` is set;
    `placements=None` resolves to default_placements at init time.
    """

    bottleneck_dim: int = 4
    init_noise: float = DEFAULT_INIT_VARIANCE
    noise_is_std: bool = False
    placements: tuple[InsertionPoint, ...] | None = None

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1")
        if self.init_noise < 0:
            raise ConfigError("init_noise must be >= 0")
        if self.placements is not None:
            pts = tuple(self.placements)
            if len(set(pts)) != len(pts):
                raise ConfigError("each insertion point hosts at most one adapter")
            object.__setattr__(self, "placements", pts)

    @property
    def init_std(self) -> float:
        return self.init_noise if self.noise_is_std else math.sqrt(self.init_noise)

    def resolved_placements(self, n_layers: int) -> tuple[InsertionPoint, ...]:
        if self.placements is None:
            return default_placements(n_layers)
        for p in self.placements:
            if p.layer is not None and p.layer >= n_layers:
                raise ConfigError(f"placement {p.label()} beyond {n_layers} layers")
        return tuple(sorted(self.placements, key=lambda p: p.sort_key))


@dataclass
class AdapterLayer:
    down: Tensor
    down_bias: Tensor
    up: Tensor
    up_bias: Tensor

    def tensors(self) -> tuple[Tensor, ...]:
        return (self.down, self.down_bias, self.up, self.up_bias)


AdapterParams = dict  # InsertionPoint -> AdapterLayer, insertion-sorted


def stream_width(point: InsertionPoint, d_model: int, d_ff: int) -> int:
    # the intermediate feed-forward stream is d_ff wide; everything else d_model
    if point.kind == PlacementKind.FF_INTERMEDIATE:
        return d_ff
    return d_model


def init_adapters(cfg: AdapterConfig, enc_cfg, seed: int) -> AdapterParams:
    """Seeded Gaussian init: weights ~ N(0, std^2), biases zero.

    `enc_cfg` supplies d_model / d_ff / n_layers. Two calls with the same
    (cfg, enc_cfg, seed) produce bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    std = cfg.init_std
    params: AdapterParams = {}
    for point in cfg.resolved_placements(enc_cfg.n_layers):
        width = stream_width(point, enc_cfg.d_model, enc_cfg.d_ff)
        d = cfg.bottleneck_dim
        down = rng.normal(0.0, 1.0, size=(width, d)) * std
        up = rng.normal(0.0, 1.0, size=(d, width)) * std
        params[point] = AdapterLayer(
            down=dc.parameter(down),
            down_bias=dc.parameter(np.zeros(d)),
            up=dc.parameter(up),
            up_bias=dc.parameter(np.zeros(width)),
        )
    return params


def adapter_forward(x: Tensor, layer: AdapterLayer) -> Tensor:
    """x + up(relu(down(x) + b_down)) + b_up over the last axis."""
    width = layer.down.shape[0]
    if x.shape[-1] != width:
        raise ShapeError(f"adapter expects width {width}, got {x.shape[-1]}")
    lead = x.shape[:-1]
    flat = dc.reshape(x, (-1, width)) if x.ndim != 2 else x
    n = flat.shape[0]
    d = layer.down.shape[1]
    mid = dc.relu(dc.add(dc.matmul(flat, layer.down),
                         dc.broadcast_to(dc.reshape(layer.down_bias, (1, d)),
                                         (n, d))))
    delta = dc.add(dc.matmul(mid, layer.up),
                   dc.broadcast_to(dc.reshape(layer.up_bias, (1, width)),
                                   (n, width)))
    out = dc.add(flat, delta)
    return dc.reshape(out, lead + (width,)) if x.ndim != 2 else out


def adapter_param_count(cfg: AdapterConfig, enc_cfg) -> int:
    total = 0
    d = cfg.bottleneck_dim
    for point in cfg.resolved_placements(enc_cfg.n_layers):
        w = stream_width(point, enc_cfg.d_model, enc_cfg.d_ff)
        total += w * d + d + d * w + w
    return total


@dataclass
class TunableParams:
    """Exactly the tensors the optimizers may update: adapters + LM head."""

    adapters: AdapterParams
    lm_head: Tensor

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for point in sorted(self.adapters, key=lambda p: p.sort_key):
            out.extend(self.adapters[point].tensors())
        out.append(self.lm_head)
        return out

    def clone(self) -> "TunableParams":
        return self.map_tensors(lambda t: t.copy())

    def map_tensors(self, fn: Callable[[Tensor], Tensor]) -> "TunableParams":
        new_adapters: AdapterParams = {}
        for point, layer in self.adapters.items():
            new_adapters[point] = AdapterLayer(*(fn(t) for t in layer.tensors()))
        return TunableParams(adapters=new_adapters, lm_head=fn(self.lm_head))

    def substitute(self, tensors: Iterator[Tensor]) -> "TunableParams":
        """Rebuild with tensors taken in self.tensors() order."""
        it = iter(tensors)
        return self.map_tensors(lambda _t: next(it))
