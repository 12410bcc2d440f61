"""Declarative layer and network descriptions with shape inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .exceptions import ConfigurationError, DimensionError
from .tensor import conv_output_size

TRAINABLE_KINDS = frozenset({"conv2d", "dense"})
LAYER_KINDS = frozenset(
    {"conv2d", "dense", "maxpool2d", "relu", "flatten", "dropout", "global_avgpool"}
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 0
    units: int = 0
    rate: float = 0.0
    window: int = 2

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.filters < 1 or self.kernel < 1 or self.stride < 1):
            raise ConfigurationError(f"conv2d needs filters, kernel, stride >= 1: {self}")
        if self.kind == "dense" and self.units < 1:
            raise ConfigurationError(f"dense needs units >= 1: {self}")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.kind == "maxpool2d" and (self.window < 1 or self.stride < 1):
            raise ConfigurationError(f"maxpool2d needs window, stride >= 1: {self}")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    @property
    def width(self) -> int:
        """Filter count for conv layers, output units for dense layers, else 0."""
        if self.kind == "conv2d":
            return self.filters
        if self.kind == "dense":
            return self.units
        return 0

    def to_dict(self) -> dict:
        keep = {"kind": self.kind}
        if self.kind == "conv2d":
            keep.update(filters=self.filters, kernel=self.kernel, stride=self.stride, pad=self.pad)
        elif self.kind == "dense":
            keep.update(units=self.units)
        elif self.kind == "dropout":
            keep.update(rate=self.rate)
        elif self.kind == "maxpool2d":
            keep.update(window=self.window, stride=self.stride)
        return keep

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if d.get("kind") == "maxpool2d" and "stride" not in d:
            d["stride"] = d.get("window", 2)
        return cls(**d)


def conv(filters, kernel=3, stride=1, pad=None) -> LayerSpec:
    return LayerSpec("conv2d", filters=filters, kernel=kernel, stride=stride,
                     pad=kernel // 2 if pad is None else pad)


def dense(units) -> LayerSpec:
    return LayerSpec("dense", units=units)


def maxpool(window=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool2d", window=window, stride=window if stride is None else stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dropout(rate) -> LayerSpec:
    return LayerSpec("dropout", rate=rate)


def global_avgpool() -> LayerSpec:
    return LayerSpec("global_avgpool")


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-example output shape of ``spec`` applied to ``in_shape``."""
    k = spec.kind
    if k == "conv2d":
        if len(in_shape) != 3:
            raise DimensionError(f"conv2d expects a C×H×W input, got {in_shape}")
        _, h, w = in_shape
        return (spec.filters,
                conv_output_size(h, spec.kernel, spec.stride, spec.pad),
                conv_output_size(w, spec.kernel, spec.stride, spec.pad))
    if k == "maxpool2d":
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool2d expects a C×H×W input, got {in_shape}")
        c, h, w = in_shape
        return (c,
                conv_output_size(h, spec.window, spec.stride, 0),
                conv_output_size(w, spec.window, spec.stride, 0))
    if k == "dense":
        if len(in_shape) != 1:
            raise DimensionError(f"dense expects a flat input, got {in_shape}; add a flatten layer")
        return (spec.units,)
    if k == "flatten":
        n = 1
        for d in in_shape:
            n *= d
        return (n,)
    if k == "global_avgpool":
        if len(in_shape) != 3:
            raise DimensionError(f"global_avgpool expects a C×H×W input, got {in_shape}")
        return (in_shape[0],)
    return tuple(in_shape)


def param_shapes(spec: LayerSpec, in_shape: tuple) -> dict:
    if spec.kind == "conv2d":
        return {"weight": (spec.filters, in_shape[0], spec.kernel, spec.kernel),
                "bias": (spec.filters,)}
    if spec.kind == "dense":
        return {"weight": (in_shape[0], spec.units), "bias": (spec.units,)}
    return {}


def fan_in(spec: LayerSpec, in_shape: tuple) -> int:
    if spec.kind == "conv2d":
        return in_shape[0] * spec.kernel * spec.kernel
    if spec.kind == "dense":
        return in_shape[0]
    raise ConfigurationError(f"{spec.kind} has no trainable parameters")


def infer_shapes(layers: Sequence[LayerSpec], in_shape: tuple) -> list[tuple]:
    """Shapes at every boundary: ``result[i]`` is the input shape of layer ``i``."""
    shapes = [tuple(in_shape)]
    for i, spec in enumerate(layers):
        try:
            shapes.append(output_shape(spec, shapes[-1]))
        except (DimensionError, ConfigurationError) as exc:
            raise type(exc)(f"layer {i} ({spec.kind}): {exc}") from None
    return shapes


@dataclass(frozen=True)
class ClassifierSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers or self.layers[-1].kind != "dense":
            raise ConfigurationError("classifier must end in a dense layer")
        for spec in self.layers:
            if spec.kind in {"conv2d", "maxpool2d"}:
                raise ConfigurationError(f"{spec.kind} is not allowed in the classifier block")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].units


@dataclass(frozen=True)
class NetworkSpec:
    backbone: tuple[LayerSpec, ...]
    classifier: ClassifierSpec
    input_shape: tuple[int, int, int] = (3, 32, 32)
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "backbone", tuple(self.backbone))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.shapes()

    def shapes(self, live: int | None = None) -> tuple[list[tuple], list[tuple]]:
        """Boundary shapes for the first ``live`` backbone layers and the classifier."""
        live = len(self.backbone) if live is None else live
        bshapes = infer_shapes(self.backbone[:live], self.input_shape)
        cshapes = infer_shapes(self.classifier.layers, bshapes[-1])
        return bshapes, cshapes

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "backbone": [s.to_dict() for s in self.backbone],
            "classifier": [s.to_dict() for s in self.classifier.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            backbone=tuple(LayerSpec.from_dict(s) for s in d["backbone"]),
            classifier=ClassifierSpec(tuple(LayerSpec.from_dict(s) for s in d["classifier"])),
            input_shape=tuple(d.get("input_shape", (3, 32, 32))),
            name=d.get("name", "custom"),
        )


def _conv_block(widths, pool=True):
    layers = []
    for w in widths:
        layers += [conv(w), relu()]
    if pool:
        layers.append(maxpool(2))
    return layers


def desk6(num_classes: int = 10) -> NetworkSpec:
    """Six 3×3 conv layers (16,16 | 32,32 | 64,64), global pooling head."""
    backbone = _conv_block([16, 16]) + _conv_block([32, 32]) + _conv_block([64, 64])
    return NetworkSpec(tuple(backbone), ClassifierSpec((global_avgpool(), dense(num_classes))),
                       name="desk6")


def vgg16(num_classes: int = 10) -> NetworkSpec:
    """VGG-16 sized for 32×32 inputs (13 conv layers, 512-wide dense head)."""
    backbone = (_conv_block([64, 64]) + _conv_block([128, 128]) + _conv_block([256] * 3)
                + _conv_block([512] * 3) + _conv_block([512] * 3))
    head = (flatten(), dense(512), relu(), dropout(0.5), dense(num_classes))
    return NetworkSpec(tuple(backbone), ClassifierSpec(head), name="vgg16")


def tiny(num_classes: int = 10) -> NetworkSpec:
    """Two conv groups on 8×8 inputs, for fast tests."""
    backbone = (conv(4), relu(), maxpool(2), conv(8), relu(), maxpool(2))
    return NetworkSpec(backbone, ClassifierSpec((global_avgpool(), dense(num_classes))),
                       input_shape=(3, 8, 8), name="tiny")


BUILTIN_NETWORKS = {"desk6": desk6, "vgg16": vgg16, "tiny": tiny}


def builtin_network(name: str, num_classes: int = 10) -> NetworkSpec:
    try:
        return BUILTIN_NETWORKS[name](num_classes)
    except KeyError:
        raise ConfigurationError(
            f"unknown network {name!r}; choose one of {sorted(BUILTIN_NETWORKS)}"
        ) from None


__all__ = [
    "LayerSpec", "ClassifierSpec", "NetworkSpec", "TRAINABLE_KINDS", "conv", "dense",
    "maxpool", "relu", "flatten", "dropout", "global_avgpool", "output_shape",
    "param_shapes", "fan_in", "infer_shapes", "builtin_network", "desk6", "vgg16", "tiny",
]
