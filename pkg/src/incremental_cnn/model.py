"""Sequential layer stack: instantiation, forward/backward and parameter counting.

A :class:`ModelState` holds a live prefix of the backbone plus the classifier.
Layers are addressed by ids ``backbone.<i>`` and ``classifier.<j>``. Backward
stops at the first non-frozen trainable layer, so a frozen prefix is only ever
run forward.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .exceptions import ConfigurationError, DimensionError, UsageError
from .specs import LayerSpec, NetworkSpec, fan_in, infer_shapes, param_shapes

_INIT_TAG = 0x1E17
_CLASSIFIER_OFFSET = 1_000_000


def backbone_id(i: int) -> str:
    return f"backbone.{i}"


def classifier_id(j: int) -> str:
    return f"classifier.{j}"


def he_init(spec: LayerSpec, in_shape: tuple, rng, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights with std ``sqrt(2 / fan_in)`` and zero biases."""
    if not spec.trainable:
        raise UsageError(f"{spec.kind} layers have no parameters to initialize")
    rng = np.random.default_rng(rng)
    shapes = param_shapes(spec, in_shape)
    std = np.sqrt(2.0 / fan_in(spec, in_shape))
    return {
        "weight": (rng.standard_normal(shapes["weight"]) * std).astype(dtype),
        "bias": np.zeros(shapes["bias"], dtype=dtype),
    }


def init_seed(seed: int, layer_index: int, generation: int = 0) -> list[int]:
    """Seed material for one layer's initialization, independent of init order."""
    return [int(seed), _INIT_TAG, int(layer_index), int(generation)]


@dataclass
class ModelState:
    spec: NetworkSpec
    live_layers: int
    params: dict[str, dict[str, np.ndarray]]
    slots: dict[str, dict[str, np.ndarray]]
    frozen: dict[str, bool]
    seed: int = 0
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))
    classifier_generation: int = 0
    dropout_rng: np.random.Generator = None
    step_count: int = 0
    version: int = 0

    def __post_init__(self):
        self.dtype = np.dtype(self.dtype)
        if self.dropout_rng is None:
            self.dropout_rng = np.random.default_rng([int(self.seed), 0xD80])

    def layers(self) -> list[tuple[str, LayerSpec]]:
        """Live layers in execution order."""
        out = [(backbone_id(i), s) for i, s in enumerate(self.spec.backbone[: self.live_layers])]
        out += [(classifier_id(j), s) for j, s in enumerate(self.spec.classifier.layers)]
        return out

    def trainable_ids(self) -> list[str]:
        return [lid for lid, s in self.layers() if s.trainable]

    def live_trainable_ids(self) -> list[str]:
        return [lid for lid in self.trainable_ids() if not self.frozen.get(lid, False)]

    def set_frozen(self, layer_ids, value: bool = True) -> None:
        for lid in layer_ids:
            if lid not in self.params:
                raise UsageError(f"cannot freeze {lid}: not a live trainable layer")
            self.frozen[lid] = value
        self.version += 1

    def touch(self) -> None:
        """Invalidate outstanding forward caches after a parameter change."""
        self.version += 1


def _init_layers(model: ModelState, start: int, stop: int) -> None:
    bshapes = infer_shapes(model.spec.backbone[:stop], model.spec.input_shape)
    for i in range(start, stop):
        spec = model.spec.backbone[i]
        if spec.trainable:
            lid = backbone_id(i)
            model.params[lid] = he_init(spec, bshapes[i], init_seed(model.seed, i), model.dtype)
            model.slots[lid] = {k: np.zeros_like(v) for k, v in model.params[lid].items()}
            model.frozen[lid] = False


def _init_classifier(model: ModelState) -> None:
    for lid in [k for k in model.params if k.startswith("classifier.")]:
        del model.params[lid], model.slots[lid], model.frozen[lid]
    _, cshapes = model.spec.shapes(model.live_layers)
    for j, spec in enumerate(model.spec.classifier.layers):
        if spec.trainable:
            lid = classifier_id(j)
            seed = init_seed(model.seed, _CLASSIFIER_OFFSET + j, model.classifier_generation)
            model.params[lid] = he_init(spec, cshapes[j], seed, model.dtype)
            model.slots[lid] = {k: np.zeros_like(v) for k, v in model.params[lid].items()}
            model.frozen[lid] = False


def build_model(spec: NetworkSpec, live_layers: int | None = None, seed: int = 0,
                dtype=np.float32) -> ModelState:
    """Instantiate the first ``live_layers`` backbone layers plus a classifier."""
    live = len(spec.backbone) if live_layers is None else live_layers
    if not 0 <= live <= len(spec.backbone):
        raise ConfigurationError(f"live_layers={live} outside [0, {len(spec.backbone)}]")
    model = ModelState(spec, live, {}, {}, {}, seed=seed, dtype=dtype)
    _init_layers(model, 0, live)
    _init_classifier(model)
    return model


def extend(model: ModelState, new_live: int) -> list[str]:
    """Append backbone layers up to ``new_live`` and re-initialize the classifier.

    Existing backbone parameters and optimizer slots are kept; the new layers and
    the classifier start from He initialization with zero slots. Returns the ids
    of the newly created trainable layers (backbone and classifier).
    """
    if not model.live_layers < new_live <= len(model.spec.backbone):
        raise UsageError(f"cannot extend from {model.live_layers} to {new_live} layers")
    before = set(k for k in model.params if k.startswith("backbone."))
    old = model.live_layers
    model.live_layers = new_live
    _init_layers(model, old, new_live)
    model.classifier_generation += 1
    _init_classifier(model)
    model.touch()
    return [k for k in model.params if k not in before]


@dataclass
class ForwardCache:
    version: int
    start: int
    entries: list
    consumed: bool = False


def _forward_layer(spec: LayerSpec, p, x, training, rng, keep):
    k = spec.kind
    if k == "conv2d":
        y, cols = tensor.conv2d_forward(x, p["weight"], p["bias"], spec.stride, spec.pad,
                                        return_cols=True)
        return y, (x, cols) if keep else None
    if k == "dense":
        y = x @ p["weight"]
        y += p["bias"]
        return y, x if keep else None
    if k == "relu":
        mask = x > 0
        return x * mask, mask if keep else None
    if k == "maxpool2d":
        y, idx = tensor.maxpool2d(x, spec.window, spec.stride)
        return y, (idx, x.shape) if keep else None
    if k == "flatten":
        return x.reshape(x.shape[0], -1), x.shape if keep else None
    if k == "global_avgpool":
        return x.mean(axis=(2, 3)), x.shape if keep else None
    if k == "dropout":
        if not training or spec.rate == 0.0:
            return x, None
        mask = (rng.random(x.shape) >= spec.rate).astype(x.dtype) / x.dtype.type(1.0 - spec.rate)
        return x * mask, mask if keep else None
    raise ConfigurationError(f"unknown layer kind {k}")


def _backward_layer(spec: LayerSpec, p, cache, g, need_input_grad):
    k = spec.kind
    if k == "conv2d":
        x, cols = cache
        gx, gw, gb = tensor.conv2d_backward(x, p["weight"], g, spec.stride, spec.pad, cols=cols,
                                            need_input_grad=need_input_grad)
        return gx, {"weight": gw, "bias": gb}
    if k == "dense":
        x = cache
        grads = {"weight": x.T @ g, "bias": g.sum(axis=0)}
        return (g @ p["weight"].T if need_input_grad else None), grads
    if not need_input_grad:
        return None, None
    if k == "relu":
        return g * cache, None
    if k == "maxpool2d":
        idx, shape = cache
        return tensor.maxpool2d_backward(g, idx, shape), None
    if k == "flatten":
        return g.reshape(cache), None
    if k == "global_avgpool":
        n, c, h, w = cache
        return np.broadcast_to((g / (h * w))[:, :, None, None], cache).copy(), None
    if k == "dropout":
        return (g if cache is None else g * cache), None
    raise ConfigurationError(f"unknown layer kind {k}")


def backward_start(model: ModelState) -> int:
    """Index (in :meth:`ModelState.layers` order) of the first non-frozen trainable layer."""
    for idx, (lid, spec) in enumerate(model.layers()):
        if spec.trainable and not model.frozen.get(lid, False):
            return idx
    return len(model.layers())


def forward(model: ModelState, batch: np.ndarray, training: bool = False):
    """Run the live stack. Returns ``(cache, logits)``.

    The cache only retains what backward needs from the first non-frozen
    trainable layer onward.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != tuple(model.spec.input_shape):
        raise DimensionError(
            f"batch shape {batch.shape} does not match N×{tuple(model.spec.input_shape)}"
        )
    x = batch.astype(model.dtype, copy=False)
    start = backward_start(model)
    entries = []
    for idx, (lid, spec) in enumerate(model.layers()):
        x, c = _forward_layer(spec, model.params.get(lid), x, training, model.dropout_rng,
                              keep=idx >= start)
        entries.append(c)
    return ForwardCache(model.version, start, entries), x


def predict_logits(model: ModelState, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(batch), batch_size):
        _, logits = forward(model, batch[i:i + batch_size], training=False)
        out.append(logits)
    if not out:
        return np.zeros((0, model.spec.num_classes), dtype=model.dtype)
    return np.concatenate(out)


def backward(model: ModelState, cache: ForwardCache, grad_logits: np.ndarray):
    """Gradients keyed by layer id, for exactly the non-frozen trainable layers."""
    if cache.consumed or cache.version != model.version:
        raise UsageError("stale forward cache: the model changed since this forward pass")
    layers = model.layers()
    if len(cache.entries) != len(layers):
        raise UsageError("forward cache does not match the live layer stack")
    cache.consumed = True
    grads = {}
    g = grad_logits
    for idx in range(len(layers) - 1, cache.start - 1, -1):
        lid, spec = layers[idx]
        g_in, pgrads = _backward_layer(spec, model.params.get(lid), cache.entries[idx], g,
                                       need_input_grad=idx > cache.start)
        if pgrads is not None and not model.frozen.get(lid, False):
            grads[lid] = pgrads
        g = g_in
    return grads


def network_param_count(spec: NetworkSpec, live_layers: int | None = None) -> int:
    """Parameters (weights and biases) of the backbone prefix plus its classifier."""
    live = len(spec.backbone) if live_layers is None else live_layers
    bshapes, cshapes = spec.shapes(live)
    total = 0
    pairs = list(zip(spec.backbone[:live], bshapes)) + list(zip(spec.classifier.layers, cshapes))
    for layer, shape in pairs:
        for s in param_shapes(layer, shape).values():
            total += int(np.prod(s))
    return total


def count_params(model: ModelState, live_only: bool = True) -> int:
    if live_only:
        return int(sum(a.size for p in model.params.values() for a in p.values()))
    return network_param_count(model.spec)
