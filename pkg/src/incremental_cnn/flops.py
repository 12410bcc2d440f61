"""Closed-form FLOP estimates.

Conventions: one multiply-accumulate counts as 2 FLOPs and a backward pass
costs twice its forward pass. Counts are per example unless noted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelState, backward_start, count_params
from .specs import LayerSpec, NetworkSpec, output_shape


def layer_inference_flops(spec: LayerSpec, input_shape: tuple) -> int:
    out = output_shape(spec, tuple(input_shape))
    k = spec.kind
    if k == "conv2d":
        cout, hout, wout = out
        cin = input_shape[0]
        return 2 * hout * wout * cout * cin * spec.kernel * spec.kernel + hout * wout * cout
    if k == "dense":
        return 2 * input_shape[0] * spec.units + spec.units
    if k == "relu":
        return int(np.prod(input_shape))
    if k == "maxpool2d":
        return int(np.prod(out)) * (spec.window * spec.window - 1)
    if k == "global_avgpool":
        return int(np.prod(input_shape))
    return 0


def layer_flop_table(spec: NetworkSpec, live_layers: int | None = None) -> list[tuple[str, int]]:
    """``(layer id, inference FLOPs per example)`` for the backbone prefix and its classifier."""
    live = len(spec.backbone) if live_layers is None else live_layers
    bshapes, cshapes = spec.shapes(live)
    rows = [(f"backbone.{i}", layer_inference_flops(s, bshapes[i]))
            for i, s in enumerate(spec.backbone[:live])]
    rows += [(f"classifier.{j}", layer_inference_flops(s, cshapes[j]))
             for j, s in enumerate(spec.classifier.layers)]
    return rows


def inference_flops(spec: NetworkSpec, live_layers: int | None = None) -> int:
    return sum(f for _, f in layer_flop_table(spec, live_layers))


def model_inference_flops(model: ModelState) -> int:
    return inference_flops(model.spec, model.live_layers)


def training_step_flops(model: ModelState, batch_size: int) -> int:
    """Forward over every live layer plus 2× forward from the backward boundary on."""
    table = layer_flop_table(model.spec, model.live_layers)
    start = backward_start(model)
    total = sum(f for _, f in table)
    trained = sum(f for _, f in table[start:])
    return batch_size * (total + 2 * trained)


@dataclass
class FlopReport:
    per_layer: list[tuple[str, int]]
    stage_inference: int
    cumulative_training: int
    live_params: int
    param_fraction: float


class FlopCounter:
    """Running total of training FLOPs across a run."""

    def __init__(self):
        self.cumulative = 0

    def add(self, flops: int) -> int:
        if flops < 0:
            raise ValueError("FLOP increments must be non-negative")
        self.cumulative += int(flops)
        return self.cumulative

    def report(self, model: ModelState) -> FlopReport:
        table = layer_flop_table(model.spec, model.live_layers)
        live = count_params(model)
        return FlopReport(table, sum(f for _, f in table), self.cumulative, live,
                          live / count_params(model, live_only=False))
