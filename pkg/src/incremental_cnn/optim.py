"""RMSProp with coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError, NumericError


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-4
    rms_decay: float = 0.9
    epsilon: float = 1e-7
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 < self.rms_decay < 1:
            raise ConfigurationError(f"rms_decay must lie in (0, 1), got {self.rms_decay}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.weight_decay >= 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")


def effective_gradient(name: str, w: np.ndarray, g: np.ndarray, weight_decay: float) -> np.ndarray:
    """Gradient plus the L2 term. Biases are exempt from decay."""
    if weight_decay and name != "bias":
        return g + weight_decay * w
    return g


def rmsprop_step(params: dict, grads: dict, slots: dict, cfg: OptimConfig, layer: str = "?"):
    """One RMSProp update of a single layer.

    ``params``, ``grads`` and ``slots`` map parameter names (``weight``,
    ``bias``) to arrays. Returns new ``(params, slots)`` dicts; inputs are not
    modified.
    """
    new_params, new_slots = {}, {}
    for name, w in params.items():
        g = grads[name]
        s = slots[name]
        if not (w.shape == g.shape == s.shape):
            raise DimensionError(
                f"{layer}.{name}: param {w.shape}, grad {g.shape}, slot {s.shape} disagree"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {layer} ({name})")
        g = effective_gradient(name, w, g, cfg.weight_decay)
        s = cfg.rms_decay * s + (1.0 - cfg.rms_decay) * (g * g)
        new_params[name] = w - cfg.learning_rate * g / (np.sqrt(s) + cfg.epsilon)
        new_slots[name] = s
    return new_params, new_slots


def apply_gradients(model, grads: dict, cfg: OptimConfig) -> None:
    """Update every layer in ``grads`` in place on ``model``; frozen layers are refused."""
    for lid, g in grads.items():
        if model.frozen.get(lid, False):
            raise NumericError(f"gradient supplied for frozen layer {lid}")
        model.params[lid], model.slots[lid] = rmsprop_step(
            model.params[lid], g, model.slots[lid], cfg, layer=lid
        )
    model.step_count += 1
    model.touch()
