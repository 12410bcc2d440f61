"""Stage state machine for incremental training.

Each stage trains the live sub-networks plus a classifier. Every
``window_size`` epochs the slope of the validation-accuracy curve over the last
window is turned into an angle; the stage ends when the angle falls to
``gamma`` times the previous one (or the slope is no longer positive, or an
epoch cap is hit). The next sub-network is then inserted, optionally after a
few look-ahead epochs that train only the new sub-network and a fresh
classifier on top of the frozen prefix.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SplitDataset
from .exceptions import ConfigurationError, DataError, UsageError
from .flops import FlopCounter
from .model import ModelState, build_model, extend
from .optim import OptimConfig
from .partition import Partition, check_partition
from .specs import NetworkSpec
from .training import MetricsRecord, RngStreams, TrainConfig, run_epoch

log = logging.getLogger(__name__)

INIT_MODES = ("lookahead", "random")


@dataclass(frozen=True)
class GrowthConfig:
    window_size: int = 5
    gamma: float = 0.75
    lookahead_epochs: int = 3
    init_mode: str = "lookahead"
    max_epochs_per_stage: int = 100
    min_windows_per_stage: int = 2
    # the final stage runs to the epoch budget unless this is set
    stop_final_stage: bool = False

    def __post_init__(self):
        if self.window_size < 2:
            raise ConfigurationError(f"window_size must be >= 2, got {self.window_size}")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.lookahead_epochs < 0:
            raise ConfigurationError(f"lookahead_epochs must be >= 0, got {self.lookahead_epochs}")
        if self.init_mode not in INIT_MODES:
            raise ConfigurationError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.min_windows_per_stage < 1:
            raise ConfigurationError("min_windows_per_stage must be >= 1")
        if self.max_epochs_per_stage < self.window_size * self.min_windows_per_stage:
            raise ConfigurationError(
                "max_epochs_per_stage must be >= window_size * min_windows_per_stage"
            )


@dataclass
class Event:
    epoch: int
    stage: int
    event: str
    alpha: float | None = None
    reason: str = ""

    def line(self) -> str:
        alpha = "-" if self.alpha is None else f"{self.alpha:.6f}"
        return (f"epoch={self.epoch} stage={self.stage} event={self.event} "
                f"alpha={alpha} reason={self.reason or '-'}")


@dataclass
class GrowthState:
    stage: int = 1
    num_stages: int = 1
    epoch: int = 0
    epoch_in_stage: int = 0
    accuracy_history: list[float] = field(default_factory=list)
    window_angles: list[float] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    freeze_checks: list[dict] = field(default_factory=list)

    def log(self, event: str, alpha=None, reason: str = "", stage: int | None = None) -> Event:
        ev = Event(self.epoch, self.stage if stage is None else stage, event, alpha, reason)
        self.events.append(ev)
        log.info(ev.line())
        return ev

    def reset_stage(self) -> None:
        self.epoch_in_stage = 0
        self.accuracy_history = []
        self.window_angles = []

    def to_dict(self) -> dict:
        return {
            "stage": self.stage, "num_stages": self.num_stages, "epoch": self.epoch,
            "epoch_in_stage": self.epoch_in_stage,
            "accuracy_history": list(self.accuracy_history),
            "window_angles": list(self.window_angles),
            "events": [vars(e).copy() for e in self.events],
            "freeze_checks": list(self.freeze_checks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthState":
        d = dict(d)
        d["events"] = [Event(**e) for e in d.get("events", [])]
        return cls(**d)


def fit_window_angle(acc_points: Sequence[float]) -> float:
    """Angle in degrees of the least-squares line through accuracy vs. epoch.

    Accuracies are percentage points in [0, 100]; consecutive epochs are one
    unit apart. The angle is not invariant to rescaling the accuracy axis.
    """
    y = np.asarray(acc_points, dtype=np.float64)
    if y.ndim != 1 or len(y) < 2:
        raise UsageError(f"a window needs at least 2 accuracy points, got {len(y)}")
    if np.any(y < 0) or np.any(y > 100):
        raise DataError("accuracy points must be percentage points in [0, 100]")
    x = np.arange(1, len(y) + 1, dtype=np.float64)
    dx = x - x.mean()
    slope = float(np.dot(dx, y - y.mean()) / np.dot(dx, dx))
    return math.degrees(math.atan(slope))


def should_stop_stage(state: GrowthState, cfg: GrowthConfig) -> tuple[bool, str]:
    """Evaluate the stop rules at a window boundary. Returns ``(stop, reason)``."""
    ws = cfg.window_size
    if state.epoch_in_stage == 0 or state.epoch_in_stage % ws:
        raise UsageError(
            f"should_stop_stage called off a window boundary (epoch_in_stage="
            f"{state.epoch_in_stage}, window_size={ws})"
        )
    if len(state.window_angles) != state.epoch_in_stage // ws:
        raise UsageError("window_angles out of sync with epoch_in_stage")
    i = len(state.window_angles)
    alpha = state.window_angles[-1]
    if alpha <= 0:
        return True, "non_positive_slope"
    if i >= max(2, cfg.min_windows_per_stage) and alpha <= cfg.gamma * state.window_angles[-2]:
        return True, "gamma_rule"
    if state.epoch_in_stage >= cfg.max_epochs_per_stage:
        return True, "epoch_cap"
    return False, "continue"


def observe_epoch(state: GrowthState, cfg: GrowthConfig, val_acc: float) -> tuple[bool, str]:
    """Record one stage epoch's validation accuracy and apply the stop rules.

    At window boundaries the window angle is appended and logged. In the final
    stage only the epoch cap ends training, unless ``cfg.stop_final_stage``.
    """
    state.epoch_in_stage += 1
    state.accuracy_history.append(float(val_acc))
    if state.epoch_in_stage % cfg.window_size:
        return False, "mid_window"
    alpha = fit_window_angle(state.accuracy_history[-cfg.window_size:])
    state.window_angles.append(alpha)
    state.log("window_angle", alpha=alpha)
    stop, reason = should_stop_stage(state, cfg)
    final = state.stage == state.num_stages
    if stop and final and reason != "epoch_cap" and not cfg.stop_final_stage:
        return False, reason
    return stop, reason


def params_checksum(model: ModelState, layer_ids) -> str:
    """SHA-256 over the raw bytes of the named layers' parameters."""
    h = hashlib.sha256()
    for lid in sorted(layer_ids):
        for name in sorted(model.params[lid]):
            arr = np.ascontiguousarray(model.params[lid][name])
            h.update(f"{lid}.{name}:{arr.dtype.str}:{arr.shape}".encode())
            h.update(arr.tobytes())
    return h.hexdigest()


class GrowthController:
    """Drives one incremental (or, with a single group, regular) training run.

    ``on_stage_end(model, state, tag)`` is called when a stage stops, before the
    next sub-network is inserted, and once more at the end of the run.
    """

    def __init__(self, spec: NetworkSpec, partition: Partition, data: SplitDataset,
                 growth: GrowthConfig = GrowthConfig(), optim: OptimConfig = OptimConfig(),
                 train: TrainConfig = TrainConfig(), dtype=np.float32,
                 on_stage_end: Callable | None = None,
                 on_epoch: Callable[[MetricsRecord], None] | None = None):
        self.spec = spec
        self.partition = check_partition(spec, partition)
        self.data = data
        self.growth = growth
        self.optim = optim
        self.train_cfg = train
        self.rngs = RngStreams(train.seed)
        self.flops = FlopCounter()
        self.records: list[MetricsRecord] = []
        self.on_stage_end = on_stage_end
        self.on_epoch = on_epoch
        self.model = build_model(spec, self.partition.live_layers(1), seed=train.seed, dtype=dtype)
        self.state = GrowthState(stage=1, num_stages=self.partition.k)

    @property
    def budget_left(self) -> int:
        return self.train_cfg.epochs - self.state.epoch

    def _epoch(self, stage: int, lookahead: bool) -> MetricsRecord:
        self.state.epoch += 1
        rec = run_epoch(self.model, self.data.train, self.data.validation, self.optim,
                        self.train_cfg, self.rngs, self.flops, self.state.epoch, stage, lookahead)
        self.records.append(rec)
        self.state.log("trained", reason=f"val_acc={rec.val_acc:.4f}"
                       + (" lookahead" if lookahead else ""), stage=stage)
        if self.on_epoch is not None:
            self.on_epoch(rec)
        return rec

    def train_stage_epoch(self) -> tuple[bool, str]:
        """One regular epoch of the current stage; returns the stop decision."""
        rec = self._epoch(self.state.stage, lookahead=False)
        return observe_epoch(self.state, self.growth, rec.val_acc)

    def lookahead_train(self, prefix_ids: list[str], epochs: int) -> None:
        """Train only the newest sub-network and classifier over a frozen prefix."""
        if epochs < 0:
            raise ConfigurationError(f"look-ahead epochs must be >= 0, got {epochs}")
        model, st = self.model, self.state
        next_stage = st.stage + 1
        model.set_frozen(prefix_ids, True)
        before = params_checksum(model, prefix_ids)
        st.log("lookahead_start", reason=f"prefix_sha256={before}", stage=next_stage)
        for _ in range(epochs):
            self._epoch(next_stage, lookahead=True)
        after = params_checksum(model, prefix_ids)
        st.freeze_checks.append({"stage": next_stage, "before": before, "after": after})
        st.log("lookahead_end", reason=f"prefix_sha256={after}", stage=next_stage)
        if after != before:
            raise RuntimeError(f"frozen prefix changed during look-ahead for stage {next_stage}")
        model.set_frozen(prefix_ids, False)

    def grow(self) -> list[str]:
        """Insert the next sub-network; returns the ids of the new trainable layers."""
        st = self.state
        if st.stage >= st.num_stages:
            raise UsageError(f"all {st.num_stages} sub-networks are already live")
        prefix_ids = [lid for lid in self.model.trainable_ids() if lid.startswith("backbone.")]
        new_ids = extend(self.model, self.partition.live_layers(st.stage + 1))
        st.log("grow", reason=f"init={self.growth.init_mode} new_layers={len(new_ids)}")
        if self.growth.init_mode == "lookahead":
            self.lookahead_train(prefix_ids, min(self.growth.lookahead_epochs, self.budget_left))
        st.stage += 1
        st.reset_stage()
        return new_ids

    def run(self) -> tuple[list[MetricsRecord], ModelState, GrowthState]:
        st = self.state
        while self.budget_left > 0:
            stop, reason = self.train_stage_epoch()
            if not stop:
                continue
            alpha = st.window_angles[-1] if st.window_angles else None
            st.log("stop", alpha=alpha, reason=reason)
            if st.stage == st.num_stages:
                break
            if self.on_stage_end is not None:
                self.on_stage_end(self.model, st, f"stage{st.stage}")
            if self.budget_left == 0:
                break
            self.grow()
        if not st.events or st.events[-1].event != "stop":
            st.log("stop", reason="epoch_budget")
        if self.on_stage_end is not None:
            self.on_stage_end(self.model, st, "final")
        return self.records, self.model, st


def run_incremental(spec: NetworkSpec, partition: Partition, data: SplitDataset,
                    growth: GrowthConfig = GrowthConfig(), optim: OptimConfig = OptimConfig(),
                    train: TrainConfig = TrainConfig(), **kwargs):
    """Train ``spec`` stage by stage. Returns ``(records, model, state)``."""
    return GrowthController(spec, partition, data, growth, optim, train, **kwargs).run()


def run_regular(spec: NetworkSpec, data: SplitDataset, growth: GrowthConfig = GrowthConfig(),
                optim: OptimConfig = OptimConfig(), train: TrainConfig = TrainConfig(), **kwargs):
    """Conventional training: the whole backbone as a single sub-network."""
    whole = Partition(((0, len(spec.backbone)),))
    return run_incremental(spec, whole, data, growth, optim, train, **kwargs)
