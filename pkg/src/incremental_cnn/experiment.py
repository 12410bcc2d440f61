"""Configuration, run orchestration, on-disk artifacts and run comparison.

A config file is flat ``key = value`` text with dotted sections; ``#`` starts
a comment. :data:`CONFIG_KEYS` lists every accepted key with its default.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import ComparisonError, ConfigurationError, FormatError
from .growth import GrowthConfig, GrowthController
from .optim import OptimConfig
from .partition import Partition, partition_by_filter_groups, validate_partition
from .specs import NetworkSpec, builtin_network
from .training import MetricsRecord, TrainConfig, accuracy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS_COLUMNS = ["epoch", "stage", "lookahead", "train_loss", "train_acc", "val_acc",
                   "step_flops", "cumulative_flops", "live_params", "param_fraction"]
FLOPS_COLUMNS = ["epoch", "stage", "lookahead_flag", "step_flops", "cumulative_flops",
                 "inference_flops_per_example", "live_params", "param_fraction"]
COMPARE_COLUMNS = ["run", "mode", "init_mode", "seed", "final_val_acc", "test_acc",
                   "total_flops", "flops_to_threshold", "param_fraction_at_threshold",
                   "stage_param_fractions", "delta_val_acc", "delta_total_flops",
                   "delta_flops_to_threshold"]
CURVE_COLUMNS = ["run", "epoch", "stage", "lookahead", "live_params", "metric", "value"]

# key -> (type, default)
CONFIG_KEYS = {
    "network": (str, "desk6"),
    "network.file": (str, ""),
    "partition": (str, "heuristic"),
    "mode": (str, "incremental"),
    "seed": (int, 0),
    "train.epochs": (int, 60),
    "train.batch_size": (int, 128),
    "train.augment": (bool, True),
    "growth.init_mode": (str, "lookahead"),
    "growth.window_size": (int, 5),
    "growth.gamma": (float, 0.75),
    "growth.lookahead_epochs": (int, 3),
    "growth.max_epochs_per_stage": (int, 100),
    "growth.min_windows_per_stage": (int, 2),
    "growth.stop_final_stage": (bool, False),
    "optim.learning_rate": (float, 1e-4),
    "optim.rms_decay": (float, 0.9),
    "optim.epsilon": (float, 1e-7),
    "optim.weight_decay": (float, 1e-4),
    "data.path": (str, ""),
    "data.subset_manifest": (str, ""),
    "data.subset_size": (int, 0),
    "data.subset_seed": (int, 0),
    "data.split_seed": (int, 0),
    "data.val_fraction": (float, 0.1),
    "data.evaluate_test": (bool, True),
    "output.dir": (str, "runs/default"),
    "report.threshold_fraction": (float, 0.9),
}
MODES = ("regular", "incremental")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in CONFIG_KEYS.items()})

    def __getitem__(self, key):
        return self.values[key]

    @property
    def mode(self) -> str:
        return self.values["mode"]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output.dir"])

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with ``{"train.epochs": 5, ...}``-style overrides applied (keys may use ``__``)."""
        vals = dict(self.values)
        errors = []
        for key, value in overrides.items():
            key = key.replace("__", ".")
            if key not in CONFIG_KEYS:
                errors.append(f"{key}: unknown key")
                continue
            vals[key] = value
        if errors:
            raise ConfigurationError("invalid config: " + "; ".join(errors))
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    def network_spec(self) -> NetworkSpec:
        if self.values["network.file"]:
            path = Path(self.values["network.file"])
            return NetworkSpec.from_dict(json.loads(path.read_text()))
        return builtin_network(self.values["network"])

    def partition_for(self, spec: NetworkSpec) -> Partition:
        if self.mode == "regular":
            return Partition(((0, len(spec.backbone)),))
        text = self.values["partition"].strip()
        if text == "heuristic":
            return partition_by_filter_groups(spec)
        sizes = [int(s) for s in text.strip("[]").replace(" ", "").split(",") if s]
        part = Partition.from_sizes(sizes)
        problems = validate_partition(spec, part)
        if problems:
            raise ConfigurationError("partition: " + "; ".join(problems))
        return part

    def growth(self) -> GrowthConfig:
        v = self.values
        return GrowthConfig(
            window_size=v["growth.window_size"], gamma=v["growth.gamma"],
            lookahead_epochs=v["growth.lookahead_epochs"], init_mode=v["growth.init_mode"],
            max_epochs_per_stage=v["growth.max_epochs_per_stage"],
            min_windows_per_stage=v["growth.min_windows_per_stage"],
            stop_final_stage=v["growth.stop_final_stage"],
        )

    def optim(self) -> OptimConfig:
        v = self.values
        return OptimConfig(v["optim.learning_rate"], v["optim.rms_decay"], v["optim.epsilon"],
                           v["optim.weight_decay"])

    def train(self) -> TrainConfig:
        v = self.values
        return TrainConfig(v["train.batch_size"], v["train.epochs"], v["seed"], v["train.augment"])

    def validate(self) -> None:
        errors = []
        v = self.values
        if v["mode"] not in MODES:
            errors.append(f"mode: must be one of {MODES}, got {v['mode']!r}")
        for key, build in (("growth", self.growth), ("optim", self.optim), ("train", self.train)):
            try:
                build()
            except ConfigurationError as exc:
                errors.append(f"{key}: {exc}")
        if not 0 < v["data.val_fraction"] < 1:
            errors.append("data.val_fraction: must lie in (0, 1)")
        if v["data.subset_size"] < 0:
            errors.append("data.subset_size: must be >= 0")
        if not 0 < v["report.threshold_fraction"] <= 1:
            errors.append("report.threshold_fraction: must lie in (0, 1]")
        try:
            spec = self.network_spec()
            if v["mode"] in MODES:
                self.partition_for(spec)
        except (ConfigurationError, ValueError, KeyError) as exc:
            errors.append(f"network/partition: {exc}")
        if errors:
            raise ConfigurationError("invalid config: " + "; ".join(errors))

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt_value(self.values[k])}\n" for k in CONFIG_KEYS)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_config(text: str) -> ExperimentConfig:
    values = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            errors.append(f"{key}: unknown key (line {lineno})")
            continue
        typ = CONFIG_KEYS[key][0]
        try:
            values[key] = _parse_bool(raw) if typ is bool else typ(raw)
        except ValueError:
            errors.append(f"{key}: cannot parse {raw!r} as {typ.__name__}")
    if errors:
        raise ConfigurationError("invalid config: " + "; ".join(errors))
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


@dataclass
class PreparedData:
    split: datamod.SplitDataset
    test: datamod.Dataset | None
    manifest: np.ndarray | None
    fingerprint: dict


def _fingerprint(cfg: ExperimentConfig, manifest, train_len: int) -> dict:
    h = hashlib.sha256()
    if manifest is not None:
        h.update(np.asarray(manifest, dtype="<i8").tobytes())
    return {
        "split_seed": cfg["data.split_seed"],
        "val_fraction": cfg["data.val_fraction"],
        "manifest_sha256": h.hexdigest() if manifest is not None else None,
        "train_records": train_len,
    }


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    root = datamod.resolve_data_root(cfg["data.path"] or None)
    full = datamod.load_cifar10(root, "train")
    manifest = None
    if cfg["data.subset_manifest"]:
        manifest = datamod.read_manifest(cfg["data.subset_manifest"])
    elif cfg["data.subset_size"]:
        manifest = datamod.subset_indices(full, cfg["data.subset_size"], cfg["data.subset_seed"])
    pool = full.subset(manifest) if manifest is not None else full
    split = datamod.split(pool, cfg["data.val_fraction"], cfg["data.split_seed"])
    test = None
    if cfg["data.evaluate_test"] and (Path(root) / datamod.TEST_FILES[0]).is_file():
        test = datamod.load_cifar10(root, "test")
    return PreparedData(split, test, manifest, _fingerprint(cfg, manifest, len(full)))


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def metrics_rows(records: list[MetricsRecord]):
    for r in records:
        yield [r.epoch, r.stage, int(r.lookahead), repr(r.train_loss), repr(r.train_acc),
               repr(r.val_acc), r.step_flops, r.cumulative_flops, r.live_params,
               repr(r.param_fraction)]


def flops_rows(records: list[MetricsRecord]):
    for r in records:
        yield [r.epoch, r.stage, int(r.lookahead), r.step_flops, r.cumulative_flops,
               r.inference_flops, r.live_params, repr(r.param_fraction)]


def flops_to_threshold(records, threshold: float):
    """``(cumulative FLOPs, param fraction)`` at the first epoch reaching ``threshold``."""
    for r in records:
        if r.val_acc >= threshold:
            return r.cumulative_flops, r.param_fraction
    return None, None


def _stage_summary(records) -> list[dict]:
    stages = {}
    for r in records:
        if not r.lookahead:
            stages[r.stage] = {"stage": r.stage, "live_params": r.live_params,
                               "param_fraction": r.param_fraction,
                               "inference_flops_per_example": r.inference_flops,
                               "last_epoch": r.epoch, "val_acc": r.val_acc}
    return [stages[k] for k in sorted(stages)]


@dataclass
class RunResult:
    records: list[MetricsRecord]
    summary: dict
    output_dir: Path


def run(cfg: ExperimentConfig, data: PreparedData | None = None) -> RunResult:
    """Execute one regular or incremental run and write its artifacts."""
    cfg.validate()
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else prepare_data(cfg)
    spec = cfg.network_spec()
    partition = cfg.partition_for(spec)
    extra = {"data": data.fingerprint, "mode": cfg.mode,
             "manifest": None if data.manifest is None else [int(i) for i in data.manifest],
             "config": {k: v for k, v in cfg.values.items() if k != "output.dir"}}

    controller = None

    def checkpoint(model, state, tag):
        save_checkpoint(out / f"ckpt_{tag}.bin", model, partition, state,
                        controller.rngs.state(), extra)

    controller = GrowthController(spec, partition, data.split, cfg.growth(), cfg.optim(),
                                  cfg.train(), on_stage_end=checkpoint)
    records, model, state = controller.run()

    (out / "metrics.csv").write_text(_csv_text(METRICS_COLUMNS, metrics_rows(records)))
    (out / "flops.csv").write_text(_csv_text(FLOPS_COLUMNS, flops_rows(records)))
    (out / "timing.csv").write_text(
        _csv_text(["epoch", "wall_seconds"], ([r.epoch, f"{r.wall_seconds:.3f}"] for r in records)))
    (out / "events.log").write_text("".join(e.line() + "\n" for e in state.events))
    (out / "config.resolved.txt").write_text(cfg.to_text())
    if data.manifest is not None:
        datamod.write_manifest(out / "subset_manifest.txt", data.manifest)

    final_val = records[-1].val_acc
    test_acc = accuracy(model, data.test) if data.test is not None else None
    frac = cfg["report.threshold_fraction"]
    own_flops, _ = flops_to_threshold(records, frac * final_val)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "metrics_columns": METRICS_COLUMNS,
        "mode": cfg.mode,
        "init_mode": cfg["growth.init_mode"] if cfg.mode == "incremental" else None,
        "seed": cfg.seed,
        "network": spec.name,
        "partition": partition.sizes(),
        "epochs": len(records),
        "final_val_acc": final_val,
        "test_acc": test_acc,
        "total_flops": records[-1].cumulative_flops,
        "threshold_fraction": frac,
        "flops_to_threshold_of_final": own_flops,
        "stages": _stage_summary(records),
        "data": data.fingerprint,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(records, summary, out)


def evaluate(checkpoint_path, data_path=None, split: str = "test") -> float:
    """Top-1 accuracy (percentage points) of a checkpoint on the validation or test split."""
    ckpt = load_checkpoint(checkpoint_path)
    root = datamod.resolve_data_root(data_path)
    if split == "test":
        ds = datamod.load_cifar10(root, "test")
    elif split == "val":
        info = ckpt.extra.get("data")
        if info is None:
            raise FormatError(f"{checkpoint_path}: no data provenance to rebuild the validation split")
        full = datamod.load_cifar10(root, "train")
        manifest = ckpt.extra.get("manifest")
        if len(full) != info["train_records"]:
            raise FormatError(
                f"{checkpoint_path}: trained on {info['train_records']} records, {root} has {len(full)}"
            )
        pool = full.subset(manifest) if manifest is not None else full
        ds = datamod.split(pool, info["val_fraction"], info["split_seed"]).validation
    else:
        raise ConfigurationError(f"split must be 'val' or 'test', got {split!r}")
    return accuracy(ckpt.model, ds)


def load_run(run_dir) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
        with open(run_dir / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{run_dir} is not a completed run: {exc.filename} missing") from None
    parsed = []
    for r in rows:
        parsed.append({
            "epoch": int(r["epoch"]), "stage": int(r["stage"]), "lookahead": r["lookahead"] == "1",
            "val_acc": float(r["val_acc"]), "cumulative_flops": int(r["cumulative_flops"]),
            "live_params": int(r["live_params"]), "param_fraction": float(r["param_fraction"]),
        })
    flops_path = run_dir / "flops.csv"
    if flops_path.is_file():
        with open(flops_path, newline="") as fh:
            for row, f in zip(parsed, csv.DictReader(fh)):
                row["inference_flops"] = int(f["inference_flops_per_example"])
    return summary, parsed


@dataclass
class CompareReport:
    rows: list[dict]
    curves: list[list]
    threshold: float
    baseline: str

    def table(self) -> str:
        """Fixed-width text table."""
        cols = COMPARE_COLUMNS
        cells = [[_cell(r[c]) for c in cols] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        lines.append(f"threshold = {self.threshold:.4f} val-acc points (baseline {self.baseline})")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = ([_cell(r[c]) for c in COMPARE_COLUMNS] for r in self.rows)
        (out / "compare.csv").write_text(_csv_text(COMPARE_COLUMNS, rows))
        (out / "curves_long.csv").write_text(_csv_text(CURVE_COLUMNS, self.curves))
        acc_params = ([c[0], c[1], c[4], c[6]] for c in self.curves if c[5] == "val_acc")
        (out / "accuracy_vs_params.csv").write_text(
            _csv_text(["run", "epoch", "live_params", "val_acc"], acc_params))


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "|".join(_cell(x) for x in v)
    return str(v)


def compare_report(*run_dirs, threshold_fraction: float | None = None) -> CompareReport:
    """Align completed runs against a baseline (the first regular run, else the first run).

    The threshold is ``threshold_fraction`` of the baseline's final validation
    accuracy.
    """
    if len(run_dirs) < 2:
        raise ComparisonError("compare needs at least two run directories")
    runs = [(str(d), *load_run(d)) for d in run_dirs]
    keys = ("split_seed", "val_fraction", "manifest_sha256", "train_records")
    ref = runs[0][1]["data"]
    for name, summary, _ in runs[1:]:
        diff = [k for k in keys if summary["data"].get(k) != ref.get(k)]
        if diff:
            raise ComparisonError(f"{name} used a different dataset split ({', '.join(diff)})")
    base_name, base_summary, base_rows = next(
        (r for r in runs if r[1]["mode"] == "regular"), runs[0])
    frac = threshold_fraction if threshold_fraction is not None else base_summary.get(
        "threshold_fraction", 0.9)
    threshold = frac * base_summary["final_val_acc"]
    base_ftt = flops_to_threshold_rows(base_rows, threshold)[0]

    rows, curves = [], []
    for name, summary, recs in runs:
        ftt, pf = flops_to_threshold_rows(recs, threshold)
        rows.append({
            "run": name, "mode": summary["mode"], "init_mode": summary.get("init_mode"),
            "seed": summary["seed"], "final_val_acc": summary["final_val_acc"],
            "test_acc": summary.get("test_acc"), "total_flops": summary["total_flops"],
            "flops_to_threshold": ftt, "param_fraction_at_threshold": pf,
            "stage_param_fractions": [s["param_fraction"] for s in summary["stages"]],
            "delta_val_acc": summary["final_val_acc"] - base_summary["final_val_acc"],
            "delta_total_flops": summary["total_flops"] - base_summary["total_flops"],
            "delta_flops_to_threshold": (None if ftt is None or base_ftt is None
                                         else ftt - base_ftt),
        })
        for r in recs:
            head = [name, r["epoch"], r["stage"], int(r["lookahead"]), r["live_params"]]
            curves.append(head + ["val_acc", repr(r["val_acc"])])
            if "inference_flops" in r:
                curves.append(head + ["inference_flops", r["inference_flops"]])
            curves.append(head + ["cumulative_flops", r["cumulative_flops"]])
    return CompareReport(rows, curves, threshold, base_name)


def flops_to_threshold_rows(rows: list[dict], threshold: float):
    for r in rows:
        if r["val_acc"] >= threshold:
            return r["cumulative_flops"], r["param_fraction"]
    return None, None


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig().with_overrides(**overrides) if overrides else ExperimentConfig()


__all__ = [
    "CONFIG_KEYS", "ExperimentConfig", "parse_config", "load_config", "prepare_data", "run",
    "evaluate", "compare_report", "CompareReport", "RunResult", "PreparedData",
    "flops_to_threshold", "default_config", "METRICS_COLUMNS", "FLOPS_COLUMNS",
]
