import csv
import json

import numpy as np
import pytest

from conftest import write_config
from incremental_cnn import cli
from incremental_cnn.checkpoint import load_checkpoint, save_checkpoint
from incremental_cnn.data import load_cifar10
from incremental_cnn.exceptions import ComparisonError, ConfigurationError
from incremental_cnn.experiment import (CONFIG_KEYS, FLOPS_COLUMNS, METRICS_COLUMNS,
                                        compare_report, evaluate, load_config, parse_config, run)
from incremental_cnn.training import accuracy

GOLDEN_METRICS = ("epoch,stage,lookahead,train_loss,train_acc,val_acc,step_flops,"
                  "cumulative_flops,live_params,param_fraction")
GOLDEN_FLOPS = ("epoch,stage,lookahead_flag,step_flops,cumulative_flops,"
                "inference_flops_per_example,live_params,param_fraction")


def config(tmp_path, cifar_dir, spec_file, name="run", **extra):
    values = {
        "network.file": spec_file, "data.path": cifar_dir, "train.epochs": 2,
        "train.batch_size": 32, "optim.learning_rate": 3e-3, "output.dir": tmp_path / name,
        "growth.window_size": 2, "growth.lookahead_epochs": 1,
    }
    values.update(extra)
    return write_config(tmp_path / f"{name}.cfg", **values)


def test_regular_one_conv(tmp_path, cifar_dir, one_conv_spec_file):
    cfg = load_config(config(tmp_path, cifar_dir, one_conv_spec_file, mode="regular"))
    result = run(cfg)
    lines = (result.output_dir / "metrics.csv").read_text().splitlines()
    assert lines[0] == GOLDEN_METRICS
    rows = list(csv.DictReader(lines))
    assert len(rows) == 2 and {r["stage"] for r in rows} == {"1"}
    for name in ("flops.csv", "events.log", "summary.json", "ckpt_final.bin",
                 "config.resolved.txt", "timing.csv"):
        assert (result.output_dir / name).is_file()
    summary = json.loads((result.output_dir / "summary.json").read_text())
    assert summary["epochs"] == 2 and summary["test_acc"] is not None


def test_incremental_two_groups(tmp_path, cifar_dir, small_spec_file):
    cfg = load_config(config(tmp_path, cifar_dir, small_spec_file, **{"train.epochs": 6}))
    out = run(cfg).output_dir
    events = (out / "events.log").read_text().splitlines()
    assert sum(" event=grow " in e for e in events) == 1
    assert (out / "ckpt_stage1.bin").is_file() and (out / "ckpt_final.bin").is_file()
    assert load_checkpoint(out / "ckpt_stage1.bin").model.live_layers == 3
    assert (out / "flops.csv").read_text().splitlines()[0] == GOLDEN_FLOPS


def test_same_seed_is_byte_identical(tmp_path, cifar_dir, small_spec_file):
    outs = []
    for name in ("a", "b"):
        cfg = load_config(config(tmp_path, cifar_dir, small_spec_file, name=name,
                                 **{"train.epochs": 5}))
        outs.append(run(cfg).output_dir)
    for f in ("metrics.csv", "flops.csv", "events.log", "ckpt_final.bin", "ckpt_stage1.bin"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_evaluate_val_matches_metrics(tmp_path, cifar_dir, small_spec_file):
    cfg = load_config(config(tmp_path, cifar_dir, small_spec_file, **{"data.subset_size": 150}))
    result = run(cfg)
    ckpt = result.output_dir / "ckpt_final.bin"
    assert abs(evaluate(ckpt, cifar_dir, "val") - result.records[-1].val_acc) < 1e-6
    assert (result.output_dir / "subset_manifest.txt").is_file()


def test_constant_logits_give_majority_share(tmp_path, cifar_dir, small_spec_file):
    cfg = load_config(config(tmp_path, cifar_dir, small_spec_file))
    ckpt_path = run(cfg).output_dir / "ckpt_final.bin"
    ck = load_checkpoint(ckpt_path)
    test = load_cifar10(cifar_dir, "test")
    counts = np.bincount(test.labels, minlength=10)
    top = int(counts.argmax())
    head = ck.model.params["classifier.1"]
    head["weight"][:] = 0
    head["bias"][:] = 0
    head["bias"][top] = 1
    save_checkpoint(ckpt_path, ck.model, ck.partition, ck.growth_state, ck.rng_state, ck.extra)
    assert evaluate(ckpt_path, cifar_dir, "test") == pytest.approx(100 * counts.max() / len(test))
    # round trip through disk gives the in-memory figure
    assert evaluate(ckpt_path, cifar_dir, "test") == accuracy(ck.model, test)


def test_compare_with_itself(tmp_path, cifar_dir, small_spec_file):
    out = run(load_config(config(tmp_path, cifar_dir, small_spec_file))).output_dir
    report = compare_report(out, out)
    for row in report.rows:
        assert row["delta_val_acc"] == 0 and row["delta_total_flops"] == 0
        assert row["delta_flops_to_threshold"] in (0, None)
    report.write(tmp_path / "cmp")
    with open(tmp_path / "cmp" / "accuracy_vs_params.csv") as fh:
        pts = list(csv.DictReader(fh))
    assert len(pts) == 2 * 2
    assert list(pts[0]) == ["run", "epoch", "live_params", "val_acc"]
    assert "threshold" in report.table()


def test_compare_rejects_different_splits(tmp_path, cifar_dir, small_spec_file):
    a = run(load_config(config(tmp_path, cifar_dir, small_spec_file, name="a"))).output_dir
    b = run(load_config(config(tmp_path, cifar_dir, small_spec_file, name="b",
                               **{"data.split_seed": 1}))).output_dir
    with pytest.raises(ComparisonError, match="split_seed"):
        compare_report(a, b)
    with pytest.raises(ComparisonError):
        compare_report(a)


def test_config_errors_list_fields():
    with pytest.raises(ConfigurationError) as err:
        parse_config("train.batch_size = 0\ngrowth.gamma = 2\nbogus = 1\n")
    msg = str(err.value)
    assert "bogus" in msg
    with pytest.raises(ConfigurationError) as err:
        parse_config("train.batch_size = 0\ngrowth.gamma = 2\n")
    assert "batch_size" in str(err.value) and "gamma" in str(err.value)


def test_explicit_partition_is_validated(tmp_path, small_spec_file):
    cfg = parse_config(f"network.file = {small_spec_file}\npartition = [3, 3]\n")
    assert cfg.partition_for(cfg.network_spec()).sizes() == [3, 3]
    with pytest.raises(ConfigurationError, match="no trainable layer"):
        parse_config(f"network.file = {small_spec_file}\npartition = [3, 1, 2]\n")


def test_resolved_config_round_trips(tmp_path, small_spec_file):
    cfg = parse_config(f"network.file = {small_spec_file}\ngrowth.gamma = 0.5\n")
    again = parse_config(cfg.to_text())
    assert again.values == cfg.values
    assert set(cfg.values) == set(CONFIG_KEYS)


def test_column_sets_are_stable():
    assert ",".join(METRICS_COLUMNS) == GOLDEN_METRICS
    assert ",".join(FLOPS_COLUMNS) == GOLDEN_FLOPS


class TestCli:
    def test_train_evaluate_compare(self, tmp_path, cifar_dir, one_conv_spec_file, capsys):
        path = config(tmp_path, cifar_dir, one_conv_spec_file, mode="regular")
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "x")]) == 0
        assert cli.main(["train", "--config", str(path), "--seed", "1",
                         "--out", str(tmp_path / "y")]) == 0
        ck = tmp_path / "x" / "ckpt_final.bin"
        assert cli.main(["evaluate", "--checkpoint", str(ck), "--data", str(cifar_dir),
                         "--split", "val"]) == 0
        assert cli.main(["compare", str(tmp_path / "x"), str(tmp_path / "y"),
                         "--out", str(tmp_path / "cmp")]) == 0
        assert (tmp_path / "cmp" / "compare.csv").is_file()
        assert "val accuracy" in capsys.readouterr().out

    def test_env_var_fallback(self, tmp_path, cifar_dir, one_conv_spec_file, monkeypatch):
        path = config(tmp_path, cifar_dir, one_conv_spec_file, mode="regular")
        assert cli.main(["train", "--config", str(path)]) == 0
        monkeypatch.setenv("CIFAR10_ROOT", str(cifar_dir))
        ck = tmp_path / "run" / "ckpt_final.bin"
        assert cli.main(["evaluate", "--checkpoint", str(ck)]) == 0

    def test_config_error_exit_code(self, tmp_path):
        bad = write_config(tmp_path / "bad.cfg", **{"growth.gamma": 3})
        assert cli.main(["train", "--config", str(bad)]) == 2

    def test_io_error_exit_codes(self, tmp_path, one_conv_spec_file, monkeypatch):
        monkeypatch.delenv("CIFAR10_ROOT", raising=False)
        assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 3
        path = write_config(tmp_path / "c.cfg", **{"network.file": one_conv_spec_file,
                                                   "data.path": tmp_path / "nowhere"})
        assert cli.main(["train", "--config", str(path)]) == 3
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"not a checkpoint at all")
        assert cli.main(["evaluate", "--checkpoint", str(junk), "--data", str(tmp_path)]) == 3


def test_desk6_pipeline_smoke(tmp_path, cifar_dir):
    """The desk network end to end on the synthetic CIFAR-format fixture (K=3)."""
    path = write_config(tmp_path / "desk.cfg", network="desk6", **{
        "data.path": cifar_dir, "train.epochs": 7, "train.batch_size": 64,
        "growth.window_size": 2, "growth.lookahead_epochs": 1, "optim.learning_rate": 1e-3,
        "output.dir": tmp_path / "desk", "growth.max_epochs_per_stage": 2,
        "growth.min_windows_per_stage": 1})
    result = run(load_config(path))
    stages = [(r.stage, r.lookahead) for r in result.records]
    assert stages == [(1, False), (1, False), (2, True), (2, False), (2, False),
                      (3, True), (3, False)]
    fractions = [s["param_fraction"] for s in result.summary["stages"]]
    assert fractions == sorted(fractions) and fractions[-1] == 1.0
    assert result.summary["partition"] == [5, 5, 5]
