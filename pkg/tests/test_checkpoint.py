import json

import numpy as np
import pytest

from conftest import small_spec
from incremental_cnn.checkpoint import (MAGIC, Checkpoint, from_bytes, load_checkpoint,
                                        save_checkpoint, to_bytes)
from incremental_cnn.exceptions import FormatError
from incremental_cnn.growth import GrowthState
from incremental_cnn.model import build_model
from incremental_cnn.partition import Partition


def trained_model():
    model = build_model(small_spec(), live_layers=3, seed=8)
    for lid in model.slots:
        for k in model.slots[lid]:
            model.slots[lid][k] += 0.25
    model.set_frozen(["backbone.0"])
    model.dropout_rng.random(5)
    return model


def test_bit_exact_round_trip(tmp_path):
    model = trained_model()
    state = GrowthState(stage=1, num_stages=2, epoch=4, accuracy_history=[1.0, 2.5])
    state.log("window_angle", alpha=12.5)
    p = Partition.from_sizes([3, 3])
    path = save_checkpoint(tmp_path / "c.bin", model, p, state, {"shuffle": {"x": 1}},
                           {"note": "x"})
    ck = load_checkpoint(path)
    assert ck.partition == p
    assert ck.growth_state.to_dict() == state.to_dict()
    assert ck.extra == {"note": "x"} and ck.rng_state == {"shuffle": {"x": 1}}
    assert ck.model.frozen == model.frozen
    for lid in model.params:
        for k in model.params[lid]:
            assert ck.model.params[lid][k].tobytes() == model.params[lid][k].tobytes()
            assert ck.model.slots[lid][k].tobytes() == model.slots[lid][k].tobytes()
    assert to_bytes(ck) == path.read_bytes()
    assert ck.model.dropout_rng.random() == model.dropout_rng.random()


def test_starts_with_magic():
    raw = to_bytes(Checkpoint(trained_model()))
    assert raw.startswith(MAGIC)


def test_bad_magic():
    raw = bytearray(to_bytes(Checkpoint(trained_model())))
    raw[0:1] = b"X"
    with pytest.raises(FormatError, match="magic"):
        from_bytes(bytes(raw))


def test_truncated():
    raw = to_bytes(Checkpoint(trained_model()))
    with pytest.raises(FormatError):
        from_bytes(raw[:-8])
    with pytest.raises(FormatError):
        from_bytes(raw[:5])


def test_spec_mismatch():
    raw = to_bytes(Checkpoint(trained_model()))
    hlen = int.from_bytes(raw[12:20], "little")
    header = json.loads(raw[20:20 + hlen])
    header["network"]["backbone"][0]["filters"] = 5
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    forged = raw[:12] + len(hb).to_bytes(8, "little") + hb + raw[20 + hlen:]
    with pytest.raises(FormatError, match="shape"):
        from_bytes(forged)
