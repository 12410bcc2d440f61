"""Single-file checkpoints with bit-exact round trip.

Layout::

    8 bytes   magic  b"INCRCNN\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length H, uint64 little-endian
    H bytes   UTF-8 JSON header (network, partition, frozen flags, RNG and
              growth state, blob index)
    ...       parameter and optimizer-slot blobs, little-endian, in index order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .growth import GrowthState
from .model import ModelState
from .partition import Partition
from .specs import NetworkSpec, param_shapes

MAGIC = b"INCRCNN\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: ModelState
    partition: Partition | None = None
    growth_state: GrowthState | None = None
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _blobs(model: ModelState):
    for lid in sorted(model.params):
        for name in sorted(model.params[lid]):
            yield f"{lid}.{name}", model.params[lid][name]
            yield f"{lid}.{name}.rms", model.slots[lid][name]


def to_bytes(ckpt: Checkpoint) -> bytes:
    model = ckpt.model
    index, chunks, offset = [], [], 0
    for name, arr in _blobs(model):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        index.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "incremental-cnn-checkpoint",
        "network": model.spec.to_dict(),
        "partition": None if ckpt.partition is None else ckpt.partition.sizes(),
        "live_layers": model.live_layers,
        "seed": model.seed,
        "dtype": model.dtype.str,
        "classifier_generation": model.classifier_generation,
        "step_count": model.step_count,
        "frozen": {k: bool(v) for k, v in sorted(model.frozen.items())},
        "rng": {"dropout": model.dropout_rng.bit_generator.state,
                "streams": ckpt.rng_state},
        "growth_state": None if ckpt.growth_state is None else ckpt.growth_state.to_dict(),
        "extra": ckpt.extra,
        "blobs": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{source}: too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    body = _PREFIX.size + hlen
    try:
        header = json.loads(raw[_PREFIX.size:body].decode())
        spec = NetworkSpec.from_dict(header["network"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: unreadable header: {exc}") from None

    model = ModelState(spec, header["live_layers"], {}, {}, {}, seed=header["seed"],
                       dtype=np.dtype(header["dtype"]),
                       classifier_generation=header["classifier_generation"],
                       step_count=header["step_count"])
    model.dropout_rng.bit_generator.state = header["rng"]["dropout"]
    for entry in header["blobs"]:
        start = body + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise FormatError(f"{source}: blob {entry['name']} runs past end of file")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"])),
                            offset=start).reshape(entry["shape"])
        arr = arr.astype(model.dtype)
        name = entry["name"]
        target = model.slots if name.endswith(".rms") else model.params
        base = name[:-4] if name.endswith(".rms") else name
        lid, pname = base.rsplit(".", 1)
        target.setdefault(lid, {})[pname] = arr
    model.frozen = {k: bool(v) for k, v in header["frozen"].items()}
    _check_against_spec(model, source)

    partition = None
    if header.get("partition") is not None:
        partition = Partition.from_sizes(header["partition"])
    growth = header.get("growth_state")
    return Checkpoint(model, partition,
                      None if growth is None else GrowthState.from_dict(growth),
                      header["rng"].get("streams"), header.get("extra") or {})


def _check_against_spec(model: ModelState, source: str) -> None:
    bshapes, cshapes = model.spec.shapes(model.live_layers)
    expected = {}
    for i, layer in enumerate(model.spec.backbone[: model.live_layers]):
        if layer.trainable:
            expected[f"backbone.{i}"] = param_shapes(layer, bshapes[i])
    for j, layer in enumerate(model.spec.classifier.layers):
        if layer.trainable:
            expected[f"classifier.{j}"] = param_shapes(layer, cshapes[j])
    if set(expected) != set(model.params) or set(expected) != set(model.slots):
        raise FormatError(
            f"{source}: checkpoint layers {sorted(model.params)} do not match the network "
            f"spec {sorted(expected)}"
        )
    for lid, shapes in expected.items():
        for name, shape in shapes.items():
            for store in (model.params, model.slots):
                got = store[lid].get(name)
                if got is None or got.shape != tuple(shape):
                    raise FormatError(
                        f"{source}: {lid}.{name} has shape "
                        f"{None if got is None else got.shape}, spec expects {tuple(shape)}"
                    )


def save_checkpoint(path, model: ModelState, partition: Partition | None = None,
                    growth_state: GrowthState | None = None, rng_state: dict | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(Checkpoint(model, partition, growth_state, rng_state, extra or {})))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), str(path))
