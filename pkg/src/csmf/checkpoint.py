"""Binary checkpoints of a :class:`~csmf.pipeline.RunState`.

Layout (little-endian throughout)::

    magic    8 bytes  b"CSMFCKPT"
    version  u32
    n_models u32, n_params u32
    shape table: per parameter
        model index u16, name length u16, name (utf-8), ndim u8, dims u32 * ndim
    values:  float32 per entry, parameters in table order
    states:  one byte per entry, same order
    echo:    u32 length + utf-8 JSON (configs, progress, reports, rng positions)
    sha256 of everything above (32 bytes)

Values are float32; the pipeline snaps to float32 at stage boundaries, so
saving loses nothing and load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .errors import CSMFError, VersionError
from .numerics import RngStream
from .pipeline import (
    RunState,
    StageReport,
    config_from_dict,
    config_to_dict,
    spec_from_dict,
    spec_to_dict,
)
from .stagenet import ALL_STATES, Stage
from .towers import TwoTowerModel

MAGIC = b"CSMFCKPT"
VERSION = 1


class CheckpointError(CSMFError):
    """Unreadable, truncated or inconsistent checkpoint file."""


def _model_spec(state: RunState):
    return state.spec if state.config.mode == "csmf" else state.spec.single_stage()


def to_bytes(state: RunState) -> bytes:
    names = list(state.models)
    params = [(mi, p) for mi, n in enumerate(names) for p in state.models[n].store]
    out = [MAGIC, struct.pack("<III", VERSION, len(names), len(params))]
    for mi, p in params:
        nb = p.name.encode("utf-8")
        out.append(struct.pack("<HH", mi, len(nb)) + nb + struct.pack("<B", p.value.ndim))
        out.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
    for _, p in params:
        f32 = p.value.astype("<f4")
        if not np.array_equal(f32.astype(np.float64), p.value):
            raise CheckpointError(f"{p.name} holds values not representable in float32; "
                                  "checkpoints are written at stage boundaries")
        out.append(f32.tobytes())
    for _, p in params:
        out.append(p.state.astype(np.uint8).tobytes())
    echo = {
        "config": config_to_dict(state.config),
        "spec": spec_to_dict(state.spec),
        "models": [{"name": n, "committed": sorted(int(s) for s in state.models[n].store.committed)}
                   for n in names],
        "progress": list(state.progress),
        "reports": [r.to_dict() for r in state.reports],
        "rng_positions": {k: list(v) for k, v in sorted(state.rng_positions.items())},
    }
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> RunState:
    if len(buf) < len(MAGIC) + 4 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    if len(buf) < 32:
        raise CheckpointError("checkpoint is truncated")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    n_models, n_params = r.unpack("<II")
    table = []
    for _ in range(n_params):
        mi, nlen = r.unpack("<HH")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        table.append((mi, name, tuple(shape)))
    values = []
    for _, _, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        values.append(np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape))
    states = []
    for _, _, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        states.append(np.frombuffer(r.take(n), dtype=np.uint8).copy().reshape(shape))
    (blen,) = r.unpack("<I")
    echo = json.loads(r.take(blen).decode("utf-8"))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint payload")

    cfg = config_from_dict(echo["config"])
    spec = spec_from_dict(echo["spec"])
    state = RunState(cfg, spec, {}, list(echo["progress"]),
                     [StageReport(**d) for d in echo["reports"]],
                     {k: list(v) for k, v in echo["rng_positions"].items()})
    if len(echo["models"]) != n_models:
        raise CheckpointError("model count in header and echo disagree")
    valid = np.array(sorted(ALL_STATES), dtype=np.uint8)
    for mi, m in enumerate(echo["models"]):
        model = TwoTowerModel(_model_spec(state), RngStream(0))
        model.store.committed = {Stage(s) for s in m["committed"]}
        state.models[m["name"]] = model
    for (mi, name, shape), val, st in zip(table, values, states):
        model = state.models[echo["models"][mi]["name"]]
        if name not in model.store.params:
            raise CheckpointError(f"parameter {name} does not belong to the configured model")
        p = model.store[name]
        if p.value.shape != shape:
            raise CheckpointError(f"{name}: stored shape {shape}, model expects {p.value.shape}")
        if not np.all(np.isin(st, valid)):
            raise CheckpointError(f"{name}: invalid state byte")
        p.value[...] = val
        p.state[...] = st
    for mi, m in enumerate(echo["models"]):
        store = state.models[m["name"]].store
        if len(store) != sum(1 for t in table if t[0] == mi):
            raise CheckpointError("checkpoint is missing parameters")
        if not store.zero_states_hold():
            raise CheckpointError("zero-state parameters hold nonzero values")
    return state


def save(state: RunState, path) -> None:
    """Write atomically (temp file then rename)."""
    data = to_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path) -> RunState:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
