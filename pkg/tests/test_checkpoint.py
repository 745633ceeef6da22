import hashlib
import struct
from dataclasses import replace

import numpy as np
import pytest

from csmf import checkpoint
from csmf.checkpoint import MAGIC, CheckpointError
from csmf.data import GeneratorConfig, generate
from csmf.errors import VersionError
from csmf.pipeline import PipelineConfig, TrainingData, init_state, run
from csmf.retrieval import EvalSpec, evaluate

GEN = GeneratorConfig(n_users=150, n_items=100, requests_per_user=3, seed=8)
CFG = PipelineConfig(hidden=(8,), final=(4, 2, 2), batch_size=64, epochs=(1, 1, 1),
                     baseline_epochs=1, lr=1e-3, stage_metrics=False, seed=4)


@pytest.fixture(scope="module")
def td():
    train, test, _ = generate(GEN)
    return TrainingData(train, test)


@pytest.fixture(scope="module")
def trained(td):
    return run(CFG, td, *GEN.feature_schema())


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


def test_round_trip_byte_identical(trained, tmp_path):
    p = tmp_path / "a.ckpt"
    checkpoint.save(trained, p)
    back = checkpoint.load(p)
    q = tmp_path / "b.ckpt"
    checkpoint.save(back, q)
    assert p.read_bytes() == q.read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_round_trip_preserves_everything(trained, td):
    back = checkpoint.from_bytes(checkpoint.to_bytes(trained))
    assert back.config == trained.config and back.spec == trained.spec
    assert back.progress == trained.progress and back.rng_positions == trained.rng_positions
    assert [r.to_dict() for r in back.reports] == [r.to_dict() for r in trained.reports]
    a, b = trained.models["main"].store, back.models["main"].store
    assert a.census() == b.census() and b.committed == a.committed
    for pa, pb in zip(a, b):
        assert np.array_equal(pa.value, pb.value) and np.array_equal(pa.state, pb.state)
    spec = EvalSpec()
    assert evaluate(back.exporters(td.catalog), td.test, spec).to_dicts() == \
        evaluate(trained.exporters(td.catalog), td.test, spec).to_dicts()


def test_header_layout(trained):
    buf = checkpoint.to_bytes(trained)
    assert buf[:8] == MAGIC
    version, n_models, n_params = struct.unpack("<III", buf[8:20])
    assert (version, n_models) == (1, 1) and n_params == len(trained.models["main"].store)


@pytest.mark.parametrize("cut", [1, 33, 500])
def test_truncated_file_rejected(trained, cut):
    buf = checkpoint.to_bytes(trained)
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(buf[:-cut])


def test_corrupt_byte_rejected(trained):
    buf = bytearray(checkpoint.to_bytes(trained))
    buf[100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint.from_bytes(bytes(buf))


def test_bad_magic_and_version(trained):
    buf = checkpoint.to_bytes(trained)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(b"NOTACKPT" + buf[8:])
    body = buf[:-32]
    bumped = body[:8] + struct.pack("<I", 2) + body[12:]
    with pytest.raises(VersionError):
        checkpoint.from_bytes(reseal(bumped))


def _state_block_start(state) -> int:
    pos = 20
    store = state.models["main"].store
    for p in store:
        pos += 4 + len(p.name.encode("utf-8")) + 1 + 4 * p.value.ndim
    return pos + 4 * sum(p.value.size for p in store)


def test_invalid_state_byte_rejected(trained):
    body = bytearray(checkpoint.to_bytes(trained)[:-32])
    body[_state_block_start(trained)] = 250
    with pytest.raises(CheckpointError, match="state byte"):
        checkpoint.from_bytes(reseal(bytes(body)))


def test_nonzero_zero_state_rejected(trained):
    body = bytearray(checkpoint.to_bytes(trained)[:-32])
    store = trained.models["main"].store
    flat_states = np.concatenate([p.state.ravel() for p in store])
    k = int(np.flatnonzero(flat_states <= 1)[0])  # a StructuralZero or ZeroLocked entry
    values_start = _state_block_start(trained) - 4 * flat_states.size
    body[values_start + 4 * k:values_start + 4 * k + 4] = struct.pack("<f", 1.5)
    with pytest.raises(CheckpointError, match="zero-state"):
        checkpoint.from_bytes(reseal(bytes(body)))


def test_unsnapped_values_refused(td):
    st = init_state(CFG, *GEN.feature_schema())
    p = next(iter(st.models["main"].store))
    p.value.flat[0] = 0.1  # not representable in float32
    with pytest.raises(CheckpointError):
        checkpoint.to_bytes(st)


def test_baseline_checkpoints_round_trip(td):
    for mode in ("mixed_single", "separate_per_objective"):
        st = run(replace(CFG, mode=mode), td, *GEN.feature_schema())
        buf = checkpoint.to_bytes(st)
        back = checkpoint.from_bytes(buf)
        assert list(back.models) == list(st.models)
        assert checkpoint.to_bytes(back) == buf
