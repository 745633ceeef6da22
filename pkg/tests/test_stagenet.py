import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csmf.errors import ConfigError, ShapeError
from csmf.numerics import RngStream, finite_diff_grad
from csmf.stagenet import (
    STRUCTURAL_ZERO,
    ZERO_LOCKED,
    Adam,
    BlockLayout,
    ParameterStore,
    Stage,
    adam_step,
    backward,
    build_layer,
    describe_state,
    forward,
    frozen,
    trainable,
)


def layer(in_l, out_l, seed=0, act="relu", structure=True):
    return build_layer("l", BlockLayout(*in_l), BlockLayout(*out_l), RngStream(seed), 0.5,
                       activation=act, structure=structure)


def scramble_states(lay, seed):
    """Random legal lifecycle states: label never exceeds the target block."""
    rng = np.random.default_rng(seed)
    for p in lay.params:
        allowed = p.state != STRUCTURAL_ZERO
        draw = rng.integers(0, 4, size=p.state.shape)
        tgt = p.target
        s = rng.integers(0, 3, size=p.state.shape)
        s = np.minimum(s, tgt)
        new = np.where(draw == 0, ZERO_LOCKED,
                       np.where(draw == 1, frozen(0) + s, trainable(0) + s)).astype(np.uint8)
        p.state[allowed] = new[allowed]
        p.value[p.state == ZERO_LOCKED] = 0.0
        if p.name.endswith("bias"):
            p.value[p.state != ZERO_LOCKED] = rng.normal(size=int((p.state != ZERO_LOCKED).sum()))


# ---------------------------------------------------------------- build_layer


def test_build_111_structural_zeros():
    lay = layer((1, 1, 1), (1, 1, 1))
    assert lay.weight.value.size == 9
    sz = lay.weight.state == STRUCTURAL_ZERO
    assert sz.sum() == 3
    # rows are targets, columns sources: O->D, R->D, R->O
    assert sz[0, 1] and sz[0, 2] and sz[1, 2]


def test_build_single_stage_dense():
    lay = layer((2, 0, 0), (2, 0, 0))
    assert np.all(lay.weight.state == trainable(Stage.D))
    assert np.all(lay.weight.value != 0)


def test_build_211_count():
    lay = layer((2, 1, 1), (2, 1, 1))
    assert (lay.weight.state == STRUCTURAL_ZERO).sum() == 5


def test_build_values_zero_on_structural():
    lay = layer((3, 2, 2), (4, 2, 1))
    assert np.all(lay.weight.value[lay.weight.state == STRUCTURAL_ZERO] == 0.0)


def test_build_rejects_empty_exposure_block():
    with pytest.raises(ConfigError):
        layer((2, 1, 1), (0, 2, 2))


def test_structure_off_is_dense():
    lay = layer((1, 1, 1), (1, 1, 1), structure=False)
    assert not np.any(lay.weight.state == STRUCTURAL_ZERO)


def test_target_labels_follow_output_block():
    lay = layer((2, 1, 1), (2, 1, 1))
    assert lay.weight.target[:, 0].tolist() == [0, 0, 1, 2]
    assert lay.bias.target.tolist() == [0, 0, 1, 2]


def test_layout_helpers():
    lay = BlockLayout(4, 2, 2)
    assert lay.width == 8 and lay.prefix_width(Stage.O) == 6
    assert lay.block_slice(Stage.R) == slice(6, 8)
    assert BlockLayout.from_fractions(64) == BlockLayout(32, 16, 16)
    assert BlockLayout.concat([BlockLayout(1, 2, 3), BlockLayout(4, 0, 1)]) == BlockLayout(5, 2, 4)


def test_describe_state():
    assert describe_state(0) == "StructuralZero"
    assert describe_state(ZERO_LOCKED) == "ZeroLocked"
    assert describe_state(trainable(Stage.O)) == "Trainable(O)"
    assert describe_state(frozen(Stage.R)) == "Frozen(R)"


def test_stage_parse():
    assert Stage.parse("click") == Stage.O
    assert Stage.parse("R") == Stage.R
    assert Stage.parse(0) == Stage.D
    with pytest.raises(ConfigError):
        Stage.parse("bogus")


# ---------------------------------------------------------------- forward


def test_forward_full_prefix_is_plain_dense():
    lay = layer((3, 2, 1), (2, 2, 2), act="identity", structure=False)
    x = np.random.default_rng(0).normal(size=(4, 6))
    assert np.allclose(forward(lay, x, Stage.R), x @ lay.weight.value.T + lay.bias.value)


def test_forward_prefix_d_zeroes_later_blocks():
    lay = layer((3, 2, 1), (2, 2, 2), act="identity")
    lay.bias.value[:] = 1.0
    out = forward(lay, np.ones((3, 6)), Stage.D)
    assert np.all(out[:, 2:] == 0.0)


def test_forward_prefix_consistency_bitwise():
    lay = layer((3, 2, 2), (4, 3, 2), act="identity")
    scramble_states(lay, 1)
    x = np.random.default_rng(3).normal(size=(5, 7))
    x[:, 3:] *= 10  # later-block inputs must not leak into earlier outputs
    d, o, r = (forward(lay, x, s) for s in Stage)
    assert np.array_equal(d[:, :4], r[:, :4])
    assert np.array_equal(o[:, :7], r[:, :7])


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(layer((2, 1, 1), (2, 1, 1)), np.ones(3))


@settings(max_examples=60, deadline=None)
@given(
    in_l=st.tuples(st.integers(1, 4), st.integers(0, 3), st.integers(0, 3)),
    out_l=st.tuples(st.integers(1, 4), st.integers(0, 3), st.integers(0, 3)),
    seed=st.integers(0, 10_000),
)
def test_prefix_consistency_property(in_l, out_l, seed):
    lay = layer(in_l, out_l, seed=seed)
    scramble_states(lay, seed)
    x = np.random.default_rng(seed).normal(size=(3, sum(in_l)))
    outs = [forward(lay, x, s) for s in Stage]
    nd, no = out_l[0], out_l[0] + out_l[1]
    assert np.array_equal(outs[0][:, :nd], outs[2][:, :nd])
    assert np.array_equal(outs[1][:, :no], outs[2][:, :no])
    assert np.all(outs[0][:, nd:] == 0) and np.all(outs[1][:, no:] == 0)


# ---------------------------------------------------------------- backward


def test_backward_all_frozen():
    lay = layer((2, 1, 1), (2, 1, 1), act="identity")
    for p in lay.params:
        p.state[p.state != STRUCTURAL_ZERO] = frozen(Stage.D)
    x = np.ones((2, 4))
    gin, grads = backward(lay, x, np.ones((2, 4)), Stage.R)
    assert all(np.all(g == 0) for g in grads.values())
    assert np.any(gin != 0)


def test_backward_scalar_chain_rule():
    lay = layer((1, 0, 0), (1, 0, 0), act="identity")
    lay.weight.value[:] = 0.7
    _, grads = backward(lay, np.array([[3.0]]), np.array([[2.0]]), Stage.R)
    assert grads["l.weight"][0, 0] == 6.0
    assert grads["l.bias"][0] == 2.0


def _fd_check(lay, prefix, train_prefix, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, lay.in_layout.width))
    c = rng.normal(size=(4, lay.out_layout.width))

    def loss_of(w, b):
        sw, sb = lay.weight.value.copy(), lay.bias.value.copy()
        lay.weight.value[...] = w
        lay.bias.value[...] = b
        out = forward(lay, x, prefix)
        lay.weight.value[...] = sw
        lay.bias.value[...] = sb
        return float((out * c).sum())

    gin, grads = backward(lay, x, c, prefix, train_prefix=train_prefix)
    w0, b0 = lay.weight.value.copy(), lay.bias.value.copy()
    fd_w = finite_diff_grad(lambda w: loss_of(w.reshape(w0.shape), b0), w0.ravel()).reshape(w0.shape)
    fd_b = finite_diff_grad(lambda b: loss_of(w0, b), b0)
    fd_x = finite_diff_grad(lambda v: float((forward(lay, v.reshape(x.shape), prefix) * c).sum()),
                            x.ravel()).reshape(x.shape)
    tw = lay.weight.trainable(train_prefix)
    tb = lay.bias.trainable(train_prefix)
    for analytic, fd, mask in ((grads["l.weight"], fd_w, tw), (grads["l.bias"], fd_b, tb)):
        assert np.all(analytic[~mask] == 0.0)
        a, f = analytic[mask], fd[mask]
        assert np.linalg.norm(a - f) <= 1e-4 * max(np.linalg.norm(f), 1e-6)
    assert np.linalg.norm(gin - fd_x) <= 1e-4 * max(np.linalg.norm(fd_x), 1e-6)


@pytest.mark.parametrize("act", ["relu", "identity"])
@pytest.mark.parametrize("prefix", list(Stage))
def test_backward_matches_finite_differences(act, prefix):
    for seed in range(5):
        lay = layer((3, 2, 2), (3, 2, 2), seed=seed, act=act)
        scramble_states(lay, seed)
        _fd_check(lay, prefix, prefix, seed)


def test_backward_train_prefix_narrower_than_forward():
    lay = layer((3, 2, 2), (3, 2, 2), seed=4)
    scramble_states(lay, 4)
    _fd_check(lay, Stage.R, Stage.D, 4)


def test_backward_shape_error():
    lay = layer((2, 1, 1), (2, 1, 1))
    with pytest.raises(ShapeError):
        backward(lay, np.ones((2, 4)), np.ones((2, 3)))


# ---------------------------------------------------------------- store / adam


def store_with(values, states):
    from csmf.stagenet import Param

    s = ParameterStore()
    v = np.asarray(values, dtype=float)
    s.add(Param("p", v, np.asarray(states, dtype=np.uint8), np.zeros(v.shape, np.uint8), "g"))
    return s


def test_adam_frozen_unchanged():
    s = store_with([1.0, 2.0], [frozen(0), trainable(0)])
    adam_step(s, {"p": np.array([5.0, 5.0])}, lr=0.1)
    assert s["p"].value[0] == 1.0 and s["p"].value[1] != 2.0


def test_adam_first_step_is_lr_sign():
    for g in (3.0, -0.02):
        s = store_with([0.5], [trainable(0)])
        adam_step(s, {"p": np.array([g])}, lr=1e-3)
        assert abs(s["p"].value[0] - (0.5 - 1e-3 * np.sign(g))) < 1e-9


def test_adam_zero_lr_is_noop():
    s = store_with([0.5, -1.0], [trainable(0), trainable(0)])
    adam_step(s, {"p": np.array([1.0, 1.0])}, lr=0.0)
    assert s["p"].value.tolist() == [0.5, -1.0]


def test_adam_negative_lr_rejected():
    s = store_with([0.5], [trainable(0)])
    with pytest.raises(ConfigError):
        adam_step(s, {"p": np.array([1.0])}, lr=-1.0)
    with pytest.raises(ConfigError):
        Adam(lr=0.0)


def test_adam_respects_prefix_and_moments():
    s = store_with([1.0, 1.0], [trainable(0), trainable(1)])
    m, v = {}, {}
    adam_step(s, {"p": np.array([1.0, 1.0])}, lr=0.1, m=m, v=v, prefix=Stage.D)
    assert s["p"].value[1] == 1.0
    assert m["p"][1] == 0.0 and v["p"][1] == 0.0


def test_store_census_digest_snap():
    s = store_with([0.0, 0.1, 0.3], [STRUCTURAL_ZERO, frozen(0), trainable(1)])
    census = s.census()
    assert census["StructuralZero"] == 1 and census["Frozen(D)"] == 1 and census["Trainable(O)"] == 1
    assert sum(census.values()) == 3
    d = s.digest(frozen(0))
    s["p"].value[2] = 9.0
    assert s.digest(frozen(0)) == d
    s.snap_float32()
    assert s["p"].value[1] == float(np.float32(0.1))
    assert s.zero_states_hold()
    s["p"].value[0] = 1.0
    assert not s.zero_states_hold()
