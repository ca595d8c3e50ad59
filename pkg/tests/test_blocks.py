import numpy as np
import pytest

from mambair.blocks import (ModelConfig, ModelState, channel_attention, expected_param_count, init_state,
                            mambair_forward, rssb_forward, rssg_forward, vssm_forward)
from mambair.gradcheck import check_gradients
from mambair.resample import bilinear_upsample
from mambair.tensor import Tensor

TINY = dict(channels=4, groups=1, blocks_per_group=1, state=2, ca_reduction=2, bottleneck=2)


def _zero_all(state: ModelState, keep=()):
    for name, p in state.items():
        if not any(name.endswith(k) for k in keep):
            p.data[...] = 0.0


# --- channel attention ------------------------------------------------------

def _ca_weights(C, r, rng=None, zero=False):
    make = (lambda s: np.zeros(s)) if zero else (lambda s: rng.normal(size=s))
    return {"fc1.w": Tensor(make((C, C // r))), "fc1.b": Tensor(make(C // r)),
            "fc2.w": Tensor(make((C // r, C))), "fc2.b": Tensor(make(C))}


def test_ca_zero_weights_halves_input():
    x = np.random.default_rng(0).normal(size=(3, 3, 4))
    np.testing.assert_allclose(channel_attention(x, _ca_weights(4, 2, zero=True)).data, 0.5 * x, atol=0)


def test_ca_zero_input():
    out = channel_attention(np.zeros((2, 3, 4)), _ca_weights(4, 2, np.random.default_rng(1)))
    assert np.all(out.data == 0.0)


def test_ca_scales_each_channel_into_unit_interval():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.5, 1.5, size=(2, 3, 3, 4))
    out = channel_attention(x, _ca_weights(4, 2, rng)).data
    ratio = out / x
    for b in range(2):
        for c in range(4):
            r = ratio[b, ..., c]
            assert np.allclose(r, r.flat[0]) and 0.0 < r.flat[0] < 1.0


# --- VSSM -------------------------------------------------------------------

def _vssm(cfg, seed=0):
    state = init_state(cfg, seed)
    return state, state.sub("g0.b0.vssm")


def test_vssm_gate_branch_zero_gives_output_bias():
    cfg = ModelConfig(**TINY)
    state, w = _vssm(cfg)
    w["in_z.w"].data[...] = 0.0
    w["in_z.b"].data[...] = 0.0
    w["out_proj.b"].data[...] = np.arange(4.0)
    out = vssm_forward(np.random.default_rng(3).normal(size=(3, 5, 4)), w, cfg).data
    assert np.array_equal(out, np.broadcast_to(np.arange(4.0), (3, 5, 4)))


@pytest.mark.parametrize("hw", [(1, 1), (2, 7), (5, 3)])
def test_vssm_shape(hw):
    cfg = ModelConfig(**TINY)
    _, w = _vssm(cfg)
    assert vssm_forward(np.zeros(hw + (4,)), w, cfg).shape == hw + (4,)


def test_vssm_gradients():
    cfg = ModelConfig(channels=8, groups=1, blocks_per_group=1, state=2, ca_reduction=4, bottleneck=2)
    _, w = _vssm(cfg, seed=4)
    rng = np.random.default_rng(4)
    for p in w.values():
        p.data[...] = p.data + rng.normal(scale=0.1, size=p.shape)
    x = Tensor(rng.normal(size=(4, 4, 8)))
    wt = rng.normal(size=(4, 4, 8))
    rep = check_gradients(lambda: (vssm_forward(x, w, cfg) * wt).sum(), w, samples=60, seed=4)
    assert rep["max_rel_error"] <= 1e-5


# --- RSSB / RSSG ------------------------------------------------------------

def test_rssb_zero_weights_is_skip_path():
    cfg = ModelConfig(**TINY)
    state = init_state(cfg)
    w = state.sub("g0.b0")
    for name, p in w.items():
        if not name.startswith(("skip", "ln1.g", "ln2.g", "vssm.out_norm.g", "vssm.ssm.a_log")):
            p.data[...] = 0.0
    f = np.random.default_rng(5).normal(size=(3, 4, 4))
    np.testing.assert_allclose(rssb_forward(f, w, cfg).data, f, atol=1e-15)


def test_rssb_without_skips_is_bias_only():
    cfg = ModelConfig(**TINY)
    state = init_state(cfg)
    w = state.sub("g0.b0")
    for name, p in w.items():
        if not name.endswith(".g") and not name.startswith("vssm.ssm.a_log"):
            p.data[...] = 0.0
    w["vssm.out_proj.b"].data[...] = 0.25
    w["skip1"].data[...] = 0.0
    w["skip2"].data[...] = 0.0
    out = rssb_forward(np.random.default_rng(6).normal(size=(3, 3, 4)), w, cfg).data
    # conv biases are zero; the CA gate sees GAP of a zero map and halves it
    assert np.allclose(out, out.reshape(-1, 4)[0])


def test_rssb_shape_7x5x16():
    cfg = ModelConfig(channels=16, groups=1, blocks_per_group=1, state=4)
    state = init_state(cfg)
    assert rssb_forward(np.zeros((7, 5, 16)), state.sub("g0.b0"), cfg).shape == (7, 5, 16)


@pytest.mark.parametrize("flags", [dict(use_local_conv=False), dict(use_local_conv=False, use_channel_attention=False),
                                   dict(replace_with_mlp=True), dict(scan_directions=1), dict(scan_directions=2),
                                   dict(shared_scan_params=True)])
def test_ablation_variants_run_and_count(flags):
    cfg = ModelConfig(**{**TINY, **flags})
    state = init_state(cfg)
    assert state.num_params() == expected_param_count(cfg)
    out = mambair_forward(np.random.default_rng(0).random((5, 6, 3)), state)
    assert out.shape == (5, 6, 3) and np.all(np.isfinite(out.data))


def test_ablation_flags_remove_parameters():
    names = set(init_state(ModelConfig(**TINY, use_local_conv=False)).params)
    assert not any(".conv1." in n for n in names) and any(".ca." in n for n in names)
    names = set(init_state(ModelConfig(**TINY, replace_with_mlp=True)).params)
    assert any(".mlp." in n for n in names) and not any(".ca." in n for n in names)


def test_rssg_zero_tail_is_identity_residual_plus_blocks():
    cfg = ModelConfig(**TINY)
    state = init_state(cfg)
    state["g0.conv.w"].data[...] = 0.0
    f = np.random.default_rng(7).normal(size=(3, 3, 4))
    assert np.array_equal(rssg_forward(Tensor(f), state, 0).data, f)


# --- full network ---------------------------------------------------------------

def test_default_config_counts():
    cfg = ModelConfig()
    state = init_state(cfg)
    assert state.num_params() == expected_param_count(cfg) == 48487


def test_identity_head_reproduces_input_plus_bias():
    cfg = ModelConfig(**TINY)
    state = init_state(cfg, identity_head=True)
    x = np.random.default_rng(8).random((6, 6, 3))
    assert np.array_equal(mambair_forward(x, state).data, x)
    state["conv_last.b"].data[...] = [0.1, 0.0, -0.1]
    np.testing.assert_allclose(mambair_forward(x, state).data, x + [0.1, 0.0, -0.1], atol=1e-15)


def test_all_deep_weights_zero_denoise():
    cfg = ModelConfig(**TINY)
    state = init_state(cfg)
    _zero_all(state, keep=("skip1", "skip2", ".g"))
    x = np.random.default_rng(9).random((4, 4, 3))
    assert np.array_equal(mambair_forward(x, state).data, x)


@pytest.mark.parametrize("task,scale", [("sr2", 2), ("sr3", 3), ("sr4", 4)])
def test_sr_shapes(task, scale):
    state = init_state(ModelConfig(**TINY, task=task))
    assert mambair_forward(np.zeros((8, 8, 3)), state).shape == (8 * scale, 8 * scale, 3)


def test_sr_residual_is_bilinear_when_head_is_zero():
    state = init_state(ModelConfig(**TINY, task="sr2"), identity_head=True)
    x = np.random.default_rng(10).random((5, 4, 3))
    np.testing.assert_allclose(mambair_forward(x, state).data, bilinear_upsample(x, 2), atol=1e-15)
    state = init_state(ModelConfig(**TINY, task="sr2", sr_residual=False), identity_head=True)
    assert np.all(mambair_forward(x, state).data == 0.0)


def test_batched_forward_matches_single():
    state = init_state(ModelConfig(**TINY), seed=3)
    x = np.random.default_rng(11).random((2, 5, 5, 3))
    out = mambair_forward(x, state).data
    for i in range(2):
        np.testing.assert_allclose(out[i], mambair_forward(x[i], state).data, atol=1e-12)


def test_taps_collect_every_vssm():
    cfg = ModelConfig(**{**TINY, "groups": 2, "blocks_per_group": 2})
    taps = []
    mambair_forward(np.zeros((4, 4, 3)), init_state(cfg), taps=taps)
    assert len(taps) == 4 and taps[-1].shape == (4, 4, 4)


def test_full_model_gradients():
    cfg = ModelConfig(channels=8, groups=2, blocks_per_group=1, state=2, ca_reduction=4, bottleneck=2)
    state = init_state(cfg, seed=1)
    rng = np.random.default_rng(12)
    x = Tensor(rng.random((5, 5, 3)))
    wt = rng.normal(size=(5, 5, 3))
    rep = check_gradients(lambda: (mambair_forward(x, state) * wt).sum(), state.params, samples=80, seed=12)
    assert rep["max_rel_error"] <= 1e-5


def test_config_validation():
    for bad in (dict(task="sr5"), dict(scan_directions=3), dict(channels=10, bottleneck=4), dict(scan_impl="x"),
                dict(groups=0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    with pytest.raises(ValueError):
        mambair_forward(np.zeros((4, 4, 1)), init_state(ModelConfig(**TINY)))


def test_state_helpers():
    state = init_state(ModelConfig(**TINY))
    copy = state.copy()
    copy["conv_first.w"].data[...] = 9.0
    assert not np.any(state["conv_first.w"].data == 9.0)
    with pytest.raises((KeyError, ValueError)):
        state["conv_first.w"] = np.zeros(1)
