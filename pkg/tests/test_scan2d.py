import numpy as np
import pytest

from mambair.gradcheck import check_gradients
from mambair.scan2d import (DIRECTION_SETS, flatten_directions, init_scan_params, merge_directions, scan_order,
                            ssm2d_cost, ssm2d_forward)
from mambair.ssm import SelectiveParams, selective_scan_sequential
from mambair.tensor import Tape, Tensor, backward


def _values(seqs):
    return [s.data[..., 0].tolist() for s in seqs.sequences]


def test_four_orders_on_2x2():
    seqs = flatten_directions(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    assert _values(seqs) == [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]]


def test_single_pixel_and_single_row():
    seqs = flatten_directions(np.array([[[7.0]]]))
    assert _values(seqs) == [[7.0]] * 4
    row = np.arange(5.0).reshape(1, 5, 1)
    vals = _values(flatten_directions(row))
    assert vals[0] == [0, 1, 2, 3, 4]
    assert vals[2] == [4, 3, 2, 1, 0]
    assert vals[1] == vals[0]


def test_scan_order_rejects_unknown_direction():
    with pytest.raises(ValueError):
        scan_order(2, 2, 4)


def test_merge_of_pass_through_is_four_copies():
    x = np.random.default_rng(0).normal(size=(3, 4, 2))
    seqs = flatten_directions(x)
    np.testing.assert_allclose(merge_directions(seqs.sequences, seqs).data, 4 * x, atol=0)


def test_merge_with_one_live_direction():
    x = np.random.default_rng(1).normal(size=(3, 4, 2))
    seqs = flatten_directions(x)
    outs = [np.zeros_like(s.data) for s in seqs.sequences]
    outs[2] = seqs.sequences[2].data
    assert np.array_equal(merge_directions(outs, seqs).data, x)


def test_merge_is_linear():
    rng = np.random.default_rng(2)
    seqs = flatten_directions(np.zeros((3, 3, 2)))
    a = [rng.normal(size=(9, 2)) for _ in range(4)]
    b = [rng.normal(size=(9, 2)) for _ in range(4)]
    lhs = merge_directions([p + q for p, q in zip(a, b)], seqs).data
    rhs = merge_directions(a, seqs).data + merge_directions(b, seqs).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_merge_rejects_wrong_count():
    seqs = flatten_directions(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        merge_directions(seqs.sequences[:3], seqs)


def _zero_params(C, N, K, shared=False):
    p = init_scan_params(C, N, K, np.random.default_rng(0), shared=shared)
    p["w_B"][:] = 0.0
    p["w_C"][:] = 0.0
    p["w_delta"][:] = 0.0
    return p


@pytest.mark.parametrize("impl", ["fused", "parallel"])
def test_feedthrough_only_is_four_times_input(impl):
    x = np.random.default_rng(3).normal(size=(4, 5, 3))
    out = ssm2d_forward(x, _zero_params(3, 2, 4), 4, impl).data
    np.testing.assert_allclose(out, 4 * x, atol=1e-14)


def test_row_reduces_to_one_dimensional_scan():
    rng = np.random.default_rng(4)
    C, N, L = 3, 4, 7
    p = init_scan_params(C, N, 4, rng)
    for k in ("w_delta", "w_B", "w_C"):
        p[k] = rng.normal(scale=0.5, size=p[k].shape)
    for k in ("w_B", "w_C", "D"):
        p[k][1:] = 0.0
    x = rng.normal(size=(1, L, C))
    out = ssm2d_forward(x, p, 4).data[0]
    # other directions see zero B, C and D: only direction 0 contributes
    tok = x[0]
    delta = np.log1p(np.exp(tok @ p["w_delta"][0] + p["b_delta"][0]))
    sel = SelectiveParams(p["a_log"][0], delta, tok @ p["w_B"][0], tok @ p["w_C"][0], p["D"][0])
    np.testing.assert_allclose(out, selective_scan_sequential(sel, tok), atol=1e-12)


@pytest.mark.parametrize("K", sorted(DIRECTION_SETS))
def test_direction_sets_against_explicit_loop(K):
    rng = np.random.default_rng(5 + K)
    C, N, H, W = 2, 3, 3, 4
    p = init_scan_params(C, N, K, rng)
    for k in ("w_delta", "w_B", "w_C"):
        p[k] = rng.normal(scale=0.5, size=p[k].shape)
    p["D"] = rng.normal(size=p["D"].shape)
    x = rng.normal(size=(H, W, C))
    expected = np.zeros((H * W, C))
    tokens = x.reshape(-1, C)
    for i, d in enumerate(DIRECTION_SETS[K]):
        order = scan_order(H, W, d)
        tok = tokens[order]
        delta = np.log1p(np.exp(tok @ p["w_delta"][i] + p["b_delta"][i]))
        sel = SelectiveParams(p["a_log"][i], delta, tok @ p["w_B"][i], tok @ p["w_C"][i], p["D"][i])
        y = selective_scan_sequential(sel, tok)
        expected[order] += y
    np.testing.assert_allclose(ssm2d_forward(x, p, K).data, expected.reshape(H, W, C), atol=1e-12)


def test_shared_parameters_equal_tiled_parameters():
    rng = np.random.default_rng(6)
    shared = init_scan_params(3, 2, 4, rng, shared=True)
    shared["w_B"] = rng.normal(size=shared["w_B"].shape)
    tiled = {k: np.broadcast_to(v, (4,) + v.shape).copy() for k, v in shared.items()}
    x = rng.normal(size=(2, 3, 3, 3))
    np.testing.assert_allclose(ssm2d_forward(x, shared).data, ssm2d_forward(x, tiled).data, atol=1e-12)


def test_global_receptive_field_on_6x6():
    rng = np.random.default_rng(7)
    p = init_scan_params(2, 3, 4, rng)
    for k in ("w_delta", "w_B", "w_C"):
        p[k] = rng.normal(size=p[k].shape)
    x = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
    with Tape():
        y = ssm2d_forward(x, p)[0, 0, :].sum()
    backward(y)
    mag = np.abs(x.grad).sum(axis=-1)
    assert np.all(mag > 1e-12)
    # central differences agree at the far corner
    h = 1e-6
    x0 = x.data.copy()
    for c in range(2):
        up, down = x0.copy(), x0.copy()
        up[5, 5, c] += h
        down[5, 5, c] -= h
        fd = (ssm2d_forward(up, p).data[0, 0].sum() - ssm2d_forward(down, p).data[0, 0].sum()) / (2 * h)
        assert fd == pytest.approx(x.grad[5, 5, c], rel=1e-5, abs=1e-9)


def test_gradients_all_parameters():
    rng = np.random.default_rng(8)
    params = {k: Tensor(v) for k, v in init_scan_params(2, 2, 4, rng).items()}
    x = Tensor(rng.normal(size=(3, 2, 2)))
    wt = rng.normal(size=(3, 2, 2))
    rep = check_gradients(lambda: (ssm2d_forward(x, params) * wt).sum(), {**params, "x": x})
    assert rep["max_rel_error"] <= 1e-5


def test_impls_agree_on_batch():
    rng = np.random.default_rng(9)
    p = init_scan_params(4, 3, 4, rng)
    x = rng.normal(size=(2, 5, 3, 4))
    np.testing.assert_allclose(ssm2d_forward(x, p, impl="fused").data, ssm2d_forward(x, p, impl="parallel").data,
                               atol=1e-12)


def test_bad_direction_count_and_cost():
    p = init_scan_params(2, 2, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ssm2d_forward(np.zeros((2, 2, 2)), p, 3)
    with pytest.raises(ValueError):
        ssm2d_forward(np.zeros((2, 2, 2)), p, 2)
    assert ssm2d_cost(8, 8, 4, 2, 4) == 4 * 64 * 4 * 2
