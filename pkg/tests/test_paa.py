import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pifenet.paa import (PAA, AttentionBranch, PaaToggles, StackedPAA, TaskAware, attention_scores,
                         combine_attention, hidden_width, multi_pool, task_aware_apply)
from pifenet.tensor import Tensor, precision


def all_valid(P, N):
    return np.ones((P, N, 1), dtype=bool)


def test_multi_pool_example():
    G = Tensor(np.array([[[1.0, 3.0], [2.0, 4.0]]]))
    c_mean, c_max, p_mean, p_max = multi_pool(G, all_valid(1, 2))
    assert c_mean.data.reshape(-1).tolist() == [1.5, 3.5]
    assert c_max.data.reshape(-1).tolist() == [2, 4]
    assert p_mean.data.reshape(-1).tolist() == [2, 3]
    assert p_max.data.reshape(-1).tolist() == [3, 4]


def test_multi_pool_zero_pillar():
    pools = multi_pool(Tensor(np.zeros((2, 4, 3))), all_valid(2, 4))
    assert all(np.all(p.data == 0) for p in pools)


def test_multi_pool_mean_matches_independent_sum(rng):
    with precision(np.float64):
        G = rng.normal(size=(3, 6, 5))
        counts = np.array([6, 2, 4])
        valid = (np.arange(6)[None, :] < counts[:, None])[:, :, None]
        c_mean = multi_pool(Tensor(G), valid)[0].data
    for p in range(3):
        acc = np.zeros(5)
        for n in range(counts[p]):
            acc += G[p, n]
        np.testing.assert_allclose(c_mean[p, 0], acc / counts[p], atol=1e-6)


def test_hidden_width_floor():
    assert hidden_width(9, 4) == 2
    assert hidden_width(2, 4) == 1


def test_attention_zero_weights_give_half(rng):
    branch = AttentionBranch(6, 4, rng)
    branch.w0.weight.data[:] = 0
    branch.w1.weight.data[:] = 0
    A = attention_scores(Tensor(rng.normal(size=(2, 1, 6))), Tensor(rng.normal(size=(2, 1, 6))), branch)
    assert np.all(A.data == 0.5)


def test_attention_identical_pools_double_preactivation(rng):
    with precision(np.float64):
        branch = AttentionBranch(8, 4, rng)
        x = Tensor(rng.normal(size=(3, 1, 8)))
        A = attention_scores(x, x, branch).data
        z = branch.mlp(x).data
    np.testing.assert_allclose(A, 1 / (1 + np.exp(-2 * z)), rtol=1e-12)


def test_attention_strictly_inside_unit_interval(rng):
    branch = AttentionBranch(5, 2, rng)
    A = attention_scores(Tensor(rng.normal(size=(4, 1, 5))), Tensor(rng.normal(size=(4, 1, 5))), branch).data
    assert np.all((A > 0) & (A < 1))


def test_combine_attention_identity_and_zero(rng):
    G = Tensor(rng.normal(size=(2, 3, 4)))
    out = combine_attention(G, Tensor(np.ones((2, 3, 1))), Tensor(np.ones((2, 1, 4))))
    np.testing.assert_array_equal(out.data, G.data)
    assert np.all(combine_attention(G, Tensor(np.zeros((2, 3, 1))), None).data == 0)


def test_combine_attention_enumeration(rng):
    G = rng.normal(size=(1, 4, 3))
    a_p, a_c = rng.random((1, 4, 1)), rng.random((1, 1, 3))
    with precision(np.float64):
        out = combine_attention(Tensor(G), Tensor(a_p), Tensor(a_c)).data
    for n in range(4):
        for c in range(3):
            assert out[0, n, c] == pytest.approx(a_p[0, n, 0] * a_c[0, 0, c] * G[0, n, c], rel=1e-12)


def test_combine_attention_shape_check():
    with pytest.raises(ValueError):
        combine_attention(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 1))))


@given(st.integers(1, 40), st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_task_aware_relu_at_init(C, N, P, seed):
    rng = np.random.default_rng(seed)
    F = Tensor(rng.normal(size=(P, N, C)) * 10)
    out = TaskAware(C, 4, rng)(F, all_valid(P, N))
    assert np.array_equal(out.data, np.maximum(F.data, 0))


def test_task_aware_identity_coefficients(rng):
    F = Tensor(rng.normal(size=(2, 3, 4)))
    one, zero = Tensor(np.ones((2, 1, 4))), Tensor(np.zeros((2, 1, 4)))
    np.testing.assert_array_equal(task_aware_apply(F, one, zero, one, zero).data, F.data)


def test_task_aware_random_residuals_is_max_of_branches(rng):
    unit = TaskAware(6, 2, rng, init_std=0.5)
    F = Tensor(rng.normal(size=(3, 5, 6)))
    a1, b1, a2, b2 = (c.data for c in unit.coefficients(F, all_valid(3, 5)))
    out = unit(F, all_valid(3, 5)).data
    br1, br2 = a1 * F.data + b1, a2 * F.data + b2
    assert np.all(out >= br1 - 1e-6) and np.all(out >= br2 - 1e-6)
    assert np.all(np.isclose(out, br1) | np.isclose(out, br2))


def test_perturbed_init_breaks_relu_identity(rng):
    F = Tensor(rng.normal(size=(2, 4, 8)))
    out = TaskAware(8, 4, rng, init_std=0.1)(F, all_valid(2, 4))
    assert not np.array_equal(out.data, np.maximum(F.data, 0))


OFF = PaaToggles(point_attention=False, channel_attention=False, task_aware=False)


def test_paa_all_off_is_identity(rng):
    G = Tensor(rng.normal(size=(3, 4, 9)))
    np.testing.assert_array_equal(PAA(9, 4, rng, toggles=OFF)(G, all_valid(3, 4)).data, G.data)


def test_paa_only_task_aware_is_relu(rng):
    G = Tensor(rng.normal(size=(3, 4, 9)))
    toggles = PaaToggles(point_attention=False, channel_attention=False, task_aware=True)
    out = PAA(9, 4, rng, toggles=toggles)(G, all_valid(3, 4))
    np.testing.assert_array_equal(out.data, np.maximum(G.data, 0))


def test_paa_padded_rows_stay_zero(rng):
    G = rng.normal(size=(2, 5, 9))
    valid = (np.arange(5)[None, :] < np.array([5, 2])[:, None])[:, :, None]
    G = Tensor(G * valid)
    out = PAA(9, 5, rng, theta_init_std=0.3)(G, valid).data
    assert np.all(out[1, 2:] == 0)


# regression pins for ablation-style toggle rows on a fixed random input
PAA_ROWS = {
    "point+channel+task": PaaToggles(),
    "point only": PaaToggles(channel_attention=False, task_aware=False),
    "channel only": PaaToggles(point_attention=False, task_aware=False),
    "task only": PaaToggles(point_attention=False, channel_attention=False),
    "mean pool only": PaaToggles(pool_max=False),
    "max pool only": PaaToggles(pool_mean=False),
    "delta pre": PaaToggles(delta_position="pre"),
}
PAA_PINS = {
    "point+channel+task": "190b4e838ead37eb",
    "point only": "22f6b18e2c639c89",
    "channel only": "58f3d661f34aa6c4",
    "task only": "ff3b26424b6a57ee",
    "mean pool only": "1bc4883b26c196b7",
    "max pool only": "704c2663b21ab32e",
    "delta pre": "8ebdf2d0cc4b2c83",
}


def _paa_hash(toggles):
    rng = np.random.default_rng(77)
    G = Tensor(rng.normal(size=(4, 8, 9)))
    out = PAA(9, 8, np.random.default_rng(5), toggles=toggles, theta_init_std=0.2)(G, all_valid(4, 8)).data
    return hashlib.sha256(np.round(out.astype(np.float64), 4).tobytes()).hexdigest()[:16]


def test_paa_toggle_rows_distinct_and_pinned():
    hashes = {k: _paa_hash(t) for k, t in PAA_ROWS.items()}
    assert len(set(hashes.values())) == len(hashes)
    assert hashes == PAA_PINS


def test_invalid_toggles_rejected():
    with pytest.raises(ValueError):
        PaaToggles(pool_mean=False, pool_max=False)
    with pytest.raises(ValueError):
        PaaToggles(delta_position="after")


def test_stacked_single_point_max_is_that_point(rng):
    enc = StackedPAA(9, 4, rng, depth=2)
    G = np.zeros((1, 4, 9))
    G[0, 0] = rng.normal(size=9)
    valid = np.array([[[True], [False], [False], [False]]])
    out = enc(Tensor(G), valid).data
    per_point = enc.encode_points(Tensor(G), valid).data
    np.testing.assert_array_equal(out[0], per_point[0, 0])
    assert out.shape == (1, 64)


@pytest.mark.parametrize("depth", [0, 1, 2, 3])
def test_stacked_zero_in_zero_params_out(rng, depth):
    enc = StackedPAA(9, 4, rng, depth=depth)
    for p in enc.parameters():
        p.data[:] = 0
    assert np.all(enc(Tensor(np.zeros((3, 4, 9))), all_valid(3, 4)).data == 0)


@given(st.integers(1, 20), st.integers(1, 12), st.integers(0, 3))
def test_stacked_output_shape(P, N, depth):
    rng = np.random.default_rng(P * 100 + N)
    enc = StackedPAA(9, N, rng, depth=depth, out_channels=64)
    assert enc(Tensor(rng.normal(size=(P, N, 9))), all_valid(P, N)).shape == (P, 64)
