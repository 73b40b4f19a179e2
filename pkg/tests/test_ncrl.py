import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import unit_rows
from ncenet import diffmath as dm
from ncenet.exceptions import EmptyNeighborList, InvalidConfig, KTooLarge, ShapeMismatch
from ncenet.ncrl import (
    NcrlConfig,
    PredictionPair,
    commonality_set,
    compute_commonalities,
    ncrl_loss,
    ncrl_loss_tensor,
    ncrl_objective,
    prediction_distribution,
    row_entropy,
    select_neighbors,
)


def cos(m):
    m = np.asarray(m, dtype=float)
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    return m @ m.T


def test_pair_selects_each_other():
    idx = select_neighbors(cos(np.eye(2)), NcrlConfig(k=1))
    assert [list(i) for i in idx] == [[1], [0]]


def test_duplicate_rows_tie_to_lowest_index():
    rows = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx = select_neighbors(cos(rows), NcrlConfig(k=1))
    assert [list(i) for i in idx[:3]] == [[1], [0], [0]]
    assert select_neighbors(cos(rows), NcrlConfig(k=1))[3].tolist() == idx[3].tolist()


def test_threshold_matches_filter_oracle(rng):
    z = unit_rows(rng, 6, 3)
    z[1] = z[0] + 0.05
    z[2] = z[0] - 0.05
    omega = cos(z)
    got = select_neighbors(omega, NcrlConfig(selection="threshold", alpha=0.9))
    for i in range(6):
        expected = [j for j in range(6) if j != i and omega[i, j] >= 0.9]
        if not expected:
            expected = [max((j for j in range(6) if j != i), key=lambda j: (omega[i, j], -j))]
        assert got[i].tolist() == expected


def test_k_too_large(rng):
    with pytest.raises(KTooLarge):
        select_neighbors(cos(unit_rows(rng, 5, 3)), NcrlConfig(k=5))


def test_non_square_omega():
    with pytest.raises(ShapeMismatch):
        select_neighbors(np.zeros((3, 4)), NcrlConfig(k=1))


@given(st.integers(1, 6), st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_fixed_k_size_self_excluded_and_scale_invariant(k, seed, s):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(8, 5))
    a = select_neighbors(dm.cosine_similarity_matrix(m).value, NcrlConfig(k=k))
    b = select_neighbors(dm.cosine_similarity_matrix(s * m).value, NcrlConfig(k=k))
    for i, idx in enumerate(a):
        assert len(idx) == k and i not in idx
        assert idx.tolist() == b[i].tolist()


def test_k1_mu_is_neighbor_row(rng):
    z = unit_rows(rng, 5, 4)
    cs = commonality_set(z, NcrlConfig(k=1))
    for i, idx in enumerate(cs.neighbor_indices):
        assert np.array_equal(cs.mu[i], z[idx[0]])


def test_identical_rows_mu_equals_row():
    z = np.tile([[0.6, 0.8]], (4, 1))
    assert np.array_equal(commonality_set(z, NcrlConfig(k=2)).mu, z)


def test_k2_mean_oracle(rng):
    z = rng.normal(size=(5, 3))
    idx = [np.array([1, 2]), np.array([0, 4]), np.array([3, 4]), np.array([0, 1]), np.array([2, 3])]
    mu = compute_commonalities(z, idx)
    for i, (a, b) in enumerate(idx):
        for d in range(3):
            assert mu[i, d] == pytest.approx((z[a, d] + z[b, d]) / 2, abs=1e-15)


def test_empty_neighbor_list(rng):
    with pytest.raises(EmptyNeighborList):
        compute_commonalities(rng.normal(size=(2, 2)), [np.array([1]), np.array([], dtype=int)])


def test_prediction_rows_sum_to_one(rng):
    z, zh = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
    mu = commonality_set(z, NcrlConfig()).mu
    pair = prediction_distribution(z, zh, mu, NcrlConfig())
    assert np.allclose(pair.p.value.sum(1), 1, atol=1e-9)
    assert np.allclose(pair.p_hat.value.sum(1), 1, atol=1e-9)


def test_same_views_tau_one_give_same_distributions(rng):
    z = unit_rows(rng, 6, 4)
    mu = commonality_set(z, NcrlConfig(k=2)).mu
    pair = prediction_distribution(z, z, mu, NcrlConfig(k=2, tau=1.0))
    assert np.allclose(pair.p.value, pair.p_hat.value, atol=1e-12)
    assert ncrl_loss(pair) == pytest.approx(row_entropy(pair.p), abs=1e-12)


def test_target_softmax_oracle(rng):
    z, zh = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    mu = commonality_set(z, NcrlConfig(k=2)).mu
    p = prediction_distribution(z, zh, mu, NcrlConfig(k=2)).p.value
    for i in range(4):
        logits = [sum(z[i, d] * mu[j, d] for d in range(3)) / 0.07 for j in range(4)]
        top = max(logits)
        denom = sum(math.exp(v - top) for v in logits)
        for j in range(4):
            assert p[i, j] == pytest.approx(math.exp(logits[j] - top) / denom, abs=1e-12)


def test_prediction_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        prediction_distribution(unit_rows(rng, 4, 3), unit_rows(rng, 3, 3), np.ones((4, 3)), NcrlConfig())


def test_one_hot_against_uniform_is_log4():
    pair = PredictionPair(dm.Tensor(np.eye(4)), dm.Tensor(np.full((4, 4), 0.25)))
    assert ncrl_loss(pair) == pytest.approx(math.log(4), abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.05, 2.0))
def test_gibbs_inequality(seed, tau):
    rng = np.random.default_rng(seed)
    z, zh = unit_rows(rng, 8, 5), unit_rows(rng, 8, 5)
    mu = commonality_set(z, NcrlConfig(k=3)).mu
    pair = prediction_distribution(z, zh, mu, NcrlConfig(k=3, tau=tau))
    assert ncrl_loss(pair) >= row_entropy(pair.p) - 1e-9


@given(st.integers(0, 10_000))
def test_sharpening_monotone(seed):
    rng = np.random.default_rng(seed)
    z = unit_rows(rng, 6, 4)
    mu = commonality_set(z, NcrlConfig(k=2)).mu
    maxes = [prediction_distribution(z, z, mu, NcrlConfig(k=2, tau=t)).p.value.max(1) for t in (1.0, 0.3, 0.07)]
    logits = z @ mu.T
    srt = np.sort(logits, axis=1)
    ok = srt[:, -1] - srt[:, -2] > 1e-6
    assert np.all(maxes[1][ok] > maxes[0][ok]) and np.all(maxes[2][ok] > maxes[1][ok])


def test_gradient_flows_only_through_prediction_branch(rng):
    z, zh = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16)
    with dm.GradTape() as tape:
        tz, tzh = tape.watch(z), tape.watch(zh)
        mu = tape.watch(commonality_set(z, NcrlConfig()).mu)
        out = ncrl_loss_tensor(prediction_distribution(tz, tzh, mu, NcrlConfig()))
    gz, gzh, gmu = tape.gradient(out, [tz, tzh, mu])
    assert not gz.any() and not gmu.any()
    assert gzh.any()


def test_objective_gradient_matches_finite_differences(rng):
    z = unit_rows(rng, 8, 16)
    report = dm.grad_check(lambda zh: ncrl_objective(z, zh, NcrlConfig()), [unit_rows(rng, 8, 16)], 1e-4, 1e-4)
    assert report.passed, report.max_rel_errors


def test_unblocked_target_carries_gradient(rng):
    z, zh = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    cfg = NcrlConfig(k=2, block_target_gradients=False)
    mu = commonality_set(z, cfg).mu
    _, (gz,) = dm.value_and_gradient(lambda a: ncrl_loss_tensor(prediction_distribution(a, zh, mu, cfg)), [z])
    assert gz.any()


@pytest.mark.parametrize("source", ["random_prototypes", "kmeans_centroids"])
def test_alternative_prediction_sources(rng, source):
    z, zh = unit_rows(rng, 12, 6), unit_rows(rng, 12, 6)
    cfg = NcrlConfig(prediction_source=source, n_prototypes=4)
    a = ncrl_objective(z, zh, cfg, seed=3).item()
    assert a == ncrl_objective(z, zh, cfg, seed=3).item()
    assert a > 0


@pytest.mark.parametrize(
    "kw", [dict(k=0), dict(selection="radius"), dict(alpha=1.5), dict(tau=0), dict(prediction_source="x"), dict(n_prototypes=0)]
)
def test_invalid_config(kw):
    with pytest.raises(InvalidConfig):
        NcrlConfig(**kw)


def test_defaults():
    cfg = NcrlConfig()
    assert (cfg.k, cfg.tau, cfg.alpha, cfg.include_self) == (5, 0.07, 0.9, False)
