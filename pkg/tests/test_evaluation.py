import csv
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_force_acc
from ncenet.evaluation import (
    EvalReport,
    KmeansConfig,
    confusion_to_csv,
    hungarian_acc,
    kmeans_cluster,
    reports_to_csv,
    running_means,
    score_predictions,
    subset_acc,
    subset_acc_rematched,
)
from ncenet.exceptions import EmptyInput, InvalidConfig, KTooLarge, LengthMismatch


def test_identity_and_relabel():
    y = np.array([0, 1, 2, 2, 1, 0, 3])
    assert hungarian_acc(y, y)[0] == 1.0
    pi = {0: 9, 1: 4, 2: 7, 3: 1}
    assert hungarian_acc(y, [pi[v] for v in y])[0] == 1.0


def test_matches_brute_force_200(rng):
    for _ in range(20):
        y = rng.integers(0, rng.integers(1, 8), size=200)
        p = rng.integers(0, rng.integers(1, 8), size=200)
        assert hungarian_acc(y, p)[0] == brute_force_acc(y, p)


@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_relabel_invariance(seed, kt, kp):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, kt, 60), rng.integers(0, kp, 60)
    a = hungarian_acc(y, p)[0]
    assert hungarian_acc(rng.permutation(10)[y] + 100, p)[0] == a
    assert hungarian_acc(y, rng.permutation(10)[p] * 3)[0] == a
    assert a == brute_force_acc(y, p)


def test_errors():
    with pytest.raises(LengthMismatch):
        hungarian_acc([0, 1], [0])
    with pytest.raises(EmptyInput):
        hungarian_acc([], [])


def test_subset_old_only():
    y = np.array([0, 0, 1, 1, 2])
    p = np.array([1, 1, 0, 2, 2])
    acc, m = hungarian_acc(y, p)
    old, new = subset_acc(y, p, m, {0, 1, 2})
    assert old == acc and new is None


def test_subset_perfect():
    y = np.array([0, 1, 2, 3])
    acc, m = hungarian_acc(y, y + 5)
    assert subset_acc(y, y + 5, m, {0, 1}) == (1.0, 1.0)


def test_subset_confused_new_class_oracle():
    # class 2 (new) is split across clusters 1 and 2; class 1 half-absorbed too
    y = np.array([0] * 4 + [1] * 4 + [2] * 4)
    p = np.array([0, 0, 0, 0, 1, 1, 1, 2, 1, 1, 2, 2])
    acc, m = hungarian_acc(y, p)
    old, new = subset_acc(y, p, m, {0, 1})
    assert acc == brute_force_acc(y, p) == 9 / 12
    # brute force restricted to subsets under the single best All matching (0->0, 1->1, 2->2)
    assert (old, new) == (7 / 8, 2 / 4)
    assert subset_acc_rematched(y, p, {0, 1}) == (brute_force_acc(y[:8], p[:8]), brute_force_acc(y[8:], p[8:]))


@given(st.integers(0, 10_000))
def test_all_is_weighted_mean_of_subsets(seed):
    rng = np.random.default_rng(seed)
    y, p = rng.integers(0, 5, 80), rng.integers(0, 5, 80)
    if len(set(y) & {0, 1}) == 0 or len(set(y) - {0, 1}) == 0:
        return
    acc, m = hungarian_acc(y, p)
    old, new = subset_acc(y, p, m, {0, 1})
    n_old = np.isin(y, [0, 1]).sum()
    assert abs(acc - (n_old * old + (80 - n_old) * new) / 80) <= 1e-12


def test_kmeans_single_cluster(rng):
    out = kmeans_cluster(rng.normal(size=(20, 3)), KmeansConfig(K=1))
    assert set(out.labels.tolist()) == {0}


def test_kmeans_blobs(rng):
    truth = np.repeat([0, 1], 30)
    x = rng.normal(scale=0.1, size=(60, 2)) + np.where(truth[:, None] == 0, [5.0, 0.0], [0.0, 5.0])
    out = kmeans_cluster(x, KmeansConfig(K=2, seed=3))
    assert hungarian_acc(truth, out.labels)[0] == 1.0


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(50, 4))
    a, b = kmeans_cluster(x, KmeansConfig(K=4, seed=9)), kmeans_cluster(x, KmeansConfig(K=4, seed=9))
    assert np.array_equal(a.labels, b.labels) and a.inertia == b.inertia


@given(st.integers(0, 10_000), st.sampled_from(["maximin", "random"]))
def test_kmeans_inertia_non_increasing(seed, init):
    x = np.random.default_rng(seed).normal(size=(40, 3))
    hist = kmeans_cluster(x, KmeansConfig(K=4, seed=seed, restarts=1, init=init)).history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_errors(rng):
    with pytest.raises(KTooLarge):
        kmeans_cluster(rng.normal(size=(3, 2)), KmeansConfig(K=4))
    with pytest.raises(EmptyInput):
        kmeans_cluster(np.zeros((0, 2)), KmeansConfig(K=1))
    for kw in (dict(K=0), dict(restarts=0), dict(max_iters=0), dict(init="kpp")):
        with pytest.raises(InvalidConfig):
            KmeansConfig(**kw)


def _report(t, a, o, n):
    return EvalReport(t, a, o, n, 10, {}, {})


def test_running_means_skip_base_session():
    reps = [_report(0, 0.99, 0.99, None), _report(1, 0.8, 0.9, 0.6), _report(2, 0.7, 0.75, 0.5)]
    mA, mO, mN = running_means(reps)
    assert abs(mA - 0.75) <= 1e-12 and abs(mO - 0.825) <= 1e-12 and abs(mN - 0.55) <= 1e-12
    assert running_means(reps[:1]) == (None, None, None)


def test_score_predictions_and_csv():
    y = np.array([0, 0, 1, 1, 2, 2])
    p = np.array([5, 5, 6, 6, 7, 6])
    first = score_predictions(0, y[:4], p[:4], {0, 1}, (0, 1))
    rep = score_predictions(1, y, p, {0, 1}, (0, 1, 2), previous=[first])
    assert rep.acc_all == pytest.approx(5 / 6) and rep.per_class_recall[2] == 0.5
    assert rep.mA == rep.acc_all
    rows = list(csv.reader(io.StringIO(reports_to_csv([first, rep]))))
    assert rows[0] == ["session", "acc_all", "acc_old", "acc_new", "mA", "mO", "mN"]
    assert rows[1][3] == "" and rows[2][1] == "0.833333"
    conf = list(csv.reader(io.StringIO(confusion_to_csv(rep))))
    assert conf[0][-1] == "unmatched" and conf[3][1:] == ["0", "1", "1", "0"]
