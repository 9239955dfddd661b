import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import normalized_mutual_info_score

from hli.pseudo import PseudoLabeling, cluster_targets, dump_assignments, relabel_dataset


def two_blobs(n=20, d=4, radius=0.1, seed=0):
    rng = np.random.default_rng(seed)
    centre = np.zeros(d)
    centre[0] = 10.0
    offsets = rng.normal(size=(2 * n, d))
    offsets *= radius / np.linalg.norm(offsets, axis=1, keepdims=True) * rng.uniform(0, 1, (2 * n, 1))
    x = np.concatenate([centre + offsets[:n], -centre + offsets[n:]])
    return x, np.repeat([0, 1], n)


def test_single_cluster():
    x = np.random.default_rng(0).normal(size=(15, 3))
    lab = cluster_targets(x, 1, seed=0)
    assert np.all(lab.assignments == 0)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    assert np.allclose(lab.centroids[0], xn.mean(0), atol=1e-12)


def test_two_blobs_pure_and_lower_inertia():
    x, truth = two_blobs()
    two = cluster_targets(x, 2, seed=3)
    one = cluster_targets(x, 1, seed=3)
    for k in range(2):
        assert len(set(truth[two.assignments == k])) == 1
    assert two.inertia < one.inertia
    assert normalized_mutual_info_score(truth, two.assignments) == pytest.approx(1.0, abs=1e-12)


def test_same_seed_identical():
    x = np.random.default_rng(5).normal(size=(40, 6))
    a, b = cluster_targets(x, 5, seed=11), cluster_targets(x, 5, seed=11)
    assert np.array_equal(a.assignments, b.assignments)
    assert np.array_equal(a.centroids, b.centroids)


@given(st.integers(0, 500), st.integers(2, 8))
@settings(max_examples=25, deadline=None)
def test_inertia_non_increasing_and_valid(seed, k):
    x = np.random.default_rng(seed).normal(size=(30, 3))
    lab = cluster_targets(x, k, seed=seed)
    h = np.array(lab.inertia_history)
    assert np.all(np.diff(h) <= 1e-12)
    assert lab.inertia <= h[-1] + 1e-12
    assert set(lab.assignments) == set(range(k))  # no empty clusters


def test_centroids_are_member_means():
    x = np.random.default_rng(2).normal(size=(50, 4))
    lab = cluster_targets(x, 4, seed=1)
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    for k in range(4):
        assert np.allclose(lab.centroids[k], xn[lab.assignments == k].mean(0), atol=1e-12)


def test_empty_cluster_reseeded():
    # many duplicates make k-means++ collide, forcing re-seeding
    x = np.array([[1.0, 0.0]] * 10 + [[0.0, 1.0]] * 10 + [[0.6, 0.8]])
    lab = cluster_targets(x, 3, seed=0)
    assert sorted(np.bincount(lab.assignments).tolist()) == [1, 10, 10]


def test_errors():
    with pytest.raises(ValueError):
        cluster_targets(np.zeros((3, 2)) + 1, 4, seed=0)
    bad = np.ones((4, 2))
    bad[1, 0] = np.nan
    with pytest.raises(ValueError):
        cluster_targets(bad, 2, seed=0)


def _labeling(assign, m):
    return PseudoLabeling(np.asarray(assign), np.zeros((m, 2)), 0.0)


def test_relabel_single_cluster(tiny_pair):
    _, target = tiny_pair
    out = relabel_dataset(target, _labeling(np.zeros(len(target), int), 1))
    assert all(r.pseudo_label == 0 for r in out)
    assert all(r.identity == t.identity for r, t in zip(out, target))


def test_relabel_permutation_not_canonicalised(tiny_pair):
    _, target = tiny_pair
    assign = np.arange(len(target)) % 3
    perm = np.array([2, 0, 1])
    out = relabel_dataset(target, _labeling(perm[assign], 3))
    assert [r.pseudo_label for r in out] == perm[assign].tolist()


def test_relabel_counts_match_histogram(tiny_pair):
    _, target = tiny_pair
    assign = np.random.default_rng(0).integers(0, 5, len(target))
    out = relabel_dataset(target, _labeling(assign, 5))
    counts = {}
    for r in out:
        counts[r.pseudo_label] = counts.get(r.pseudo_label, 0) + 1
    hist = np.bincount(assign, minlength=5)
    assert all(counts.get(k, 0) == hist[k] for k in range(5))


def test_relabel_length_mismatch(tiny_pair):
    _, target = tiny_pair
    with pytest.raises(ValueError):
        relabel_dataset(target, _labeling([0, 1], 2))


def test_dump_assignments(tmp_path):
    lab = _labeling([1, 0, 1], 2)
    rows = list(csv.reader(dump_assignments(lab, tmp_path / "a.csv").open()))
    assert rows == [["sample_index", "pseudo_label"], ["0", "1"], ["1", "0"], ["2", "1"]]
