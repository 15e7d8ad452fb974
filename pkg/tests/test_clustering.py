import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist, squareform

from fedload.clustering import (
    ClusterAssignment,
    ClusterConfig,
    agglomerate,
    cluster_updates,
    pairwise_distances,
    run_clustered_federation,
)
from fedload.errors import ClusteringError, FederationError, TooFewClients
from fedload.fedcore import Federation, FederationConfig, local_clients, run_federation
from fedload.metrics import METRIC_COLUMNS
from fedload.model import ModelArch
from fedload.privacy import PrivacyConfig


def _partition(labels):
    groups = {}
    for c, k in labels.items():
        groups.setdefault(k, set()).add(c)
    return {frozenset(g) for g in groups.values()}


def _brute_average(D, k):
    """Reference agglomeration by exhaustive pair search, no bookkeeping tricks."""
    clusters = [[i] for i in range(len(D))]
    while len(clusters) > k:
        best = min(
            itertools.combinations(range(len(clusters)), 2),
            key=lambda ab: np.mean([D[i][j] for i in clusters[ab[0]] for j in clusters[ab[1]]]),
        )
        a, b = best
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return {frozenset(c) for c in clusters}


def test_distances_match_scipy():
    X = np.random.default_rng(0).normal(size=(6, 4))
    assert np.allclose(pairwise_distances(list(X)), squareform(pdist(X)), atol=1e-12)
    assert np.allclose(pairwise_distances(list(X), "cosine"), squareform(pdist(X, "cosine")), atol=1e-12)


def test_cosine_zero_vector_and_too_few():
    D = pairwise_distances([np.zeros(3), np.ones(3), 2 * np.ones(3)], "cosine")
    assert D[0, 1] == 1.0 and D[0, 0] == 0.0 and abs(D[1, 2]) < 1e-12
    with pytest.raises(TooFewClients):
        pairwise_distances([np.ones(3)])


@given(st.integers(3, 9), st.integers(0, 10_000), st.sampled_from(["single", "complete", "average"]))
@settings(max_examples=60, deadline=None)
def test_agglomeration_agrees_with_scipy(n, seed, method):
    X = np.random.default_rng(seed).normal(size=(n, 3))
    D = squareform(pdist(X))
    k = 1 + seed % (n - 1)
    ours = agglomerate(D, method, n_clusters=k)
    ref = fcluster(linkage(pdist(X), method), k, criterion="maxclust")
    assert _partition(ours.labels) == _partition(dict(enumerate(ref)))
    if method == "average":
        assert _partition(ours.labels) == _brute_average(D, k)


def test_threshold_mode_and_merge_trace():
    pts = np.array([[0.0], [0.1], [5.0], [5.2], [20.0]])
    D = squareform(pdist(pts))
    a = agglomerate(D, "single", threshold=1.0, ids=[10, 11, 12, 13, 14])
    assert a.groups() == [[10, 11], [12, 13], [14]]
    assert [m["distance"] for m in a.merges] == pytest.approx([0.1, 0.2])
    assert all(m["distance"] <= 1.0 for m in a.merges)
    # cluster ids follow each cluster's smallest member
    assert a.labels == {10: 0, 11: 0, 12: 1, 13: 1, 14: 2}
    assert a.to_csv().splitlines()[0] == "client_id,cluster_id"


def test_ties_merge_lowest_pair_first():
    D = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], float)
    a = agglomerate(D, "average", n_clusters=2)
    assert a.groups() == [[0, 1], [2]]


def test_bad_configs():
    with pytest.raises(ClusteringError):
        ClusterConfig()
    with pytest.raises(ClusteringError):
        ClusterConfig(threshold=1.0, n_clusters=2)
    with pytest.raises(ClusteringError):
        ClusterConfig(n_clusters=2, metric="manhattan")
    with pytest.raises(ClusteringError):
        ClusterConfig(n_clusters=2, warmup_rounds=0)
    with pytest.raises(ClusteringError):
        ClusterAssignment({0: 0, 1: 2})
    with pytest.raises(ClusteringError):
        agglomerate(np.zeros((3, 3)), n_clusters=4)


def test_cluster_updates_uses_client_ids():
    ups = {7: np.array([0.0, 0.0]), 3: np.array([0.0, 0.1]), 9: np.array([4.0, 4.0])}
    a = cluster_updates(ups, ClusterConfig(n_clusters=2))
    assert a.groups() == [[3, 7], [9]]


def _cfg(**kw):
    base = dict(arch=ModelArch("linear", 7, 12), rounds_max=4, local_epochs=1, batch_size=16, lr=0.01, seed=2)
    base.update(kw)
    return FederationConfig(**base)


def test_single_cluster_reproduces_plain_run(small_clients):
    cfg = _cfg()
    plain = run_federation(cfg, small_clients)
    run = run_clustered_federation(cfg, local_clients(small_clients, cfg), ClusterConfig(warmup_rounds=2, n_clusters=1))
    assert run.assignment.n_clusters == 1
    assert [r["round"] for r in run.history.rows] == list(range(5))
    for a, b in zip(plain.rows, run.history.rows):
        assert [a[c] for c in METRIC_COLUMNS] == [b[c] for c in METRIC_COLUMNS]
    assert np.array_equal(run.federations[0].global_params.values, _plain_params(cfg, small_clients))


def _plain_params(cfg, clients):
    fed = Federation(cfg, local_clients(clients, cfg))
    fed.run()
    return fed.global_params.values


def test_clusters_train_independently(small_clients):
    cfg = _cfg()
    run = run_clustered_federation(cfg, local_clients(small_clients, cfg), ClusterConfig(n_clusters=2))
    assert run.assignment.n_clusters == 2
    ids = {c.client_id for c in small_clients}
    assert set(run.assignment.labels) == ids
    for k, fed in enumerate(run.federations):
        rows = [r for r in run.history.rows if r["cluster_id"] == k]
        assert [r["round"] for r in rows] == [2, 3, 4]
        assert all(set(r["selected"]) <= set(run.assignment.members(k)) for r in rows)
    assert run.history.meta["clusters"] == run.assignment.groups()


def test_secure_agg_and_rounds_are_refused(small_clients):
    cfg = _cfg(privacy=PrivacyConfig(secure_agg=True))
    with pytest.raises(ClusteringError):
        run_clustered_federation(cfg, local_clients(small_clients, cfg), ClusterConfig(n_clusters=2))
    cfg = _cfg(rounds_max=1)
    with pytest.raises(FederationError):
        run_clustered_federation(cfg, local_clients(small_clients, cfg), ClusterConfig(warmup_rounds=2, n_clusters=2))
