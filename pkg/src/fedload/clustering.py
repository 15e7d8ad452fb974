"""Hierarchical clustering of clients by update similarity (FL+HC).

After a warm-up, every client's full-participation delta from the shared
global model is collected; clients are clustered agglomeratively on those
deltas and each cluster then federates on its own, starting from a copy of
the global model.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ClusteringError, EmptyCluster, FederationError, TooFewClients
from .fedcore import Federation, RoundHistory
from .model import ParamVector

METRICS = ("euclidean", "cosine")
LINKAGES = ("single", "complete", "average")


@dataclass(frozen=True)
class ClusterConfig:
    warmup_rounds: int = 1
    metric: str = "euclidean"
    linkage: str = "average"
    threshold: float | None = None
    n_clusters: int | None = None

    def __post_init__(self):
        if self.warmup_rounds < 1:
            raise ClusteringError("warmup_rounds must be >= 1")
        if self.metric not in METRICS:
            raise ClusteringError(f"metric must be one of {METRICS}")
        if self.linkage not in LINKAGES:
            raise ClusteringError(f"linkage must be one of {LINKAGES}")
        if (self.threshold is None) == (self.n_clusters is None):
            raise ClusteringError("set exactly one of threshold and n_clusters")
        if self.threshold is not None and not self.threshold > 0:
            raise ClusteringError("threshold must be positive")
        if self.n_clusters is not None and self.n_clusters < 1:
            raise ClusteringError("n_clusters must be >= 1")

    def to_dict(self):
        return {
            "warmup_rounds": self.warmup_rounds,
            "metric": self.metric,
            "linkage": self.linkage,
            "threshold": self.threshold,
            "n_clusters": self.n_clusters,
        }


@dataclass
class ClusterAssignment:
    """Total partition of client ids into dense cluster ids ``0..k-1``.

    Cluster ids are numbered by each cluster's smallest client id.
    """

    labels: dict[int, int]
    merges: list[dict] = field(default_factory=list)

    def __post_init__(self):
        used = sorted(set(self.labels.values()))
        if used != list(range(len(used))):
            raise ClusteringError("cluster ids must be dense 0..k-1")

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels.values()))

    def members(self, cluster_id: int) -> list[int]:
        return sorted(c for c, k in self.labels.items() if k == cluster_id)

    def groups(self) -> list[list[int]]:
        return [self.members(k) for k in range(self.n_clusters)]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["client_id", "cluster_id"])
        for c in sorted(self.labels):
            w.writerow([c, self.labels[c]])
        return out.getvalue()

    def merge_trace_json(self) -> str:
        return json.dumps({"merges": self.merges}, indent=2)


def collect_warmup_updates(federation: Federation, n: int) -> dict[int, ParamVector]:
    """Run ordinary rounds up to ``n - 1``, then round ``n`` with every client.

    Returns each client's (post clip/noise) delta from round ``n``. Round ``n``
    is a complete round: its aggregate is applied to the global model.
    """
    if n < 1:
        raise ClusteringError("warm-up round must be >= 1")
    if federation.cfg.privacy.secure_agg:
        raise ClusteringError("secure aggregation hides the individual updates clustering needs")
    if federation.state.round >= n:
        raise ClusteringError(f"federation is already at round {federation.state.round}")
    federation.run(rounds=n - 1 - federation.state.round)
    federation.run_round(force_full=True)
    return dict(federation.last_deltas)


def _as_matrix(updates):
    if isinstance(updates, Mapping):
        ids = sorted(updates)
        vecs = [updates[i] for i in ids]
    else:
        ids = list(range(len(updates)))
        vecs = list(updates)
    rows = [v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64) for v in vecs]
    return ids, np.vstack(rows) if rows else np.empty((0, 0))


def pairwise_distances(updates, metric: str = "euclidean") -> np.ndarray:
    """Symmetric distance matrix over clients in ascending id order.

    Cosine distance is ``1 - cos``; a zero vector is at distance 1 from
    everything except itself.
    """
    ids, X = _as_matrix(updates)
    if len(ids) < 2:
        raise TooFewClients("need at least two clients to cluster")
    n = X.shape[0]
    D = np.zeros((n, n))
    if metric == "euclidean":
        for i in range(n):
            for j in range(i + 1, n):
                D[i, j] = D[j, i] = np.linalg.norm(X[i] - X[j])
    elif metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        for i in range(n):
            for j in range(i + 1, n):
                if norms[i] == 0 or norms[j] == 0:
                    d = 1.0
                else:
                    d = 1.0 - float(X[i] @ X[j]) / (norms[i] * norms[j])
                D[i, j] = D[j, i] = d
    else:
        raise ClusteringError(f"unknown metric {metric!r}")
    return D


def _linkage_distance(D, a, b, linkage):
    block = D[np.ix_(a, b)]
    if linkage == "single":
        return float(block.min())
    if linkage == "complete":
        return float(block.max())
    return float(block.sum() / block.size)


def agglomerate(
    D: np.ndarray,
    linkage: str = "average",
    threshold: float | None = None,
    n_clusters: int | None = None,
    ids=None,
) -> ClusterAssignment:
    """Bottom-up merging until the closest pair is farther than ``threshold``
    or ``n_clusters`` remain.

    Linkage distances are recomputed from the point distances of the member
    lists, so no Lance-Williams drift accumulates. A merged cluster keeps the
    lower of its two ids; among equally close pairs the lexicographically
    smallest (id_a, id_b) merges first.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if D.ndim != 2 or D.shape[1] != n:
        raise ClusteringError("distance matrix must be square")
    if linkage not in LINKAGES:
        raise ClusteringError(f"unknown linkage {linkage!r}")
    if (threshold is None) == (n_clusters is None):
        raise ClusteringError("set exactly one of threshold and n_clusters")
    ids = list(range(n)) if ids is None else list(ids)
    if n_clusters is not None and not 1 <= n_clusters <= max(n, 1):
        raise ClusteringError(f"n_clusters must be in [1, {n}]")
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    merges = []
    while len(clusters) > 1:
        if n_clusters is not None and len(clusters) <= n_clusters:
            break
        keys = sorted(clusters)
        best = None
        for x, a in enumerate(keys):
            for b in keys[x + 1 :]:
                d = _linkage_distance(D, clusters[a], clusters[b], linkage)
                if best is None or d < best[0]:
                    best = (d, a, b)
        d, a, b = best
        if threshold is not None and d > threshold:
            break
        clusters[a] = sorted(clusters[a] + clusters.pop(b))
        merges.append({"step": len(merges), "a": ids[a], "b": ids[b], "distance": d, "size": len(clusters[a])})
    labels = {}
    for k, key in enumerate(sorted(clusters, key=lambda c: clusters[c][0])):
        for i in clusters[key]:
            labels[ids[i]] = k
    return ClusterAssignment(labels, merges)


def cluster_updates(updates: Mapping[int, ParamVector], cfg: ClusterConfig) -> ClusterAssignment:
    ids = sorted(updates)
    D = pairwise_distances(updates, cfg.metric)
    return agglomerate(D, cfg.linkage, cfg.threshold, cfg.n_clusters, ids=ids)


def split_federation(federation: Federation, assignment: ClusterAssignment) -> list[Federation]:
    """One independent federation per cluster, each seeded with the current global model."""
    if set(assignment.labels) != set(federation.clients):
        raise ClusteringError("assignment does not cover exactly the federation's clients")
    out = []
    for k in range(assignment.n_clusters):
        members = assignment.members(k)
        if not members:
            raise EmptyCluster(f"cluster {k} is empty")
        sub = federation.spawn(
            {c: federation.clients[c] for c in members},
            federation.global_params.with_values(federation.global_params.values),
            start_round=federation.state.round,
            cluster_id=k,
            label=federation.history.label,
            history=RoundHistory(federation.history.label, federation.history.horizon, federation.history.model),
            evaluated=True,
        )
        out.append(sub)
    return out


@dataclass
class ClusteredRun:
    history: RoundHistory
    assignment: ClusterAssignment
    federations: list[Federation]
    warmup: Federation


def run_clustered_federation(cfg, clients: Mapping, cluster_cfg: ClusterConfig, label="federated", federation=None) -> ClusteredRun:
    """Warm up, cluster, then federate each cluster until ``cfg.rounds_max``.

    ``clients`` maps ids to client handles; pass a ready ``federation``
    instead to run over another transport. The combined history holds the
    warm-up rows (``cluster_id = -1``) followed by every cluster's rows,
    clusters in id order.
    """
    if cluster_cfg.warmup_rounds > cfg.rounds_max:
        raise FederationError("warm-up needs more rounds than rounds_max")
    fed = federation or Federation(cfg, clients, label=label)
    updates = collect_warmup_updates(fed, cluster_cfg.warmup_rounds)
    assignment = cluster_updates(updates, cluster_cfg)
    subs = split_federation(fed, assignment)
    combined = RoundHistory(label, fed.history.horizon, fed.history.model)
    combined.extend(fed.history)
    for sub in subs:
        sub.run()
        combined.extend(sub.history)
    combined.meta["clusters"] = assignment.groups()
    return ClusteredRun(combined, assignment, subs, fed)
