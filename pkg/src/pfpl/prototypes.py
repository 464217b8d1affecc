"""Prototype algebra: per-class embedding centroids, server-side clustering,
peer affinity weights, and the personalized / global / unbiased aggregations.

Distances are squared Euclidean throughout. All aggregations reduce members
in ascending client-id order, so reordering inputs never changes a bit of
the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_domains import ClientDataset
from .errors import ConfigurationError, DataError, DimensionError, ProtocolError
from .numeric_core import Model, forward_features

SIMILARITY = "similarity"
PAPER_LITERAL = "paper_literal"
WEIGHT_MODES = (SIMILARITY, PAPER_LITERAL)


@dataclass
class PrototypeEntry:
    centroid: np.ndarray  # (d,)
    count: int  # training samples behind the centroid


@dataclass
class PrototypeSet:
    owner: int
    entries: dict  # class label -> PrototypeEntry

    @property
    def dim(self) -> int:
        first = next(iter(self.entries.values()))
        return first.centroid.shape[0]

    def classes(self) -> list:
        return sorted(self.entries)


@dataclass
class ClusterMember:
    client_id: int
    centroid: np.ndarray
    count: int


@dataclass
class ClassCluster:
    label: int
    members: list  # ClusterMember, unique client ids

    def member(self, client_id: int) -> ClusterMember:
        for m in self.members:
            if m.client_id == client_id:
                return m
        raise ProtocolError(f"client {client_id} is not in the class-{self.label} cluster")

    def sorted_members(self) -> list:
        return sorted(self.members, key=lambda m: m.client_id)


@dataclass
class PersonalizedTargets:
    owner: int
    entries: dict  # class label -> target centroid (d,)


def compute_local_prototypes(model: Model, dataset: ClientDataset) -> PrototypeSet:
    """Per-class mean embedding of the client's training data."""
    if dataset.train_size == 0:
        raise DataError(f"client {dataset.client_id}: cannot build prototypes from empty data")
    embeddings = forward_features(model, dataset.train_x)
    entries = {}
    for label in sorted({int(y) for y in dataset.train_y}):
        mask = dataset.train_y == label
        entries[label] = PrototypeEntry(embeddings[mask].mean(axis=0), int(mask.sum()))
    return PrototypeSet(dataset.client_id, entries)


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Squared Euclidean distance, sum over (a_j - b_j)^2."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"distance between shapes {a.shape} and {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def cluster_by_class(all_sets: list) -> dict:
    """Group uploaded prototype sets by class label."""
    dims = {ps.dim for ps in all_sets if ps.entries}
    if len(dims) > 1:
        raise DimensionError(f"prototype sets disagree on embedding dimension: {sorted(dims)}")
    clusters: dict = {}
    for ps in sorted(all_sets, key=lambda s: s.owner):
        for label, entry in ps.entries.items():
            clusters.setdefault(label, ClassCluster(label, [])).members.append(
                ClusterMember(ps.owner, entry.centroid, entry.count)
            )
    return clusters


def peer_weights(client_id: int, cluster: ClassCluster, mode: str = SIMILARITY) -> dict:
    """Affinity weights over the other holders of this class.

    "paper_literal" is the printed ratio of squared distances (far peers weigh
    more); "similarity" is a softmax of negative distance with temperature set
    to the median peer distance, so near (same-domain) peers weigh more.
    Weights sum to one whenever a peer exists; degenerate all-equal distances
    fall back to uniform.
    """
    if mode not in WEIGHT_MODES:
        raise ConfigurationError(f"unknown weight mode {mode!r}, expected one of {WEIGHT_MODES}")
    own = cluster.member(client_id).centroid
    peers = [m for m in cluster.sorted_members() if m.client_id != client_id]
    if not peers:
        return {}
    dists = np.array([l2_distance(own, m.centroid) for m in peers])

    if mode == PAPER_LITERAL:
        total = float(dists.sum())
        if total == 0.0:
            weights = np.full(len(peers), 1.0 / len(peers))
        else:
            weights = dists / total
    else:
        tau = float(np.median(dists))
        if tau == 0.0:
            positive = dists[dists > 0]
            if positive.size == 0:
                return {m.client_id: 1.0 / len(peers) for m in peers}
            tau = float(positive.min())
        logits = -(dists - dists.min()) / tau
        exp = np.exp(logits)
        weights = exp / exp.sum()
    return {m.client_id: float(w) for m, w in zip(peers, weights)}


def personalized_prototype(
    client_id: int, cluster: ClassCluster, alpha: float, mode: str = SIMILARITY
) -> np.ndarray:
    """Blend of the client's own centroid with the affinity-weighted peers.

    alpha=1 returns the local centroid exactly; a sole holder gets its own
    centroid back regardless of alpha.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must be in [0, 1], got {alpha}")
    own = cluster.member(client_id)
    weights = peer_weights(client_id, cluster, mode)
    if not weights or alpha == 1.0:
        return own.centroid.copy()
    peer_sum = np.zeros_like(own.centroid)
    members = {m.client_id: m for m in cluster.members}
    for peer_id in sorted(weights):
        peer_sum = peer_sum + weights[peer_id] * members[peer_id].centroid
    return alpha * own.centroid + (1.0 - alpha) * peer_sum


def global_prototype(cluster: ClassCluster) -> np.ndarray:
    """Sample-count-weighted mean of the member centroids."""
    if not cluster.members:
        raise ProtocolError(f"class-{cluster.label} cluster is empty")
    total = sum(m.count for m in cluster.members)
    out = np.zeros_like(cluster.members[0].centroid)
    for m in cluster.sorted_members():
        out = out + (m.count / total) * m.centroid
    return out


def unbiased_prototype(cluster: ClassCluster) -> np.ndarray:
    """Unweighted mean of the member centroids."""
    if not cluster.members:
        raise ProtocolError(f"class-{cluster.label} cluster is empty")
    out = np.zeros_like(cluster.members[0].centroid)
    for m in cluster.sorted_members():
        out = out + m.centroid
    return out / len(cluster.members)


def prototype_set_to_doc(ps: PrototypeSet, round_index: int) -> dict:
    """JSON-ready document for persistence and payload accounting."""
    return {
        "client": ps.owner,
        "round": round_index,
        "entries": {
            str(label): {"centroid": entry.centroid.tolist(), "count": entry.count}
            for label, entry in sorted(ps.entries.items())
        },
    }


def prototype_set_from_doc(doc: dict) -> PrototypeSet:
    entries = {
        int(label): PrototypeEntry(np.asarray(body["centroid"], dtype=float), int(body["count"]))
        for label, body in doc["entries"].items()
    }
    return PrototypeSet(int(doc["client"]), entries)


def targets_to_doc(targets: PersonalizedTargets, round_index: int) -> dict:
    return {
        "client": targets.owner,
        "round": round_index,
        "entries": {str(label): vec.tolist() for label, vec in sorted(targets.entries.items())},
    }


def targets_from_doc(doc: dict) -> PersonalizedTargets:
    entries = {int(label): np.asarray(vec, dtype=float) for label, vec in doc["entries"].items()}
    return PersonalizedTargets(int(doc["client"]), entries)
