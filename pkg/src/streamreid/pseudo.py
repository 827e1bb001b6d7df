"""Pseudo-labeling backend: DBSCAN, hybrid memory, and the re-id losses.

Unlabeled target features are clustered with a deterministic from-scratch
DBSCAN over cosine distances; cluster indices become training labels. The
hybrid memory holds one L2-normalized slot per source class, per target
cluster, and per outlier instance, and drives a unified contrastive loss.
Cross-entropy and batch-hard triplet cover the classifier-based training
mode, and a PK sampler composes identity-balanced batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .mlp import MLP

log = logging.getLogger(__name__)

OUTLIER = -1


# ---------------------------------------------------------------------------
# DBSCAN
# ---------------------------------------------------------------------------

@dataclass
class DbscanParams:
    """eps None means adaptive: the percentile of pairwise cosine distances."""

    eps: float | None = None
    percentile: float = 2.0
    min_pts: int = 4

    def __post_init__(self):
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.eps is None and not 0.0 < self.percentile < 100.0:
            raise ValueError("percentile must lie in (0, 100)")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")


@dataclass
class ClusterAssignment:
    labels: np.ndarray          # per sample: cluster id or OUTLIER
    n_clusters: int
    eps_resolved: float

    def outlier_fraction(self) -> float:
        return float(np.mean(self.labels == OUTLIER))

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)


def cosine_distances(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm feature row, cosine distance undefined")
    unit = f / norms[:, None]
    return np.clip(1.0 - unit @ unit.T, 0.0, None)


def dbscan(features: np.ndarray, params: DbscanParams) -> ClusterAssignment:
    """Classic DBSCAN over cosine distances, deterministic by index order.

    Core points have at least min_pts neighbors within eps (self included);
    clusters grow from the first unvisited core in index order, so a border
    point reachable from several clusters joins the earliest-created one.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError("need a non-empty 2-d feature matrix")
    n = f.shape[0]
    dist = cosine_distances(f)
    if params.eps is not None:
        eps = float(params.eps)
    else:
        iu = np.triu_indices(n, k=1)
        eps = float(np.percentile(dist[iu], params.percentile)) if iu[0].size else 0.0

    neighbors = [np.flatnonzero(dist[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= params.min_pts for nb in neighbors])
    labels = np.full(n, OUTLIER, dtype=np.int64)
    assigned = np.zeros(n, dtype=bool)
    n_clusters = 0
    for start in range(n):
        if not core[start] or assigned[start]:
            continue
        cid = n_clusters
        n_clusters += 1
        labels[start] = cid
        assigned[start] = True
        queue = list(neighbors[start])
        qi = 0
        while qi < len(queue):
            j = int(queue[qi])
            qi += 1
            if assigned[j]:
                continue
            labels[j] = cid
            assigned[j] = True
            if core[j]:
                queue.extend(neighbors[j])
    return ClusterAssignment(labels, n_clusters, eps)


def demote_small_clusters(assignment: ClusterAssignment, min_size: int
                          ) -> ClusterAssignment:
    """Turn clusters below min_size into outliers and renumber contiguously."""
    labels = assignment.labels.copy()
    keep = [c for c in range(assignment.n_clusters)
            if np.count_nonzero(labels == c) >= min_size]
    remap = {old: new for new, old in enumerate(keep)}
    out = np.full_like(labels, OUTLIER)
    for i, lab in enumerate(labels):
        if lab != OUTLIER and lab in remap:
            out[i] = remap[lab]
    return ClusterAssignment(out, len(keep), assignment.eps_resolved)


# ---------------------------------------------------------------------------
# Hybrid memory
# ---------------------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm feature row")
    return x / norms[:, None]


@dataclass
class HybridMemory:
    """Slot bank [source classes | target clusters | outlier instances].

    Every slot is kept L2-normalized. Slot indices are stable for the
    lifetime of one clustering round.
    """

    source_centroids: np.ndarray
    cluster_centroids: np.ndarray
    outlier_features: np.ndarray
    source_class_ids: list[int]
    outlier_sample_indices: list[int]
    momentum: float = 0.2
    temperature: float = 0.05
    _source_slot: dict[int, int] = field(default_factory=dict, repr=False)
    _outlier_slot: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        self._source_slot = {ident: i for i, ident in enumerate(self.source_class_ids)}
        base = len(self.source_class_ids) + self.cluster_centroids.shape[0]
        self._outlier_slot = {s: base + i for i, s in enumerate(self.outlier_sample_indices)}

    @property
    def n_slots(self) -> int:
        return (self.source_centroids.shape[0] + self.cluster_centroids.shape[0]
                + self.outlier_features.shape[0])

    def slots(self) -> np.ndarray:
        return np.vstack([self.source_centroids, self.cluster_centroids,
                          self.outlier_features])

    def slot_of_source_class(self, identity: int) -> int:
        if identity not in self._source_slot:
            raise ValueError(f"unresolvable source identity {identity}")
        return self._source_slot[identity]

    def slot_of_cluster(self, cluster_id: int) -> int:
        if not 0 <= cluster_id < self.cluster_centroids.shape[0]:
            raise ValueError(f"unresolvable cluster id {cluster_id}")
        return self.source_centroids.shape[0] + cluster_id

    def slot_of_outlier(self, sample_index: int) -> int:
        if sample_index not in self._outlier_slot:
            raise ValueError(f"unresolvable outlier sample index {sample_index}")
        return self._outlier_slot[sample_index]

    def update(self, slot_indices: np.ndarray, unit_features: np.ndarray) -> None:
        """slot <- momentum * slot + (1 - momentum) * feature, renormalized.

        Applied sequentially in batch order after the optimizer step.
        """
        n_src = self.source_centroids.shape[0]
        n_cl = self.cluster_centroids.shape[0]
        for slot, feat in zip(slot_indices, unit_features):
            slot = int(slot)
            if slot < n_src:
                bank, row = self.source_centroids, slot
            elif slot < n_src + n_cl:
                bank, row = self.cluster_centroids, slot - n_src
            else:
                bank, row = self.outlier_features, slot - n_src - n_cl
            mixed = self.momentum * bank[row] + (1.0 - self.momentum) * feat
            norm = np.linalg.norm(mixed)
            if norm > 0:
                bank[row] = mixed / norm


def _mean_slot(unit_feats: np.ndarray, rows: np.ndarray, what: str) -> np.ndarray:
    mean = unit_feats[rows].mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0.0:
        # forced-degenerate case: fall back to the lowest-index member
        log.warning("degenerate %s centroid (zero mean), using member %d", what, rows[0])
        return unit_feats[rows[0]].copy()
    return mean / norm


def rebuild_memory(memory: HybridMemory | None, source: Dataset,
                   task_features: np.ndarray, assignment: ClusterAssignment,
                   extractor: MLP, momentum: float = 0.2,
                   temperature: float = 0.05) -> HybridMemory:
    """Recompute all slots from the current features and cluster assignment.

    Source class centroids average the extractor's (teacher) features per
    identity; cluster centroids average the provided task features; every
    outlier keeps its own slot. Momentum and temperature carry over from
    the previous memory when one is given.
    """
    if memory is not None:
        momentum, temperature = memory.momentum, memory.temperature
    src_unit = _unit_rows(extractor.features(source.descriptor_matrix()))
    src_ids = source.identities()
    class_ids = sorted(set(src_ids.tolist()))
    src_centroids = np.stack([
        _mean_slot(src_unit, np.flatnonzero(src_ids == ident), "source-class")
        for ident in class_ids
    ])

    task_unit = _unit_rows(np.asarray(task_features, dtype=np.float64))
    if assignment.labels.shape[0] != task_unit.shape[0]:
        raise ValueError("assignment is not parallel to task_features")
    if assignment.n_clusters > 0:
        cluster_centroids = np.stack([
            _mean_slot(task_unit, assignment.members(c), "cluster")
            for c in range(assignment.n_clusters)
        ])
    else:
        cluster_centroids = np.zeros((0, task_unit.shape[1]))
    outlier_rows = np.flatnonzero(assignment.labels == OUTLIER)
    outliers = task_unit[outlier_rows].copy() if outlier_rows.size else \
        np.zeros((0, task_unit.shape[1]))
    return HybridMemory(src_centroids, cluster_centroids, outliers,
                        class_ids, outlier_rows.tolist(), momentum, temperature)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _project_through_normalization(raw: np.ndarray, unit: np.ndarray,
                                   grad_unit: np.ndarray) -> np.ndarray:
    """Chain rule through row-wise L2 normalization."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    inner = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - inner * unit) / norms


def contrastive_loss(batch_features: np.ndarray, slot_labels: np.ndarray,
                     memory: HybridMemory) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy over cosine similarities to all memory slots.

    slot_labels holds each sample's positive slot index (resolve source
    classes / clusters / outliers through the memory first). Returns the
    loss and its gradient with respect to the raw batch features; slots
    are constants here, their momentum update happens separately.
    """
    f = np.asarray(batch_features, dtype=np.float64)
    y = np.asarray(slot_labels, dtype=np.int64)
    if y.shape[0] != f.shape[0]:
        raise ValueError("labels not parallel to batch")
    if np.any(y < 0) or np.any(y >= memory.n_slots):
        bad = y[(y < 0) | (y >= memory.n_slots)][0]
        raise ValueError(f"unresolvable slot label {bad}")
    unit = _unit_rows(f)
    slots = memory.slots()
    logits = unit @ slots.T / memory.temperature
    logp = _log_softmax(logits)
    n = f.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    grad_unit = (delta / n) @ slots / memory.temperature
    return loss, _project_through_normalization(f, unit, grad_unit)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray
                       ) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy; returns the gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != z.shape[0]:
        raise ValueError("labels not parallel to logits")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("label out of range for logit width")
    logp = _log_softmax(z)
    n = z.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def triplet_loss(batch_features: np.ndarray, labels: np.ndarray,
                 margin: float = 0.3) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss on Euclidean distances of unit features.

    Per anchor: hardest positive is the farthest same-label sample, hardest
    negative the closest other-label sample; hinge at the margin, averaged
    over anchors that have both. Returns the gradient w.r.t. raw features.
    """
    f = np.asarray(batch_features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape[0] != f.shape[0]:
        raise ValueError("labels not parallel to batch")
    n = f.shape[0]
    unit = _unit_rows(f)
    d2 = np.clip(_sq_dists_sym(unit), 0.0, None)
    dist = np.sqrt(d2)

    same = y[:, None] == y[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    grad_unit = np.zeros_like(unit)
    total = 0.0
    n_valid = 0
    active = []  # (anchor, hardest_pos, hardest_neg) with positive hinge
    for a in range(n):
        pos = np.flatnonzero(pos_mask[a])
        neg = np.flatnonzero(neg_mask[a])
        if pos.size == 0 or neg.size == 0:
            continue
        p = pos[np.argmax(dist[a, pos])]
        m = neg[np.argmin(dist[a, neg])]
        n_valid += 1
        hinge = dist[a, p] - dist[a, m] + margin
        if hinge > 0:
            total += hinge
            active.append((a, int(p), int(m)))
    if n_valid == 0:
        raise ValueError("no anchor with both a positive and a negative in batch")

    for a, p, m in active:
        if dist[a, p] > 1e-12:
            g = (unit[a] - unit[p]) / dist[a, p]
            grad_unit[a] += g
            grad_unit[p] -= g
        if dist[a, m] > 1e-12:
            g = (unit[a] - unit[m]) / dist[a, m]
            grad_unit[a] -= g
            grad_unit[m] += g
    grad_unit /= n_valid
    return total / n_valid, _project_through_normalization(f, unit, grad_unit)


def _sq_dists_sym(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    return sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)


# ---------------------------------------------------------------------------
# PK sampler
# ---------------------------------------------------------------------------

def pk_sampler(labels: np.ndarray, p: int, k_per_id: int, seed: int,
               n_batches: int):
    """Yield index batches of p distinct labels with k samples each.

    Outlier-labeled samples (OUTLIER) are never drawn. Identities with
    fewer than k samples are resampled with replacement. Deterministic for
    a given seed.
    """
    rng = np.random.default_rng(seed)
    yield from pk_batches(labels, p, k_per_id, rng, n_batches)


def pk_batches(labels: np.ndarray, p: int, k_per_id: int,
               rng: np.random.Generator, n_batches: int):
    y = np.asarray(labels, dtype=np.int64)
    uniq = np.unique(y[y != OUTLIER])
    if uniq.size < p:
        raise ValueError(f"only {uniq.size} distinct labels available, need P={p}")
    groups = {int(u): np.flatnonzero(y == u) for u in uniq}
    for _ in range(n_batches):
        chosen = rng.choice(uniq, size=p, replace=False)
        batch = []
        for lab in chosen:
            g = groups[int(lab)]
            replace = g.size < k_per_id
            batch.append(rng.choice(g, size=k_per_id, replace=replace))
        yield np.concatenate(batch)
