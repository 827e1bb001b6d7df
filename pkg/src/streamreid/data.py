"""Synthetic two-domain re-id data, feature-file ingestion, and task streams.

Descriptors are plain dense vectors; a "sample" is the record a camera
network would hand us after feature extraction. The generator draws one
centroid per identity, pushes target centroids through an affine domain
shift, and adds per-sample noise plus a per-camera offset. The target
identities are then partitioned into an ordered stream of disjoint tasks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(Enum):
    TRAIN = "train"
    QUERY = "query"
    GALLERY = "gallery"


@dataclass(frozen=True, eq=False)
class Sample:
    """One descriptor record: vector + identity + camera + domain tag."""

    descriptor: np.ndarray
    identity: int
    camera: int
    domain: Domain

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ValueError("identity and camera labels must be non-negative")
        if not np.all(np.isfinite(self.descriptor)):
            raise ValueError("descriptor contains non-finite entries")
        self.descriptor.flags.writeable = False


@dataclass
class Dataset:
    """Ordered collection of same-domain samples for one split."""

    samples: list[Sample]
    split: Split

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def domain(self) -> Domain:
        return self.samples[0].domain

    def descriptor_matrix(self) -> np.ndarray:
        return np.stack([s.descriptor for s in self.samples])

    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def cameras(self) -> np.ndarray:
        return np.array([s.camera for s in self.samples], dtype=np.int64)

    def identity_set(self) -> set[int]:
        return {s.identity for s in self.samples}

    def subset_by_identity(self, identities: Iterable[int]) -> "Dataset":
        keep = set(identities)
        return Dataset([s for s in self.samples if s.identity in keep], self.split)

    def validate(self, dim: int | None = None) -> None:
        """Check the structural invariants: single domain, consistent dim,
        and (for train splits) at least two samples per identity."""
        if not self.samples:
            raise ValueError("dataset is empty")
        domains = {s.domain for s in self.samples}
        if len(domains) != 1:
            raise ValueError(f"dataset mixes domains: {domains}")
        dims = {s.descriptor.shape[0] for s in self.samples}
        if len(dims) != 1 or (dim is not None and dims != {dim}):
            raise ValueError(f"inconsistent descriptor dimensions: {dims}")
        if self.split is Split.TRAIN:
            counts: dict[int, int] = {}
            for s in self.samples:
                counts[s.identity] = counts.get(s.identity, 0) + 1
            thin = [i for i, c in counts.items() if c < 2]
            if thin:
                raise ValueError(
                    f"train split has identities with fewer than 2 samples: {sorted(thin)[:5]}"
                )


@dataclass
class TaskStream:
    """Ordered target-domain tasks with pairwise-disjoint identity sets."""

    tasks: list[Dataset]

    @property
    def count(self) -> int:
        return len(self.tasks)

    def identity_sets(self) -> list[set[int]]:
        return [t.identity_set() for t in self.tasks]


# ---------------------------------------------------------------------------
# Domain shift
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AffineShift:
    """Affine map x -> x @ matrix.T + offset applied to target descriptors."""

    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.matrix.T + self.offset

    def is_identity(self) -> bool:
        d = self.matrix.shape[0]
        return np.array_equal(self.matrix, np.eye(d)) and not self.offset.any()

    @classmethod
    def identity(cls, dim: int) -> "AffineShift":
        return cls(np.eye(dim), np.zeros(dim))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AffineShift)
            and np.array_equal(self.matrix, other.matrix)
            and np.array_equal(self.offset, other.offset)
        )


COND_CAP = 10.0


def random_affine_shift(dim: int, magnitude: float, seed: int) -> AffineShift:
    """Draw a well-conditioned random affine map of the given magnitude.

    magnitude 0 returns the exact identity; otherwise the matrix is
    I + magnitude * G / sqrt(dim) with singular values clipped so the
    condition number never exceeds COND_CAP, plus a random offset of
    norm ~ magnitude.
    """
    if magnitude == 0.0:
        return AffineShift.identity(dim)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((dim, dim))
    m = np.eye(dim) + magnitude * g / math.sqrt(dim)
    u, s, vt = np.linalg.svd(m)
    s = np.clip(s, s.max() / COND_CAP, None)
    matrix = (u * s) @ vt
    offset = magnitude * rng.standard_normal(dim) / math.sqrt(dim)
    return AffineShift(matrix, offset)


def rotation_shift(dim: int, angle: float, seed: int,
                   offset_scale: float = 0.0) -> AffineShift:
    """Orthogonal shift rotating dimension i toward dimension dim//2 + i.

    With centroid variance concentrated in the first dim//2 dimensions,
    the angle moves identity-bearing variance into directions a
    source-trained extractor has learned to ignore; angle pi/2 swaps the
    subspaces entirely. Condition number is exactly 1.
    """
    k = dim // 2
    matrix = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for i in range(k):
        j = k + i
        matrix[i, i] = c
        matrix[j, j] = c
        matrix[j, i] = s
        matrix[i, j] = -s
    rng = np.random.default_rng(seed)
    offset = offset_scale * rng.standard_normal(dim) / math.sqrt(dim) \
        if offset_scale > 0 else np.zeros(dim)
    return AffineShift(matrix, offset)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_identities_source: int
    n_identities_target: int
    samples_per_identity: int
    d_in: int
    intra_class_std: float
    domain_shift: AffineShift
    camera_count: int = 2
    camera_jitter_std: float = 0.0
    seed: int = 0
    # per-dimension std of the identity centroids; None = isotropic unit.
    # Concentrating it on a subspace makes the learned metric matter.
    centroid_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if min(self.n_identities_source, self.n_identities_target) < 1:
            raise ValueError("need at least one identity per domain")
        if self.samples_per_identity < 4:
            # 1 query + 1 gallery + >=2 train samples per target identity
            raise ValueError("samples_per_identity must be >= 4")
        if self.d_in < 1 or self.camera_count < 1:
            raise ValueError("d_in and camera_count must be positive")
        if self.intra_class_std < 0 or self.camera_jitter_std < 0:
            raise ValueError("noise levels must be non-negative")
        if self.domain_shift.matrix.shape != (self.d_in, self.d_in):
            raise ValueError("domain_shift dimension does not match d_in")
        if self.centroid_scales is not None:
            if len(self.centroid_scales) != self.d_in:
                raise ValueError("centroid_scales length must equal d_in")
            if min(self.centroid_scales) <= 0:
                raise ValueError("centroid_scales must be positive")


@dataclass
class SynthResult:
    source: Dataset
    target_train: Dataset
    target_query: Dataset
    target_gallery: Dataset
    separation_ratio: float
    domain_shift: AffineShift

    def __iter__(self):
        return iter((self.source, self.target_train, self.target_query, self.target_gallery))


def _min_centroid_distance(centroids: np.ndarray) -> float:
    if centroids.shape[0] < 2:
        return math.inf
    d2 = np.sum((centroids[:, None, :] - centroids[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def _make_samples(centroids, domain, camera_count, intra_std, cam_offsets,
                  samples_per_identity, rng) -> list[Sample]:
    out = []
    for ident in range(centroids.shape[0]):
        for j in range(samples_per_identity):
            cam = j % camera_count
            vec = centroids[ident] + rng.normal(0.0, intra_std, centroids.shape[1]) \
                if intra_std > 0 else centroids[ident].copy()
            vec = vec + cam_offsets[cam]
            out.append(Sample(np.asarray(vec, dtype=np.float64), ident, cam, domain))
    return out


def generate_synthetic(cfg: SynthConfig) -> SynthResult:
    """Generate source train plus target train/query/gallery datasets.

    Per target identity, sample 0 goes to the query split, sample 1 to the
    gallery split (a different camera whenever camera_count >= 2, so the
    cross-camera protocol has at least one valid match), and the rest to
    train. Deterministic given cfg; rejects configurations whose classes
    are not separable (ratio of the closest centroid pair to the total
    noise scale must exceed 1).
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_in
    scales = np.ones(d) if cfg.centroid_scales is None else np.asarray(cfg.centroid_scales)

    src_centroids = rng.standard_normal((cfg.n_identities_source, d)) * scales
    tgt_centroids = cfg.domain_shift.apply(
        rng.standard_normal((cfg.n_identities_target, d)) * scales)
    src_cam_offsets = rng.normal(0.0, cfg.camera_jitter_std, (cfg.camera_count, d)) \
        if cfg.camera_jitter_std > 0 else np.zeros((cfg.camera_count, d))
    tgt_cam_offsets = rng.normal(0.0, cfg.camera_jitter_std, (cfg.camera_count, d)) \
        if cfg.camera_jitter_std > 0 else np.zeros((cfg.camera_count, d))

    noise_std = math.sqrt(cfg.intra_class_std**2 + cfg.camera_jitter_std**2)
    min_dist = min(_min_centroid_distance(src_centroids), _min_centroid_distance(tgt_centroids))
    ratio = math.inf if noise_std == 0 else min_dist / noise_std
    if ratio <= 1.0:
        raise ValueError(
            f"degenerate config: separation ratio {ratio:.3f} <= 1 "
            "(classes not distinguishable from noise)"
        )
    log.info("synthetic generator separation ratio: %.3f", ratio)

    src_samples = _make_samples(src_centroids, Domain.SOURCE, cfg.camera_count,
                                cfg.intra_class_std, src_cam_offsets,
                                cfg.samples_per_identity, rng)
    tgt_samples = _make_samples(tgt_centroids, Domain.TARGET, cfg.camera_count,
                                cfg.intra_class_std, tgt_cam_offsets,
                                cfg.samples_per_identity, rng)

    # identity-major generation order: sample j of an identity sits at
    # flat index identity * samples_per_identity + j
    train, query, gallery = [], [], []
    for slot, s in enumerate(tgt_samples):
        j = slot % cfg.samples_per_identity
        (query if j == 0 else gallery if j == 1 else train).append(s)

    source = Dataset(src_samples, Split.TRAIN)
    target_train = Dataset(train, Split.TRAIN)
    target_query = Dataset(query, Split.QUERY)
    target_gallery = Dataset(gallery, Split.GALLERY)
    for ds in (source, target_train, target_query, target_gallery):
        ds.validate(dim=d)
    return SynthResult(source, target_train, target_query, target_gallery,
                       ratio, cfg.domain_shift)


# ---------------------------------------------------------------------------
# Task stream
# ---------------------------------------------------------------------------

def split_stream(target_train: Dataset, n_tasks: int, seed: int) -> TaskStream:
    """Shuffle target identities and partition them into n_tasks groups.

    Group sizes differ by at most one; the remainder lands on the earliest
    tasks. Each task keeps all samples of its identities, in the original
    dataset order.
    """
    ids = sorted(target_train.identity_set())
    if n_tasks < 1 or n_tasks > len(ids):
        raise ValueError(f"n_tasks={n_tasks} exceeds identity count {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]

    base, rem = divmod(len(order), n_tasks)
    tasks, pos = [], 0
    for k in range(n_tasks):
        size = base + (1 if k < rem else 0)
        chunk = set(order[pos:pos + size])
        pos += size
        tasks.append(target_train.subset_by_identity(chunk))
    return TaskStream(tasks)


# ---------------------------------------------------------------------------
# Feature file format
# ---------------------------------------------------------------------------
# Header:  D_IN <int> DOMAIN <source|target> SPLIT <train|query|gallery>
# Record:  identity<TAB>camera<TAB>v1,v2,...,vD

class FeatureFileError(ValueError):
    """Parse failure, pointing at the offending record."""

    def __init__(self, message: str, record_index: int | None = None):
        self.record_index = record_index
        where = "header" if record_index is None else f"record {record_index}"
        super().__init__(f"{where}: {message}")


def save_feature_file(path, dataset: Dataset) -> None:
    dim = dataset.samples[0].descriptor.shape[0]
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(f"D_IN {dim} DOMAIN {dataset.domain.value} SPLIT {dataset.split.value}\n")
        for s in dataset.samples:
            vals = ",".join(repr(float(v)) for v in s.descriptor)
            f.write(f"{s.identity}\t{s.camera}\t{vals}\n")


def load_feature_file(path) -> Dataset:
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FeatureFileError("empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "D_IN" or head[2] != "DOMAIN" or head[4] != "SPLIT":
        raise FeatureFileError(f"malformed header line: {lines[0]!r}")
    try:
        dim = int(head[1])
        domain = Domain(head[3])
        split = Split(head[5])
    except ValueError as e:
        raise FeatureFileError(str(e)) from e
    if dim < 1:
        raise FeatureFileError(f"non-positive dimension {dim}")

    samples = []
    for idx, line in enumerate(lines[1:]):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FeatureFileError(f"expected 3 tab-separated fields, got {len(parts)}", idx)
        try:
            ident, cam = int(parts[0]), int(parts[1])
            vec = np.array([float(v) for v in parts[2].split(",")], dtype=np.float64)
        except ValueError as e:
            raise FeatureFileError(f"unparseable field ({e})", idx) from e
        if vec.shape[0] != dim:
            raise FeatureFileError(f"dimension {vec.shape[0]} != header D_IN {dim}", idx)
        if not np.all(np.isfinite(vec)):
            raise FeatureFileError("non-finite descriptor entry", idx)
        if ident < 0 or cam < 0:
            raise FeatureFileError("negative identity or camera label", idx)
        samples.append(Sample(vec, ident, cam, domain))
    if not samples:
        raise FeatureFileError("file has a header but no records")
    return Dataset(samples, split)
