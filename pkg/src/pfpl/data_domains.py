"""Multi-domain labeled data: synthetic generation, file ingestion, and
partitioning across clients with simultaneous label skew and feature skew.

Synthetic data places class means on a ring in the first two coordinates
(with a seed-derived phase) and pushes them through per-domain affine
transforms, so the same class has genuinely different conditional feature
distributions across domains while staying cleanly separable within one.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IngestionError, PartitionError
from .rng import substream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledData:
    """A flat pool of labeled feature vectors tagged with domain ids."""

    x: np.ndarray  # (n, p)
    y: np.ndarray  # (n,)
    domain: np.ndarray  # (n,)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        self.domain = np.asarray(self.domain, dtype=int)

    @property
    def num_samples(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class DomainSpec:
    """Affine feature map defining one domain's conditional distributions."""

    domain_id: int
    rotation: float = 0.0  # radians, applied to consecutive coordinate pairs
    scale: float | tuple = 1.0  # per-feature multiplier (scalar broadcasts)
    offset: float | tuple = 0.0  # per-feature shift
    noise_std: float = 0.0


@dataclass
class ClientDataset:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    train_domain: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_domain: np.ndarray
    classes_present: set = field(default_factory=set)
    per_class_counts: dict = field(default_factory=dict)

    @property
    def train_size(self) -> int:
        return self.train_x.shape[0]

    @property
    def domains(self) -> set:
        return set(int(v) for v in self.train_domain) | set(int(v) for v in self.test_domain)


@dataclass
class PartitionPlan:
    """How to split the per-domain pools across clients.

    Each client draws its class count from ``n_choices`` and its per-class
    sample count from ``k_choices`` (uniformly, under ``seed``), then takes
    those samples without replacement from its assigned domain pools.
    """

    num_clients: int
    n_choices: tuple
    k_choices: tuple
    domain_assignment: dict  # client_id -> tuple of domain ids
    seed: int
    test_fraction: float = 0.2


def _as_vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ConfigurationError(f"{name} must be scalar or length-{dim}, got shape {arr.shape}")
    return arr


def _check_spec(spec: DomainSpec, dim: int):
    scale = _as_vector(spec.scale, dim, "scale")
    offset = _as_vector(spec.offset, dim, "offset")
    if np.any(scale == 0.0):
        raise ConfigurationError(f"domain {spec.domain_id}: scale entries must be nonzero")
    if spec.noise_std < 0:
        raise ConfigurationError(f"domain {spec.domain_id}: noise_std must be >= 0")
    return scale, offset


def rotation_matrix(dim: int, theta: float) -> np.ndarray:
    """Block-diagonal rotation by ``theta`` on coordinate pairs (0,1), (2,3), ..."""
    mat = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for i in range(0, dim - 1, 2):
        mat[i, i] = c
        mat[i, i + 1] = -s
        mat[i + 1, i] = s
        mat[i + 1, i + 1] = c
    return mat


def class_means(num_classes: int, dim: int, base_seed: int, radius: float = 3.0) -> np.ndarray:
    """Base (pre-transform) class means: an irregular ring in the first two
    coordinates.

    Angles and radii carry bounded seed-derived jitter, so the geometry is not
    rotation-symmetric: a domain transform moves different classes by
    different amounts, the way real domains do.
    """
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    if dim < 2:
        raise ConfigurationError(f"feature dimension must be >= 2, got {dim}")
    rng = substream(base_seed, "class-geometry")
    phase = rng.uniform(0.0, 2.0 * np.pi)
    step = 2.0 * np.pi / num_classes
    angles = phase + step * np.arange(num_classes)
    angles = angles + rng.uniform(-0.25 * step, 0.25 * step, size=num_classes)
    radii = radius * (1.0 + rng.uniform(-0.2, 0.2, size=num_classes))
    means = np.zeros((num_classes, dim))
    means[:, 0] = radii * np.cos(angles)
    means[:, 1] = radii * np.sin(angles)
    return means


def transformed_class_means(
    spec: DomainSpec, num_classes: int, base_seed: int, dim: int, radius: float = 3.0
) -> np.ndarray:
    scale, offset = _check_spec(spec, dim)
    means = class_means(num_classes, dim, base_seed, radius)
    rot = rotation_matrix(dim, spec.rotation)
    return (scale * means) @ rot.T + offset


def make_synthetic_domain(
    spec: DomainSpec,
    num_classes: int,
    base_seed: int,
    samples_per_class: int,
    dim: int = 16,
    radius: float = 3.0,
) -> LabeledData:
    """Sample one domain: Gaussian blobs around the transformed class means.

    Domains sharing ``base_seed`` share the underlying class geometry, so two
    domains with different transforms have different P(x|y) by construction.
    Fully deterministic per (spec, base_seed).
    """
    if samples_per_class < 1:
        raise ConfigurationError(f"samples_per_class must be >= 1, got {samples_per_class}")
    means = transformed_class_means(spec, num_classes, base_seed, dim, radius)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    rng = substream(base_seed, "domain-noise", spec.domain_id)
    x = means[labels] + spec.noise_std * rng.standard_normal((labels.size, dim))
    return LabeledData(x, labels, np.full(labels.size, spec.domain_id))


def default_domain_specs(num_domains: int, num_classes: int, noise_std: float = 0.65) -> list[DomainSpec]:
    """Distinct per-domain transforms: rotations by multiples of one class step.

    Rotating by 2*pi/num_classes maps a class's blob onto its ring neighbour's
    base position, so pooling domains creates genuine cross-domain label
    conflict while each single domain remains separable.
    """
    if num_domains < 1:
        raise ConfigurationError("need at least one domain")
    if num_domains > num_classes:
        raise ConfigurationError(
            f"default transforms support at most {num_classes} distinct domains for "
            f"{num_classes} classes, got {num_domains}"
        )
    step = 2.0 * np.pi / num_classes
    return [DomainSpec(domain_id=j, rotation=j * step, noise_std=noise_std) for j in range(num_domains)]


def load_idx(images_path, labels_path) -> LabeledData:
    """Read an IDX image/label file pair (big-endian, magic-numbered).

    Pixels are scaled to [0, 1] and flattened; the domain tag is 0 (callers
    ingesting several files reassign domains per file).
    """
    images_path, labels_path = Path(images_path), Path(labels_path)

    img_bytes = _read_file(images_path)
    if len(img_bytes) < 16:
        raise IngestionError(f"{images_path}: truncated image header ({len(img_bytes)} bytes)")
    magic, count, rows, cols = struct.unpack_from(">IIII", img_bytes, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IngestionError(f"{images_path}: bad image magic 0x{magic:08x}")
    need = 16 + count * rows * cols
    if len(img_bytes) < need:
        raise IngestionError(f"{images_path}: truncated, expected {need} bytes, got {len(img_bytes)}")
    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    x = pixels.reshape(count, rows * cols).astype(float) / 255.0

    lab_bytes = _read_file(labels_path)
    if len(lab_bytes) < 8:
        raise IngestionError(f"{labels_path}: truncated label header ({len(lab_bytes)} bytes)")
    magic, lab_count = struct.unpack_from(">II", lab_bytes, 0)
    if magic != IDX_LABEL_MAGIC:
        raise IngestionError(f"{labels_path}: bad label magic 0x{magic:08x}")
    if len(lab_bytes) < 8 + lab_count:
        raise IngestionError(f"{labels_path}: truncated, expected {8 + lab_count} bytes")
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, count=lab_count, offset=8).astype(int)

    if count != lab_count:
        raise IngestionError(
            f"{images_path} has {count} images but {labels_path} has {lab_count} labels"
        )
    return LabeledData(x, labels, np.zeros(count, dtype=int))


def _read_file(path: Path) -> bytes:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if not data:
        raise IngestionError(f"{path}: empty file")
    return data


def load_csv(path) -> LabeledData:
    """Read a CSV with header f0..f{p-1},label,domain."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise IngestionError(f"{path}: empty file") from None
            rows = list(reader)
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc

    if len(header) < 3 or header[-2:] != ["label", "domain"]:
        raise IngestionError(f"{path}: header must end with 'label,domain', got {header}")
    p = len(header) - 2
    expected = [f"f{i}" for i in range(p)]
    if header[:p] != expected:
        raise IngestionError(f"{path}: feature columns must be f0..f{p - 1}, got {header[:p]}")

    x = np.empty((len(rows), p))
    y = np.empty(len(rows), dtype=int)
    dom = np.empty(len(rows), dtype=int)
    for i, row in enumerate(rows):
        if len(row) != p + 2:
            raise IngestionError(f"{path}: row {i + 2} has {len(row)} fields, expected {p + 2}")
        try:
            x[i] = [float(v) for v in row[:p]]
            y[i] = int(row[p])
            dom[i] = int(row[p + 1])
        except ValueError as exc:
            raise IngestionError(f"{path}: row {i + 2}: {exc}") from exc
    return LabeledData(x, y, dom)


def partition(pools: dict, plan: PartitionPlan) -> list[ClientDataset]:
    """Allocate per-domain pools to clients per the plan.

    Every client ends up with exactly its drawn n classes and k samples per
    class (split train/test by ``test_fraction``, stratified by class), taken
    without replacement; no sample index is handed to two clients.
    """
    _validate_plan(pools, plan)
    rng = substream(plan.seed, "partition")
    used = {dom: np.zeros(pool.num_samples, dtype=bool) for dom, pool in pools.items()}
    all_classes = sorted({int(c) for pool in pools.values() for c in np.unique(pool.y)})

    client_n = [int(rng.choice(np.asarray(plan.n_choices))) for _ in range(plan.num_clients)]
    client_classes = _deal_classes(pools, plan, client_n, all_classes, rng)

    clients = []
    for cid in range(plan.num_clients):
        domains = tuple(plan.domain_assignment[cid])
        classes = client_classes[cid]
        k = int(rng.choice(np.asarray(plan.k_choices)))

        train_parts, test_parts = [], []
        per_class_counts = {}
        for label in classes:
            candidates = []
            for dom in domains:
                pool = pools[dom]
                idx = np.nonzero((pool.y == label) & ~used[dom])[0]
                candidates.extend((dom, int(i)) for i in idx)
            if len(candidates) < k:
                raise PartitionError(
                    f"client {cid}: class {label} needs {k} samples from domains {domains}, "
                    f"only {len(candidates)} unused (short by {k - len(candidates)})"
                )
            picks = rng.choice(len(candidates), size=k, replace=False)
            chosen = [candidates[int(i)] for i in picks]
            for dom, i in chosen:
                used[dom][i] = True

            order = rng.permutation(k)
            # keep at least one training sample per class
            n_test = min(int(round(k * plan.test_fraction)), k - 1)
            test_sel = [chosen[int(i)] for i in order[:n_test]]
            train_sel = [chosen[int(i)] for i in order[n_test:]]
            train_parts.append(_gather(pools, train_sel))
            test_parts.append(_gather(pools, test_sel))
            per_class_counts[label] = len(train_sel)

        dim = next(iter(pools.values())).dim
        train_x, train_y, train_d = _stack(train_parts, dim)
        test_x, test_y, test_d = _stack(test_parts, dim)
        clients.append(
            ClientDataset(
                client_id=cid,
                train_x=train_x,
                train_y=train_y,
                train_domain=train_d,
                test_x=test_x,
                test_y=test_y,
                test_domain=test_d,
                classes_present={c for c, cnt in per_class_counts.items() if cnt > 0},
                per_class_counts=per_class_counts,
            )
        )
    assert all_classes  # pools validated nonempty
    return clients


def _deal_classes(pools, plan, client_n, all_classes, rng):
    """Random but balanced class assignment: deal class labels from shuffled
    decks so holder counts stay even across clients, restricted to classes the
    client's domains actually carry."""
    available = {}
    for cid in range(plan.num_clients):
        domains = tuple(plan.domain_assignment[cid])
        avail = sorted({int(c) for dom in domains for c in np.unique(pools[dom].y)})
        if client_n[cid] > len(avail):
            raise PartitionError(
                f"client {cid}: wants {client_n[cid]} classes but domains {domains} "
                f"only offer {len(avail)}"
            )
        available[cid] = set(avail)

    deck: list = []
    assigned: dict = {cid: [] for cid in range(plan.num_clients)}
    for cid in range(plan.num_clients):
        while len(assigned[cid]) < client_n[cid]:
            choice = None
            for position, label in enumerate(deck):
                if label not in assigned[cid] and label in available[cid]:
                    choice = deck.pop(position)
                    break
            if choice is None:
                # a fresh shuffled copy of every class always contains one the
                # client can still take (n <= |available| was validated)
                deck.extend(int(c) for c in rng.permutation(all_classes))
                continue
            assigned[cid].append(choice)
    return {cid: sorted(labels) for cid, labels in assigned.items()}


def _validate_plan(pools: dict, plan: PartitionPlan):
    if plan.num_clients < 1:
        raise ConfigurationError("plan needs at least one client")
    if not plan.n_choices or any(int(n) < 1 for n in plan.n_choices):
        raise ConfigurationError(f"n_choices must be positive integers, got {plan.n_choices}")
    if not plan.k_choices or any(int(k) < 1 for k in plan.k_choices):
        raise ConfigurationError(f"k_choices must be positive integers, got {plan.k_choices}")
    if not 0.0 <= plan.test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must be in [0, 1), got {plan.test_fraction}")
    if not pools:
        raise ConfigurationError("no data pools supplied")
    dims = {pool.dim for pool in pools.values()}
    if len(dims) != 1:
        raise ConfigurationError(f"pools disagree on feature dimension: {sorted(dims)}")
    for cid in range(plan.num_clients):
        if cid not in plan.domain_assignment:
            raise ConfigurationError(f"client {cid} missing from domain_assignment")
        for dom in plan.domain_assignment[cid]:
            if dom not in pools:
                raise ConfigurationError(f"client {cid} assigned unknown domain {dom}")


def _gather(pools: dict, selection):
    xs = [pools[dom].x[i] for dom, i in selection]
    ys = [int(pools[dom].y[i]) for dom, i in selection]
    ds = [dom for dom, _ in selection]
    return xs, ys, ds


def _stack(parts, dim: int):
    xs = [x for part in parts for x in part[0]]
    ys = [y for part in parts for y in part[1]]
    ds = [d for part in parts for d in part[2]]
    return (
        np.asarray(xs, dtype=float).reshape(len(xs), dim),
        np.asarray(ys, dtype=int),
        np.asarray(ds, dtype=int),
    )
