"""Synthetic domain-incremental data and the internal/external partition.

Every domain draws the same class layout (a regular simplex of class means,
radius 3, unit isotropic noise) pushed through a per-domain rotation and
shift. Related domains take their rotation pair from a fixed moderate-angle
table, so domains share label semantics but require genuine adaptation;
unrelated domains rotate into the anti-aligned band and shift off the
class-mean subspace, which leaves a trained classifier near chance and its
predictive entropy high and flat.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .nn_core import Matrix

MEAN_RADIUS = 3.0
TRAIN_FRACTION = 0.8

RELATIONS = ("related", "unrelated")
# Fixed per-domain rotation pairs (degrees) for the related-domain family:
# one angle for each of the first two coordinate planes of the class-mean
# subspace. Domain 0 anchors the layout; domains 1-3 form a well-separated
# cluster away from it and domain 4 sits between them, which is the geometry
# the bundled benchmark scenarios rely on (shared domain 0, per-teacher
# domains 1-3, external domain 4). Later ids reuse the table with a fixed
# angular offset per cycle.
RELATED_ANGLE_TABLE_DEG = (
    (0.0, 0.0),
    (85.0, 65.0),
    (130.0, 0.0),
    (85.0, -65.0),
    (100.0, 15.0),
    (45.0, -40.0),
    (115.0, 40.0),
    (60.0, -25.0),
)
RELATED_TABLE_CYCLE_OFFSET_DEG = 13.0
RELATED_ANGLE_JITTER_DEG = 2.0
UNRELATED_ANGLE_RANGE_DEG = (120.0, 180.0)
UNRELATED_SHIFT_NORM = 4.0

# Seed-stream tags keep the transform and sample draws independent.
_TRANSFORM_TAG = 11
_SAMPLES_TAG = 12


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    domain: int


class LabeledSet:
    """Column-oriented store for labeled samples from one or more domains."""

    def __init__(self, features: Matrix, labels: np.ndarray, domains: np.ndarray):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        self.domains = np.asarray(domains, dtype=int)
        if not (len(self.features) == len(self.labels) == len(self.domains)):
            raise InvalidArgumentError("features, labels and domains must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.features[i], int(self.labels[i]), int(self.domains[i]))

    @staticmethod
    def concat(sets: list["LabeledSet"]) -> "LabeledSet":
        if not sets:
            raise InvalidArgumentError("cannot concatenate zero sets")
        return LabeledSet(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.domains for s in sets]),
        )

    def take(self, idx: np.ndarray) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx], self.domains[idx])

    @staticmethod
    def empty(feature_dim: int) -> "LabeledSet":
        return LabeledSet(
            np.zeros((0, feature_dim)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
        )


@dataclass(frozen=True)
class DomainDataset:
    domain_id: int
    train: LabeledSet
    test: LabeledSet


@dataclass(frozen=True)
class DistillSet:
    """The fixed distillation inputs: features plus hidden domain tags.

    Labels are stripped at construction; nothing downstream can read them.
    """

    features: Matrix
    domain_ids: np.ndarray
    external_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.domain_ids)


@dataclass(frozen=True)
class ScenarioSpec:
    n_classes: int
    feature_dim: int
    n_domains: int
    shared_domains: tuple[int, ...]
    teacher_exclusive_domains: tuple[tuple[int, ...], ...]
    external_domains: tuple[int, ...]
    ed_ratio: float
    samples_per_class: int
    seed: int
    external_relation: str = "related"

    def teacher_domain_ids(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.shared_domains) | set(self.teacher_exclusive_domains[t])))

    @property
    def n_teachers(self) -> int:
        return len(self.teacher_exclusive_domains)

    def validate(self) -> None:
        if self.n_classes < 2 or self.feature_dim < 2 or self.n_domains < 1:
            raise InvalidArgumentError("need n_classes >= 2, feature_dim >= 2, n_domains >= 1")
        if self.samples_per_class < 4:
            raise InvalidArgumentError("need at least 4 samples per class per domain")
        if not self.teacher_exclusive_domains:
            raise InvalidArgumentError("need at least one teacher")
        if not (0.0 <= self.ed_ratio < 1.0):
            raise InvalidArgumentError(f"ed_ratio must lie in [0, 1), got {self.ed_ratio}")
        if self.external_relation not in RELATIONS:
            raise InvalidArgumentError(
                f"external_relation must be one of {RELATIONS}, got {self.external_relation!r}"
            )
        all_ids = set(self.shared_domains) | set(self.external_domains)
        for excl in self.teacher_exclusive_domains:
            all_ids |= set(excl)
        bad = [i for i in all_ids if not (0 <= i < self.n_domains)]
        if bad:
            raise InvalidArgumentError(f"domain ids {bad} outside [0, {self.n_domains})")
        external = set(self.external_domains)
        for t in range(self.n_teachers):
            overlap = external & set(self.teacher_domain_ids(t))
            if overlap:
                raise InvalidArgumentError(
                    f"external domains {sorted(overlap)} overlap teacher {t}'s training domains"
                )
        shared = set(self.shared_domains)
        seen: set[int] = set()
        for t, excl in enumerate(self.teacher_exclusive_domains):
            eset = set(excl)
            if eset & shared:
                raise InvalidArgumentError(f"teacher {t} exclusive domains overlap shared domains")
            if eset & seen:
                raise InvalidArgumentError(f"teacher {t} shares an exclusive domain with another teacher")
            seen |= eset


@dataclass(frozen=True)
class CdScenario:
    """A fully materialized partition: teacher data, distillation set, tests.

    `internal` and `external` are the labeled samples actually present in
    the distillation set (labels retained only for bookkeeping and checks).
    """

    spec: ScenarioSpec
    teacher_train_sets: tuple[LabeledSet, ...]
    internal: LabeledSet
    external: LabeledSet
    distill_set: DistillSet
    test_sets: dict[int, LabeledSet]

    @property
    def teacher_known_domains(self) -> tuple[int, ...]:
        known: set[int] = set()
        for t in range(self.spec.n_teachers):
            known |= set(self.spec.teacher_domain_ids(t))
        return tuple(sorted(known))

    @property
    def unseen_domains(self) -> tuple[int, ...]:
        """Domains known to some teacher but absent from the distillation set."""
        present = set(np.unique(self.distill_set.domain_ids).tolist())
        return tuple(sorted(set(self.teacher_known_domains) - present))


def _base_class_means(n_classes: int, feature_dim: int) -> Matrix:
    """Regular simplex of class means at radius MEAN_RADIUS, zero-padded to d."""
    eye = np.eye(n_classes) - 1.0 / n_classes
    scale = MEAN_RADIUS / np.sqrt(1.0 - 1.0 / n_classes)
    means = np.zeros((n_classes, feature_dim))
    means[:, :n_classes] = eye * scale
    return means


def _rotate_rows(rows: Matrix, angle_a: float, angle_b: float) -> Matrix:
    """Rotate rows in the first two coordinate planes by the given angles.

    Plane (0, 1) turns by angle_a and plane (2, 3) by angle_b; rotating a
    plane that lies entirely in the noise subspace would be a distributional
    no-op, so higher planes are left alone.
    """
    out = rows.copy()
    for k, angle in ((0, angle_a), (2, angle_b)):
        if k + 1 >= rows.shape[1]:
            break
        c, s = np.cos(angle), np.sin(angle)
        a = out[:, k].copy()
        b = out[:, k + 1].copy()
        out[:, k] = c * a - s * b
        out[:, k + 1] = s * a + c * b
    return out


def _domain_transform(
    seed: int, domain_id: int, n_classes: int, feature_dim: int, relation: str
) -> tuple[float, float, np.ndarray]:
    """Deterministic (angle_a, angle_b, shift) for one domain."""
    rel_code = RELATIONS.index(relation)
    rng = np.random.default_rng([_TRANSFORM_TAG, seed, domain_id, rel_code])
    shift = np.zeros(feature_dim)
    if relation == "related":
        table = RELATED_ANGLE_TABLE_DEG
        base_a, base_b = table[domain_id % len(table)]
        cycle = RELATED_TABLE_CYCLE_OFFSET_DEG * (domain_id // len(table))
        jitter = rng.uniform(-RELATED_ANGLE_JITTER_DEG, RELATED_ANGLE_JITTER_DEG, size=2)
        angle_a = base_a + cycle + jitter[0]
        angle_b = base_b + cycle + jitter[1]
    else:
        angle_a, angle_b = rng.uniform(*UNRELATED_ANGLE_RANGE_DEG, size=2)
        # Shift off the class-mean subspace: far from anything seen in
        # training without steering toward any particular class.
        if feature_dim > n_classes:
            direction = rng.standard_normal(feature_dim - n_classes)
            direction /= np.linalg.norm(direction)
            shift[n_classes:] = UNRELATED_SHIFT_NORM * direction
    return np.deg2rad(angle_a), np.deg2rad(angle_b), shift


def _split_counts(n: int) -> int:
    """Training-row count for an n-sample 80/20 split (both splits non-empty)."""
    return max(1, min(n - 1, int(round(TRAIN_FRACTION * n))))


def generate_domain(
    seed: int,
    domain_id: int,
    n_classes: int,
    feature_dim: int,
    n_per_class: int,
    relation: str = "related",
) -> DomainDataset:
    """Sample one domain: rotated/shifted class means plus unit Gaussian noise.

    The same (seed, domain_id, relation) always produces bit-identical data.
    """
    if n_classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {n_classes}")
    if feature_dim < 2 or feature_dim < n_classes:
        raise InvalidArgumentError(
            f"feature_dim must be >= max(2, n_classes) for the simplex layout, got {feature_dim}"
        )
    if n_per_class < 4:
        raise InvalidArgumentError(f"need n_per_class >= 4, got {n_per_class}")
    if relation not in RELATIONS:
        raise InvalidArgumentError(f"relation must be one of {RELATIONS}, got {relation!r}")

    angle_a, angle_b, shift = _domain_transform(seed, domain_id, n_classes, feature_dim, relation)
    means = _rotate_rows(_base_class_means(n_classes, feature_dim), angle_a, angle_b) + shift
    rng = np.random.default_rng([_SAMPLES_TAG, seed, domain_id, RELATIONS.index(relation)])

    n_train = _split_counts(n_per_class)
    train_feats, train_labels, test_feats, test_labels = [], [], [], []
    for c in range(n_classes):
        x = means[c] + rng.standard_normal((n_per_class, feature_dim))
        train_feats.append(x[:n_train])
        test_feats.append(x[n_train:])
        train_labels.append(np.full(n_train, c))
        test_labels.append(np.full(n_per_class - n_train, c))

    def pack(feats: list[Matrix], labels: list[np.ndarray]) -> LabeledSet:
        f = np.concatenate(feats)
        l = np.concatenate(labels)
        return LabeledSet(f, l, np.full(len(l), domain_id))

    return DomainDataset(domain_id, pack(train_feats, train_labels), pack(test_feats, test_labels))


def _mix_selection(n_internal: int, n_external: int, ed_ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays realizing |external'| / |total| = ed_ratio within one sample.

    Whichever pool is over-represented relative to the target ratio is
    deterministically thinned with evenly spaced indices.
    """
    if not (0.0 <= ed_ratio < 1.0):
        raise InvalidArgumentError(f"ed_ratio must lie in [0, 1), got {ed_ratio}")

    def spaced(k: int, n: int) -> np.ndarray:
        return np.floor(np.arange(k) * n / k).astype(int) if k < n else np.arange(n)

    if ed_ratio == 0.0 or n_external == 0:
        return np.arange(n_internal), np.zeros(0, dtype=int)
    if n_internal == 0:
        return np.zeros(0, dtype=int), np.arange(n_external)
    wanted_ext = int(round(n_internal * ed_ratio / (1.0 - ed_ratio)))
    if wanted_ext <= n_external:
        return np.arange(n_internal), spaced(wanted_ext, n_external)
    wanted_int = int(round(n_external * (1.0 - ed_ratio) / ed_ratio))
    return spaced(wanted_int, n_internal), np.arange(n_external)


def mix_ratio(internal: LabeledSet, external: LabeledSet, ed_ratio: float) -> DistillSet:
    """Assemble the distillation set at the requested external-data fraction.

    Labels are stripped; only features and domain tags survive.
    """
    idx_i, idx_e = _mix_selection(len(internal), len(external), ed_ratio)
    sel_i, sel_e = internal.take(idx_i), external.take(idx_e)
    features = np.concatenate([sel_i.features, sel_e.features])
    domain_ids = np.concatenate([sel_i.domains, sel_e.domains])
    mask = np.concatenate([np.zeros(len(sel_i), dtype=bool), np.ones(len(sel_e), dtype=bool)])
    return DistillSet(features, domain_ids, mask)


def build_scenario(spec: ScenarioSpec) -> CdScenario:
    """Generate all domains and assemble the continual-distillation partition."""
    spec.validate()
    external = set(spec.external_domains)
    datasets = {
        m: generate_domain(
            spec.seed,
            m,
            spec.n_classes,
            spec.feature_dim,
            spec.samples_per_class,
            relation=spec.external_relation if m in external else "related",
        )
        for m in range(spec.n_domains)
    }

    def pool(ids: tuple[int, ...]) -> LabeledSet:
        if not ids:
            return LabeledSet.empty(spec.feature_dim)
        return LabeledSet.concat([datasets[m].train for m in sorted(ids)])

    teacher_sets = tuple(pool(spec.teacher_domain_ids(t)) for t in range(spec.n_teachers))
    internal_pool = pool(tuple(spec.shared_domains))
    external_pool = pool(tuple(spec.external_domains))

    if len(internal_pool) == 0 and len(external_pool) == 0:
        raise InvalidArgumentError("scenario has an empty distillation set")
    if len(internal_pool) == 0:
        # Degenerate all-external setup: the ratio is forced to 1.
        idx_i = np.zeros(0, dtype=int)
        idx_e = np.arange(len(external_pool))
    else:
        idx_i, idx_e = _mix_selection(len(internal_pool), len(external_pool), spec.ed_ratio)
    sel_i, sel_e = internal_pool.take(idx_i), external_pool.take(idx_e)
    features = np.concatenate([sel_i.features, sel_e.features])
    domain_ids = np.concatenate([sel_i.domains, sel_e.domains])
    mask = np.concatenate([np.zeros(len(sel_i), dtype=bool), np.ones(len(sel_e), dtype=bool)])

    return CdScenario(
        spec=spec,
        teacher_train_sets=teacher_sets,
        internal=sel_i,
        external=sel_e,
        distill_set=DistillSet(features, domain_ids, mask),
        test_sets={m: datasets[m].test for m in range(spec.n_domains)},
    )


def balance_pair_stream(
    internal_features: Matrix, external_features: Matrix, batch_size: int, seed
):
    """Yield (internal, external) feature batches for one balanced epoch.

    The smaller pool is oversampled uniformly with replacement to the size
    of the larger; the larger pool is visited in a seeded shuffle.
    """
    internal_features = np.asarray(internal_features, dtype=float)
    external_features = np.asarray(external_features, dtype=float)
    if len(internal_features) == 0 or len(external_features) == 0:
        raise InvalidArgumentError("both pools must be non-empty")
    if batch_size < 1:
        raise InvalidArgumentError(f"batch_size must be >= 1, got {batch_size}")
    n = max(len(internal_features), len(external_features))
    rng = np.random.default_rng(seed)

    def order(pool_size: int) -> np.ndarray:
        if pool_size == n:
            return rng.permutation(pool_size)
        return rng.integers(0, pool_size, size=n)

    order_i = order(len(internal_features))
    order_e = order(len(external_features))
    for start in range(0, n, batch_size):
        stop = start + batch_size
        yield internal_features[order_i[start:stop]], external_features[order_e[start:stop]]


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: tuple[str, ...]
    label_column: str
    domain_column: str


def default_schema(feature_dim: int) -> CsvSchema:
    return CsvSchema(
        tuple(f"feature_{i}" for i in range(feature_dim)), "label", "domain"
    )


def write_domain_csv(dataset: DomainDataset, path: str | Path) -> None:
    """Write one domain (train rows then test rows) with the default schema."""
    d = dataset.train.features.shape[1]
    schema = default_schema(d)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(schema.feature_columns) + [schema.label_column, schema.domain_column])
        for part in (dataset.train, dataset.test):
            for i in range(len(part)):
                row = [repr(float(v)) for v in part.features[i]]
                writer.writerow(row + [int(part.labels[i]), int(part.domains[i])])


def load_csv_dataset(path: str | Path, schema: CsvSchema) -> list[DomainDataset]:
    """Load labeled tabular data, one DomainDataset per distinct domain value.

    Rows keep file order inside each domain and are split 80/20 in that
    order. Parse failures report the 1-based row number.
    """
    path = Path(path)
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: file is empty") from None
        columns = {name: i for i, name in enumerate(header)}
        needed = list(schema.feature_columns) + [schema.label_column, schema.domain_column]
        for name in needed:
            if name not in columns:
                raise FormatError(f"{path}: missing column {name!r}")
        feat_idx = [columns[c] for c in schema.feature_columns]
        label_idx = columns[schema.label_column]
        domain_idx = columns[schema.domain_column]

        feats, labels, domains = [], [], []
        for rownum, row in enumerate(reader, start=2):
            if len(row) < len(header):
                raise FormatError(f"{path}: row {rownum}: expected {len(header)} fields")
            try:
                feats.append([float(row[i]) for i in feat_idx])
                labels.append(int(row[label_idx]))
                domains.append(int(row[domain_idx]))
            except ValueError as exc:
                raise FormatError(f"{path}: row {rownum}: {exc}") from None
    if not feats:
        raise FormatError(f"{path}: no data rows")

    features = np.asarray(feats, dtype=float)
    labels_arr = np.asarray(labels, dtype=int)
    domains_arr = np.asarray(domains, dtype=int)
    out = []
    for m in sorted(set(domains)):
        idx = np.flatnonzero(domains_arr == m)
        n_train = _split_counts(len(idx))
        make = lambda rows: LabeledSet(features[rows], labels_arr[rows], domains_arr[rows])
        out.append(DomainDataset(int(m), make(idx[:n_train]), make(idx[n_train:])))
    return out
