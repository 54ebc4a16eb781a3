"""Synthetic two-domain dataset generation, k-shot splitting, and sampling.

The source domain is a set of Gaussian class clusters; the target domain is
the same clusters pushed through a fixed rotation + translation with scaled
covariance, so the two domains share label structure but not geometry.
Designated "similar pairs" of classes are moved closer together to create
the intrinsic class ambiguity that biases pseudo-labels.

File format: one CSV per split with header ``domain,split,label,f0..f{d-1}``
where the label column is empty for unlabeled rows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 8
    input_dim: int = 16
    source_per_class: int = 100
    target_per_class: int = 300
    val_per_class: int = 20
    test_per_class: int = 50
    shots: int = 3
    rotation_deg: float = 30.0
    translation: float | tuple = 1.5
    cov_scale: float = 1.0
    class_overlap: float = 0.7
    similar_pairs: int = 2
    cluster_std: float = 1.0
    mean_scale: float = 1.05
    seed: int = 7

    def __post_init__(self):
        if self.classes < 2 or self.input_dim < 1:
            raise InvalidConfigError("need classes >= 2 and input_dim >= 1")
        for name in ("source_per_class", "target_per_class", "val_per_class",
                     "test_per_class"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if self.shots < 1:
            raise InvalidConfigError("shots must be >= 1")
        if self.shots > self.target_per_class:
            raise InvalidConfigError("shots cannot exceed target_per_class")
        if not 0 <= 2 * self.similar_pairs <= self.classes:
            raise InvalidConfigError("similar_pairs must fit into the classes")
        if self.class_overlap <= 0:
            raise InvalidConfigError("class_overlap must be > 0")
        if self.cov_scale <= 0 or self.cluster_std <= 0:
            raise InvalidConfigError("scales must be > 0")
        t = np.asarray(self.translation, dtype=np.float64)
        if not np.all(np.isfinite(t)):
            raise InvalidConfigError("translation must be finite")
        if t.ndim not in (0, 1) or (t.ndim == 1 and t.size != self.input_dim):
            raise InvalidConfigError(
                "translation must be a scalar or a vector of length input_dim")

    def translation_vector(self) -> np.ndarray:
        t = np.asarray(self.translation, dtype=np.float64)
        if t.ndim == 0:
            return np.full(self.input_dim, float(t))
        return t


@dataclass
class LabeledArrays:
    x: np.ndarray   # (n, d)
    y: np.ndarray   # (n,) int64

    def __len__(self):
        return self.x.shape[0]


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    class_means_source: np.ndarray       # (C, d) post-overlap means
    source_train: LabeledArrays
    target_train: LabeledArrays          # full truth; consumed by kshot_split
    target_val: LabeledArrays
    target_test: LabeledArrays


def rotation_matrix(dim: int, angle_deg: float) -> np.ndarray:
    """Rotation by ``angle_deg`` in every consecutive coordinate plane
    (0,1), (2,3), ...; an odd trailing dimension stays fixed."""
    theta = np.deg2rad(angle_deg)
    r = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for i in range(0, dim - 1, 2):
        r[i, i] = c
        r[i, i + 1] = -s
        r[i + 1, i] = s
        r[i + 1, i + 1] = c
    return r


def _class_means(rng, classes: int, dim: int, scale: float) -> np.ndarray:
    """Equidistant class means: random orthonormal directions scaled so the
    per-coordinate RMS is ``scale`` (norm = scale * sqrt(dim)).

    Orthogonal placement keeps every inter-class distance identical, so task
    difficulty is controlled by the spec instead of the luck of the draw.
    Requires classes <= dim.
    """
    if classes > dim:
        raise InvalidConfigError(
            "equidistant mean placement needs input_dim >= classes")
    gauss = rng.standard_normal((dim, classes))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity
    return scale * np.sqrt(dim) * q.T


def generate(spec: DatasetSpec) -> SyntheticDataset:
    """Draw the full two-domain dataset deterministically from the spec.

    Draw order (fixed for reproducibility): class means, then source train,
    target train, target val, target test, each class-by-class.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    means = _class_means(rng, spec.classes, d, spec.mean_scale)
    # Pull designated pairs (0,1), (2,3), ... together to create ambiguity.
    for pair in range(spec.similar_pairs):
        a, b = 2 * pair, 2 * pair + 1
        means[b] = means[a] + spec.class_overlap * (means[b] - means[a])

    rot = rotation_matrix(d, spec.rotation_deg)
    shift = spec.translation_vector()

    def draw_source(per_class):
        xs, ys = [], []
        for c in range(spec.classes):
            noise = rng.standard_normal((per_class, d))
            xs.append(means[c] + spec.cluster_std * noise)
            ys.append(np.full(per_class, c, dtype=np.int64))
        return LabeledArrays(np.concatenate(xs), np.concatenate(ys))

    def draw_target(per_class):
        xs, ys = [], []
        for c in range(spec.classes):
            noise = rng.standard_normal((per_class, d))
            base = means[c] + spec.cov_scale * spec.cluster_std * noise
            xs.append(base @ rot.T + shift)
            ys.append(np.full(per_class, c, dtype=np.int64))
        return LabeledArrays(np.concatenate(xs), np.concatenate(ys))

    return SyntheticDataset(
        spec=spec,
        class_means_source=means,
        source_train=draw_source(spec.source_per_class),
        target_train=draw_target(spec.target_per_class),
        target_val=draw_target(spec.val_per_class),
        target_test=draw_target(spec.test_per_class),
    )


@dataclass
class KShotSplit:
    labeled: LabeledArrays
    unlabeled_x: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray


def kshot_split(target_train: LabeledArrays, shots: int, seed: int) -> KShotSplit:
    """Pick exactly ``shots`` labeled samples per class; the rest lose their
    labels. Deterministic given the seed; the two index sets partition the
    target train set."""
    rng = np.random.default_rng(seed)
    labeled = []
    for c in np.unique(target_train.y):
        members = np.flatnonzero(target_train.y == c)
        if members.size < shots:
            raise InvalidConfigError(
                f"class {c} has {members.size} target samples, need {shots}")
        labeled.append(rng.choice(members, size=shots, replace=False))
    labeled_idx = np.sort(np.concatenate(labeled))
    mask = np.ones(len(target_train), dtype=bool)
    mask[labeled_idx] = False
    unlabeled_idx = np.flatnonzero(mask)
    return KShotSplit(
        labeled=LabeledArrays(target_train.x[labeled_idx],
                              target_train.y[labeled_idx]),
        unlabeled_x=target_train.x[unlabeled_idx],
        labeled_idx=labeled_idx,
        unlabeled_idx=unlabeled_idx,
    )


class _EpochCycler:
    """Reshuffled pass over [0, n); batches may straddle epoch boundaries."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise InvalidConfigError("cannot sample from an empty set")
        self.n = n
        self.rng = rng
        self.perm = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            remaining = self.n - self.pos
            grab = min(count, remaining)
            out.append(self.perm[self.pos:self.pos + grab])
            self.pos += grab
            count -= grab
            if self.pos == self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
        return np.concatenate(out)


def equal_sampler(n_source: int, n_labeled: int, n_unlabeled: int,
                  batch_size: int, rng: np.random.Generator):
    """Infinite stream of (source, target-labeled, target-unlabeled) index
    triples, ``batch_size`` from each set per step, each set cycling with
    per-epoch reshuffles."""
    if batch_size < 1:
        raise InvalidConfigError("batch_size must be >= 1")
    cyclers = (_EpochCycler(n_source, rng), _EpochCycler(n_labeled, rng),
               _EpochCycler(n_unlabeled, rng))
    while True:
        yield tuple(c.take(batch_size) for c in cyclers)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

SPLIT_FILES = ("source_train.csv", "target_train.csv", "target_val.csv",
               "target_test.csv")


def _write_rows(path: Path, domain: str, split: str, x: np.ndarray,
                labels) -> None:
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["domain", "split", "label"] +
                        [f"f{i}" for i in range(d)])
        for i in range(x.shape[0]):
            label = labels[i]
            writer.writerow([domain, split,
                             "" if label is None else str(int(label))] +
                            [repr(float(v)) for v in x[i]])


def write_dataset_csvs(dataset: SyntheticDataset, split: KShotSplit,
                       out_dir) -> list[Path]:
    """Write the four split files; target_train keeps its original row order
    with labels blanked outside the k-shot subset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tt = dataset.target_train
    shown = np.full(len(tt), None, dtype=object)
    shown[split.labeled_idx] = tt.y[split.labeled_idx]

    paths = [out / name for name in SPLIT_FILES]
    _write_rows(paths[0], "source", "train", dataset.source_train.x,
                list(dataset.source_train.y))
    _write_rows(paths[1], "target", "train", tt.x, list(shown))
    _write_rows(paths[2], "target", "val", dataset.target_val.x,
                list(dataset.target_val.y))
    _write_rows(paths[3], "target", "test", dataset.target_test.x,
                list(dataset.target_test.y))
    return paths


def load_split_csv(path):
    """Read one split file back as (x, y) with -1 marking unlabeled rows."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["domain", "split", "label"]:
            raise InvalidInputError(f"{path}: unrecognized dataset header")
        xs, ys = [], []
        for row in reader:
            ys.append(int(row[2]) if row[2] != "" else -1)
            xs.append([float(v) for v in row[3:]])
    if not xs:
        raise InvalidInputError(f"{path}: no data rows")
    return np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.int64)


@dataclass
class TrainingData:
    """All arrays the trainer consumes. Unlabeled target rows carry no label."""

    source: LabeledArrays
    target_labeled: LabeledArrays
    target_unlabeled_x: np.ndarray
    val: LabeledArrays
    test: LabeledArrays

    @property
    def input_dim(self) -> int:
        return self.source.x.shape[1]

    @property
    def classes(self) -> int:
        return int(self.source.y.max()) + 1


def load_dataset_dir(data_dir) -> TrainingData:
    data_dir = Path(data_dir)
    for name in SPLIT_FILES:
        if not (data_dir / name).exists():
            raise InvalidInputError(f"missing dataset file {data_dir / name}")
    sx, sy = load_split_csv(data_dir / "source_train.csv")
    tx, ty = load_split_csv(data_dir / "target_train.csv")
    vx, vy = load_split_csv(data_dir / "target_val.csv")
    ex, ey = load_split_csv(data_dir / "target_test.csv")
    labeled = ty >= 0
    return TrainingData(
        source=LabeledArrays(sx, sy),
        target_labeled=LabeledArrays(tx[labeled], ty[labeled]),
        target_unlabeled_x=tx[~labeled],
        val=LabeledArrays(vx, vy),
        test=LabeledArrays(ex, ey),
    )


def training_data_from_dataset(dataset: SyntheticDataset,
                               split: KShotSplit) -> TrainingData:
    """In-memory equivalent of writing the CSVs and loading them back."""
    return TrainingData(
        source=dataset.source_train,
        target_labeled=split.labeled,
        target_unlabeled_x=split.unlabeled_x,
        val=dataset.target_val,
        test=dataset.target_test,
    )
