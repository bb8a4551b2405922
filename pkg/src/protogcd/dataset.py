"""Embedding datasets: the partially-labeled container, synthetic vMF-mixture
generation, embedding-space view augmentation, and the on-disk formats.

On-disk layout (see README for byte-level details):
  features file  -- magic b"PGCD", u16 version, u32 n, u32 d, then n*d
                    little-endian float32, row-major.
  manifest       -- JSON with keys features_path, true_labels,
                    labeled_indices, old_classes, num_classes, seed.

Ground-truth labels of unlabeled samples exist for evaluation only.  They
are reachable solely through :meth:`EmbeddingDataset.eval_labels`, which
counts its reads so tests can assert that training never touches them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import InitVar, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, IntegrityError
from .sphere import VmfComponent, normalize_rows, sample_vmf_batch

MAGIC = b"PGCD"
FORMAT_VERSION = 1
FEATURE_NORM_TOL = 1e-6

UNLABELED = -1


@dataclass
class EmbeddingDataset:
    """n unit feature vectors with ground-truth labels, a labeled mask, and
    the set of old (labeled) class ids.

    features are stored float32 so that save/load round-trips are bit-exact
    against the 32-bit on-disk format; all computation upcasts to float64.
    """

    features: np.ndarray
    true_labels: InitVar[np.ndarray]
    labeled_mask: np.ndarray
    old_classes: frozenset
    num_classes: int = 0
    seed: int = 0
    eval_label_reads: int = field(default=0, repr=False)

    def __post_init__(self, true_labels):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.asarray(true_labels, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        self.old_classes = frozenset(int(c) for c in self.old_classes)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise IntegrityError("features must be a nonempty n x d matrix")
        n = self.features.shape[0]
        if labels.shape != (n,) or self.labeled_mask.shape != (n,):
            raise IntegrityError("labels and mask must have one entry per sample")
        if np.any(labels < 0):
            raise IntegrityError("class ids must be nonnegative")
        if self.num_classes <= 0:
            self.num_classes = int(labels.max()) + 1
        if int(labels.max()) >= self.num_classes:
            raise IntegrityError("a sample references a class id >= num_classes")
        if any(c < 0 or c >= self.num_classes for c in self.old_classes):
            raise IntegrityError("old_classes contains an id outside [0, num_classes)")
        labeled_labels = labels[self.labeled_mask]
        if labeled_labels.size and not set(np.unique(labeled_labels)) <= self.old_classes:
            raise IntegrityError("labeled sample from a non-old class")
        norms = np.linalg.norm(self.features.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > FEATURE_NORM_TOL):
            raise IntegrityError(
                f"feature rows must be unit-norm within {FEATURE_NORM_TOL}"
            )
        self._labels = labels

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_labeled(self) -> int:
        return int(np.count_nonzero(self.labeled_mask))

    def features64(self) -> np.ndarray:
        return self.features.astype(np.float64)

    def training_labels(self) -> np.ndarray:
        """Labels visible to training: ground truth where labeled, -1 elsewhere."""
        out = np.full(len(self), UNLABELED, dtype=np.int64)
        out[self.labeled_mask] = self._labels[self.labeled_mask]
        return out

    def eval_labels(self) -> np.ndarray:
        """Full ground-truth labels, for evaluation only.

        Every call increments ``eval_label_reads`` (the tripwire counter);
        training code must never call this.
        """
        self.eval_label_reads += 1
        return self._labels.copy()

    def _raw_labels(self) -> np.ndarray:
        """Serialization-only access; does not trip the read counter."""
        return self._labels

    def equals(self, other: "EmbeddingDataset") -> bool:
        return (
            np.array_equal(self.features, other.features)
            and np.array_equal(self._labels, other._labels)
            and np.array_equal(self.labeled_mask, other.labeled_mask)
            and self.old_classes == other.old_classes
            and self.num_classes == other.num_classes
            and self.seed == other.seed
        )


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the synthetic vMF-mixture generator."""

    total_classes: int
    old_class_count: int
    dimension: int
    samples_per_class: object  # int or sequence of ints, one per class
    concentration: float
    labeled_fraction: float = 0.5
    min_prototype_angle: float = np.deg2rad(25.0)
    seed: int = 0

    def __post_init__(self):
        if self.total_classes < 1 or self.dimension < 2:
            raise ConfigError("need at least one class and dimension >= 2")
        if not (0 <= self.old_class_count <= self.total_classes):
            raise ConfigError("old_class_count must lie in [0, total_classes]")
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ConfigError("labeled_fraction must lie in (0, 1]")
        if self.concentration <= 0:
            raise ConfigError("concentration must be positive")
        counts = self.class_counts()
        if np.any(counts < 1):
            raise ConfigError("every class needs at least one sample")

    def class_counts(self) -> np.ndarray:
        if np.isscalar(self.samples_per_class):
            return np.full(self.total_classes, int(self.samples_per_class), dtype=np.int64)
        counts = np.asarray(self.samples_per_class, dtype=np.int64)
        if counts.shape != (self.total_classes,):
            raise ConfigError("samples_per_class must be a scalar or one count per class")
        return counts


def _place_prototypes(rng: np.random.Generator, k: int, dim: int, min_angle: float,
                      avoid: np.ndarray | None = None,
                      max_attempts_per_proto: int = 10_000) -> np.ndarray:
    """Sample k unit directions with pairwise angle >= min_angle, also kept
    min_angle away from the rows of ``avoid`` when given."""
    cos_cap = np.cos(min_angle)
    existing = (np.zeros((0, dim)) if avoid is None
                else np.asarray(avoid, dtype=np.float64))
    placed: list[np.ndarray] = []
    for _ in range(k):
        for _ in range(max_attempts_per_proto):
            cand = rng.standard_normal(dim)
            cand /= np.linalg.norm(cand)
            if existing.shape[0] and float(np.max(existing @ cand)) > cos_cap:
                continue
            placed.append(cand)
            existing = np.vstack([existing, cand[None, :]])
            break
        else:
            raise ConfigError(
                f"could not place {k} prototypes with pairwise angle >= "
                f"{np.rad2deg(min_angle):.1f} deg in dimension {dim}"
            )
    return np.vstack(placed)


def generate_synthetic(cfg: SyntheticConfig) -> tuple[EmbeddingDataset, np.ndarray]:
    """Generate a GCD dataset from a vMF mixture.

    Returns the dataset and the true prototype directions (K x d, float64).
    Samples are laid out class-by-class; the labeled subset of each old
    class is chosen by a seeded shuffle.
    """
    rng = np.random.default_rng(cfg.seed)
    protos = _place_prototypes(rng, cfg.total_classes, cfg.dimension,
                               cfg.min_prototype_angle)
    counts = cfg.class_counts()
    feats = []
    labels = []
    for k in range(cfg.total_classes):
        comp = VmfComponent(protos[k], cfg.concentration)
        feats.append(sample_vmf_batch(rng, comp, int(counts[k])))
        labels.append(np.full(int(counts[k]), k, dtype=np.int64))
    features = np.vstack(feats).astype(np.float32)
    true_labels = np.concatenate(labels)

    mask = np.zeros(features.shape[0], dtype=bool)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for k in range(cfg.old_class_count):
        idx = np.arange(offsets[k], offsets[k + 1])
        rng.shuffle(idx)
        n_lab = int(np.floor(counts[k] * cfg.labeled_fraction))
        mask[idx[:n_lab]] = True

    ds = EmbeddingDataset(
        features=features,
        true_labels=true_labels,
        labeled_mask=mask,
        old_classes=frozenset(range(cfg.old_class_count)),
        num_classes=cfg.total_classes,
        seed=cfg.seed,
    )
    return ds, protos


def generate_ood(prototypes: np.ndarray, n_components: int, n_samples: int,
                 concentration: float, min_angle: float = np.deg2rad(25.0),
                 seed: int = 0) -> EmbeddingDataset:
    """Sample an outlier set from vMF components at held-out directions.

    The held-out directions keep ``min_angle`` separation from the given
    in-distribution prototypes and from each other.  Labels are component
    indices; the set carries no labeled samples and no old classes.
    """
    rng = np.random.default_rng(seed)
    protos = np.asarray(prototypes, dtype=np.float64)
    held_out = _place_prototypes(rng, n_components, protos.shape[1], min_angle,
                                 avoid=protos)
    per = np.full(n_components, n_samples // n_components, dtype=np.int64)
    per[: n_samples % n_components] += 1
    feats = []
    labels = []
    for k in range(n_components):
        comp = VmfComponent(held_out[k], concentration)
        feats.append(sample_vmf_batch(rng, comp, int(per[k])))
        labels.append(np.full(int(per[k]), k, dtype=np.int64))
    return EmbeddingDataset(
        features=np.vstack(feats).astype(np.float32),
        true_labels=np.concatenate(labels),
        labeled_mask=np.zeros(n_samples, dtype=bool),
        old_classes=frozenset(),
        num_classes=n_components,
        seed=seed,
    )


def split_gcd(dataset: EmbeddingDataset) -> tuple[np.ndarray, np.ndarray]:
    """Partition indices into (labeled, unlabeled).

    The unlabeled side holds the old-class remainder plus every new-class
    sample.  Raises IntegrityError if a labeled sample is from a non-old
    class (re-checked here because datasets can be built from files).
    """
    labels = dataset.training_labels()
    labeled = np.flatnonzero(dataset.labeled_mask)
    if labeled.size and not set(np.unique(labels[labeled])) <= dataset.old_classes:
        raise IntegrityError("labeled sample from a non-old class")
    unlabeled = np.flatnonzero(~dataset.labeled_mask)
    return labeled, unlabeled


@dataclass(frozen=True)
class ViewPair:
    """Two embedding-space views of one sample, both unit-norm."""

    view_a: np.ndarray
    view_b: np.ndarray
    noise_sigma: float


def make_views(x: np.ndarray, sigma: float, rng: np.random.Generator) -> ViewPair:
    """Perturb a unit vector with isotropic Gaussian noise and renormalize.

    sigma = 0 returns two exact copies of x (no rng draw).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0.0:
        return ViewPair(x.copy(), x.copy(), 0.0)
    eps = rng.standard_normal((2, x.shape[0])) * sigma
    va = x + eps[0]
    vb = x + eps[1]
    va /= np.linalg.norm(va)
    vb /= np.linalg.norm(vb)
    return ViewPair(va, vb, sigma)


def make_view_arrays(features: np.ndarray, sigma: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`make_views` over all rows; returns (Va, Vb)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x = np.asarray(features, dtype=np.float64)
    if sigma == 0.0:
        return x.copy(), x.copy()
    eps = rng.standard_normal((2,) + x.shape) * sigma
    return normalize_rows(x + eps[0]), normalize_rows(x + eps[1])


def write_embeddings(path: Path, features: np.ndarray) -> None:
    """Write a feature matrix in the binary container format."""
    feats = np.ascontiguousarray(features, dtype="<f4")
    n, d = feats.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HII", FORMAT_VERSION, n, d))
        f.write(feats.tobytes())


def read_embeddings(path: Path) -> np.ndarray:
    """Read a feature matrix, validating magic, version, size, and norms."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise DataFormatError(
            f"bad magic {data[:4]!r} in {path}; expected {MAGIC!r}"
        )
    if len(data) < 14:
        raise DataFormatError(f"truncated header in {path}")
    version, n, d = struct.unpack("<HII", data[4:14])
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported format version {version} in {path}; expected {FORMAT_VERSION}"
        )
    expected = 14 + 4 * n * d
    if len(data) < expected:
        raise DataFormatError(
            f"truncated payload in {path}: header declares {n}x{d} floats "
            f"({expected} bytes), file has {len(data)}"
        )
    feats = np.frombuffer(data[14:expected], dtype="<f4").reshape(n, d)
    norms = np.linalg.norm(feats.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > FEATURE_NORM_TOL):
        raise IntegrityError(f"non-unit feature row in {path}")
    return feats.copy()


def _manifest_path(path: Path) -> Path:
    path = Path(path)
    if path.suffix == ".json":
        return path
    return path / "manifest.json"


def save_dataset(dataset: EmbeddingDataset, path: Path) -> Path:
    """Save a dataset under ``path`` (a directory): features.pgcd + manifest.json.

    Returns the manifest path.  Round-trips are bit-exact.
    """
    directory = Path(path)
    if directory.suffix == ".json":
        directory = directory.parent
    directory.mkdir(parents=True, exist_ok=True)
    features_name = "features.pgcd"
    write_embeddings(directory / features_name, dataset.features)
    manifest = {
        "features_path": features_name,
        "true_labels": [int(v) for v in dataset._raw_labels()],
        "labeled_indices": [int(v) for v in np.flatnonzero(dataset.labeled_mask)],
        "old_classes": sorted(int(c) for c in dataset.old_classes),
        "num_classes": int(dataset.num_classes),
        "seed": int(dataset.seed),
    }
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return mpath


def load_dataset(path: Path) -> EmbeddingDataset:
    """Load a dataset from a directory or manifest path."""
    mpath = _manifest_path(Path(path))
    if not mpath.exists():
        raise DataFormatError(f"no dataset manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    try:
        features = read_embeddings(mpath.parent / manifest["features_path"])
        labels = np.asarray(manifest["true_labels"], dtype=np.int64)
        mask = np.zeros(features.shape[0], dtype=bool)
        mask[np.asarray(manifest["labeled_indices"], dtype=np.int64)] = True
        return EmbeddingDataset(
            features=features,
            true_labels=labels,
            labeled_mask=mask,
            old_classes=frozenset(manifest["old_classes"]),
            num_classes=int(manifest.get("num_classes", 0)),
            seed=int(manifest.get("seed", 0)),
        )
    except KeyError as exc:
        raise DataFormatError(f"manifest {mpath} is missing field {exc}") from exc
