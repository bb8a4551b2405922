"""Learnable parameters (adapter, prototypes, projection head) and the
forward computations producing features, projections, logits, and posteriors.

The adapter is a linear map applied to the fixed input embeddings, standing
in for a fine-tuned backbone; features and projections are renormalized to
the unit sphere after every linear map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .sphere import normalize, normalize_rows, tempered_softmax

CHECKPOINT_MAGIC = b"PGCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """adapter (d_in x d), prototypes (K x d, unit rows), projection (d x d_h).

    All arrays are float64.  Prototype rows are unit-norm; the optimizer
    re-projects them after every step.
    """

    adapter: np.ndarray
    prototypes: np.ndarray
    projection: np.ndarray

    def __post_init__(self):
        self.adapter = np.asarray(self.adapter, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.adapter.ndim != 2 or self.prototypes.ndim != 2 or self.projection.ndim != 2:
            raise ValueError("all parameter arrays must be matrices")
        if self.adapter.shape[1] != self.prototypes.shape[1]:
            raise ValueError("prototype dimension must match adapter output dimension")
        if self.projection.shape[0] != self.adapter.shape[1]:
            raise ValueError("projection input dimension must match feature dimension")

    @property
    def d_in(self) -> int:
        return self.adapter.shape[0]

    @property
    def d(self) -> int:
        return self.adapter.shape[1]

    @property
    def d_h(self) -> int:
        return self.projection.shape[1]

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"adapter": self.adapter, "prototypes": self.prototypes,
                "projection": self.projection}

    def copy(self) -> "ModelParams":
        return ModelParams(self.adapter.copy(), self.prototypes.copy(),
                           self.projection.copy())

    def zeros_like(self) -> "ModelParams":
        return ModelParams(np.zeros_like(self.adapter),
                           np.zeros_like(self.prototypes),
                           np.zeros_like(self.projection))

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return (np.allclose(self.adapter, other.adapter, rtol=0, atol=atol)
                and np.allclose(self.prototypes, other.prototypes, rtol=0, atol=atol)
                and np.allclose(self.projection, other.projection, rtol=0, atol=atol))


@dataclass(frozen=True)
class ForwardOutputs:
    """Single-sample forward pass: unit feature, unit projection, cosine
    logits against all prototypes, and the softmax posterior."""

    feature: np.ndarray
    projection: np.ndarray
    logits: np.ndarray
    posterior: np.ndarray


def init_params(d_in: int, d: int, d_h: int, n_classes: int,
                strategy: str = "identity",
                rng: np.random.Generator | None = None) -> ModelParams:
    """Initialize parameters.

    strategy "identity" (requires d_in == d) starts the adapter at the
    identity; "random" uses a scaled Gaussian.  Prototypes are uniform on
    the sphere; projection rows have O(1) norm.
    """
    if min(d_in, d, d_h, n_classes) < 1:
        raise ConfigError("all dimensions and the class count must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    if strategy == "identity":
        if d_in != d:
            raise ConfigError(
                f"identity adapter needs d_in == d, got {d_in} != {d}")
        adapter = np.eye(d_in, dtype=np.float64)
    elif strategy == "random":
        adapter = rng.standard_normal((d_in, d)) / np.sqrt(d_in)
    else:
        raise ConfigError(f"unknown init strategy {strategy!r}")
    prototypes = normalize_rows(rng.standard_normal((n_classes, d)))
    projection = rng.standard_normal((d, d_h)) / np.sqrt(d_h)
    return ModelParams(adapter, prototypes, projection)


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Adapted unit feature z = normalize(x @ adapter)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != adapter d_in {params.d_in}")
    return normalize(x @ params.adapter)


def embed_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_in:
        raise ValueError(f"input dimension {x.shape[-1]} != adapter d_in {params.d_in}")
    return normalize_rows(x @ params.adapter)


def forward(params: ModelParams, x: np.ndarray, tau_base: float) -> ForwardOutputs:
    """Full forward pass for one sample."""
    if tau_base <= 0:
        raise ValueError("tau_base must be positive")
    z = embed(params, x)
    h = normalize(z @ params.projection)
    logits = params.prototypes @ z
    posterior = tempered_softmax(logits, tau_base)
    return ForwardOutputs(feature=z, projection=h, logits=logits, posterior=posterior)


def logits_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Cosine logits (n x K) for raw inputs."""
    return embed_batch(params, x) @ params.prototypes.T


def predict_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """argmax class ids for raw inputs."""
    return np.argmax(logits_batch(params, x), axis=1)


def save_checkpoint(params: ModelParams, path: Path, k_old: int) -> None:
    """Write parameters in the binary container (header + 3 float32 matrices)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HIIIII", CHECKPOINT_VERSION, params.d_in, params.d,
                            params.d_h, params.n_classes, k_old))
        for arr in (params.adapter, params.prototypes, params.projection):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, meta) with meta holding the dims."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(
            f"bad magic {data[:4]!r} in {path}; expected {CHECKPOINT_MAGIC!r}")
    header_size = 4 + struct.calcsize("<HIIIII")
    if len(data) < header_size:
        raise DataFormatError(f"truncated header in {path}")
    version, d_in, d, d_h, k, k_old = struct.unpack("<HIIIII", data[4:header_size])
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(
            f"unsupported checkpoint version {version} in {path}")
    sizes = [d_in * d, k * d, d * d_h]
    expected = header_size + 4 * sum(sizes)
    if len(data) < expected:
        raise DataFormatError(
            f"truncated payload in {path}: expected {expected} bytes, got {len(data)}")
    offset = header_size
    mats = []
    for count, shape in zip(sizes, [(d_in, d), (k, d), (d, d_h)]):
        mats.append(np.frombuffer(data[offset:offset + 4 * count],
                                  dtype="<f4").reshape(shape).astype(np.float64))
        offset += 4 * count
    params = ModelParams(mats[0], normalize_rows(mats[1]), mats[2])
    meta = {"d_in": d_in, "d": d, "d_h": d_h, "n_classes": k, "k_old": k_old}
    return params, meta
