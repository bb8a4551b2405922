"""Hypersphere numerics: normalization, cosine similarity, tempered softmax,
entropy, and von Mises-Fisher sampling.

All functions work in float64 and are pure given an explicit random
generator, so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-9


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving direction.

    Raises ValueError for the zero vector (direction undefined).
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite vector")
    return v / n


def normalize_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise :func:`normalize`; raises if any row is zero."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("cannot normalize rows containing a zero or non-finite vector")
    return m / norms


def is_unit(v: np.ndarray, tol: float = UNIT_NORM_TOL) -> bool:
    return abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) <= tol


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Inner product of two unit vectors (cosine similarity).

    Inputs are assumed unit-norm; no renormalization is applied, so the
    result may exceed [-1, 1] by float rounding only.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def tempered_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / temperature) with max-subtraction for overflow safety.

    ``temperature`` must be positive; logits must contain at least one
    finite entry and no NaN/+inf.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = np.asarray(logits, dtype=np.float64)
    if np.any(np.isnan(a)) or np.any(a == np.inf) or not np.any(np.isfinite(a)):
        raise ValueError("logits must contain at least one finite entry and no NaN/+inf")
    a = a / temperature
    a = a - np.max(a)
    e = np.exp(a)
    return e / np.sum(e)


def tempered_softmax_rows(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise tempered softmax for a 2-D logit matrix."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    a = np.asarray(logits, dtype=np.float64) / temperature
    a = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(a)
    return e / np.sum(e, axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum p log p in nats, with 0 log 0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


@dataclass(frozen=True)
class VmfComponent:
    """A von Mises-Fisher component: unit mean direction and concentration.

    concentration = 0 is the uniform distribution on the sphere.
    """

    mean_direction: np.ndarray
    concentration: float

    def __post_init__(self):
        mu = np.asarray(self.mean_direction, dtype=np.float64)
        if mu.ndim != 1 or mu.shape[0] < 2:
            raise ValueError("mean direction must be a vector of dimension >= 2")
        if not is_unit(mu):
            raise ValueError("mean direction must be unit-norm")
        if self.concentration < 0:
            raise ValueError("concentration must be nonnegative")
        object.__setattr__(self, "mean_direction", mu)


def _sample_radial(rng: np.random.Generator, kappa: float, dim: int, size: int) -> np.ndarray:
    """Rejection-sample the radial coordinate w = mu.x of vMF (Wood's scheme)."""
    m = dim - 1
    b = m / (np.sqrt(4.0 * kappa * kappa + m * m) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log(1.0 - x0 * x0)

    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        z = rng.beta(m / 2.0, m / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=need)
        ok = kappa * w + m * np.log1p(-x0 * w) - c >= np.log(u)
        k = int(np.count_nonzero(ok))
        out[filled:filled + k] = w[ok]
        filled += k
    return out


def sample_vmf(rng: np.random.Generator, component: VmfComponent) -> np.ndarray:
    """Draw one unit vector from vMF(mean_direction, concentration)."""
    return sample_vmf_batch(rng, component, 1)[0]


def sample_vmf_batch(rng: np.random.Generator, component: VmfComponent, size: int) -> np.ndarray:
    """Draw ``size`` vMF samples as a (size, d) array of unit rows."""
    mu = component.mean_direction
    kappa = float(component.concentration)
    d = mu.shape[0]

    if kappa == 0.0:
        g = rng.standard_normal((size, d))
        return normalize_rows(g)

    w = _sample_radial(rng, kappa, d, size)
    # Tangent directions: Gaussian projected orthogonal to mu, renormalized.
    g = rng.standard_normal((size, d))
    g = g - np.outer(g @ mu, mu)
    norms = np.linalg.norm(g, axis=1)
    while np.any(norms < 1e-12):  # measure-zero degenerate draws
        bad = norms < 1e-12
        g[bad] = rng.standard_normal((int(np.count_nonzero(bad)), d))
        g[bad] -= np.outer(g[bad] @ mu, mu)
        norms = np.linalg.norm(g, axis=1)
    v = g / norms[:, None]
    return w[:, None] * mu[None, :] + np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None] * v
