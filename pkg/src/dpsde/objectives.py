"""Loss functions with full-gradient and per-example-gradient access.

Three families: diagonal quadratics f(x) = 1/2 sum_i lam_i x_i^2, diagonal
quartics f(x) = 1/2 sum H_ii x_i^2 + lam/4 sum x_i^4 - xi/3 sum x_i^3, and
binary logistic regression over an explicit dataset.  Quadratic/quartic
per-example gradients are synthesized as grad(x) + Z with Z drawn from a
:class:`~dpsde.noise.NoiseSpec`; logistic per-example gradients are exact.

All value/gradient evaluations broadcast over leading axes of ``x`` and are
pure functions of their inputs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .noise import NoiseSpec, sample_per_example_noise

__all__ = [
    "Quadratic",
    "Quartic",
    "LogisticObjective",
    "value",
    "gradient",
    "per_example_gradient",
    "make_synthetic_logistic",
    "save_dataset_csv",
    "load_dataset_csv",
    "load_libsvm",
]


def _check_dim(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"expected last-axis dimension {d}, got {x.shape[-1]}")
    return x


@dataclass(frozen=True)
class Quadratic:
    """f(x) = 1/2 x^T H x with H = diag(eigenvalues), all eigenvalues >= 0."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("eigenvalues must be a 1-D vector")
        if np.any(lam < 0):
            raise ValueError("eigenvalues must be nonnegative")
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def dim(self) -> int:
        return self.eigenvalues.size

    @property
    def smoothness(self) -> float:
        return float(self.eigenvalues.max())

    @property
    def pl_constant(self) -> float:
        """min eigenvalue when positive definite, else 0 (unknown/not PL)."""
        m = float(self.eigenvalues.min())
        return m if m > 0 else 0.0

    def value(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return 0.5 * np.sum(self.eigenvalues * x * x, axis=-1)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return self.eigenvalues * x

    @staticmethod
    def isotropic(lam: float, d: int) -> "Quadratic":
        return Quadratic(np.full(d, float(lam)))


@dataclass(frozen=True)
class Quartic:
    """f(x) = 1/2 sum H_ii x_i^2 + lam/4 sum x_i^4 - xi/3 sum x_i^3.

    H may carry negative entries (non-convex landscape); smoothness is only
    local, so no global L / PL constant is exposed.
    """

    h_diag: np.ndarray
    lam: float
    xi: float

    def __post_init__(self):
        h = np.atleast_1d(np.asarray(self.h_diag, dtype=float))
        if h.ndim != 1 or h.size < 1:
            raise ValueError("h_diag must be a 1-D vector")
        object.__setattr__(self, "h_diag", h)

    @property
    def dim(self) -> int:
        return self.h_diag.size

    def value(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return (
            0.5 * np.sum(self.h_diag * x * x, axis=-1)
            + (self.lam / 4.0) * np.sum(x**4, axis=-1)
            - (self.xi / 3.0) * np.sum(x**3, axis=-1)
        )

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return self.h_diag * x + self.lam * x**3 - self.xi * x**2


@dataclass(frozen=True)
class LogisticObjective:
    """Mean binary cross-entropy over (features, labels), labels in {0,1}.

    Uses the log-sum-exp form log(1 + e^z) - y z, stable for any margin.
    """

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.atleast_2d(np.asarray(self.features, dtype=float))
        labels = np.atleast_1d(np.asarray(self.labels, dtype=float))
        if feats.shape[0] != labels.shape[0]:
            raise ValueError("features and labels disagree on n")
        if feats.shape[0] < 1:
            raise ValueError("need n >= 1 examples")
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise ValueError("labels must be in {0, 1}")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def smoothness(self) -> float:
        # Hessian is (1/n) X^T diag(p(1-p)) X with p(1-p) <= 1/4.
        gram = self.features.T @ self.features / (4.0 * self.n)
        return float(np.linalg.eigvalsh(gram).max())

    def margins(self, x: np.ndarray) -> np.ndarray:
        x = _check_dim(x, self.dim)
        return x @ self.features.T

    def value(self, x: np.ndarray) -> np.ndarray:
        z = self.margins(x)
        return np.mean(np.logaddexp(0.0, z) - self.labels * z, axis=-1)

    def _residuals(self, x: np.ndarray) -> np.ndarray:
        # sigmoid(z) - y, computed from the stable margin form
        z = self.margins(x)
        return expit(z) - self.labels

    def per_example_gradients(self, x: np.ndarray) -> np.ndarray:
        """All n per-example gradients at x, shape (..., n, d)."""
        r = self._residuals(x)
        return r[..., :, None] * self.features

    def gradient(self, x: np.ndarray) -> np.ndarray:
        # mean over the same per-example stack so that averaging the
        # per-example gradients reproduces this exactly, bit for bit
        return self.per_example_gradients(x).mean(axis=-2)


def value(obj, x: np.ndarray):
    """Loss value; rejects dimension mismatch."""
    return obj.value(x)


def gradient(obj, x: np.ndarray) -> np.ndarray:
    """Exact analytic gradient of ``value``."""
    return obj.gradient(x)


def per_example_gradient(
    obj,
    x: np.ndarray,
    index: int,
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Gradient of one example.

    Logistic objectives index a dataset row (0 <= index < n, rng unused).
    Quadratic/quartic objectives synthesize gradient(x) + Z with Z drawn from
    ``noise``; ``index`` only labels the draw.
    """
    if isinstance(obj, LogisticObjective):
        if not 0 <= index < obj.n:
            raise IndexError(f"example index {index} out of range [0, {obj.n})")
        return obj.per_example_gradients(x)[..., index, :]
    if noise is None:
        raise ValueError("synthetic per-example gradients need a NoiseSpec")
    g = obj.gradient(x)
    if noise.sigma_gamma == 0.0:
        return g
    if rng is None:
        raise ValueError("synthetic per-example gradients need an explicit rng")
    return g + sample_per_example_noise(noise, obj.dim, rng)


def make_synthetic_logistic(
    n: int, d: int, separation: float, seed: int
) -> LogisticObjective:
    """Two Gaussian blobs with class means +-(separation/2) e_1; deterministic per seed."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 2).astype(float)
    feats = rng.standard_normal((n, d))
    feats[:, 0] += (labels - 0.5) * separation
    return LogisticObjective(feats, labels)


def save_dataset_csv(obj: LogisticObjective, path) -> None:
    """Write `label,f1,...,fd` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i + 1}" for i in range(obj.dim)])
        for y, row in zip(obj.labels, obj.features):
            writer.writerow([int(y)] + [repr(float(v)) for v in row])


def load_dataset_csv(path) -> LogisticObjective:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"{path}: expected header starting with 'label'")
        labels, rows = [], []
        for rec in reader:
            labels.append(float(rec[0]))
            rows.append([float(v) for v in rec[1:]])
    return LogisticObjective(np.array(rows), np.array(labels))


def load_libsvm(path, max_feature_index: int) -> LogisticObjective:
    """Parse whitespace-separated `label idx:val ...` records.

    Indices are 1-based; features beyond ``max_feature_index`` are dropped.
    Labels may be {0,1} or {-1,+1}; -1 maps to 0.
    """
    if max_feature_index < 1:
        raise ValueError("max_feature_index must be >= 1")
    labels, rows = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            y = float(parts[0])
            labels.append(0.0 if y <= 0 else 1.0)
            row = np.zeros(max_feature_index)
            for tok in parts[1:]:
                idx, val = tok.split(":")
                j = int(idx)
                if 1 <= j <= max_feature_index:
                    row[j - 1] = float(val)
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no records")
    return LogisticObjective(np.array(rows), np.array(labels))
