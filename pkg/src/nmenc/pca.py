"""Per-modality principal-component reduction.

Fitting runs an SVD of the centered data matrix (never an explicit
covariance eigendecomposition, which is reserved for test oracles). A
deterministic sign convention makes fits bit-reproducible: each component
is flipped so that its largest-magnitude entry is positive, ties broken by
lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import DataError


@dataclass(frozen=True)
class PcaModel:
    """Frozen linear reduction: k orthonormal directions plus the data mean."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    whiten: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comps = np.asarray(self.components, dtype=np.float64)
        ev = np.asarray(self.explained_variance, dtype=np.float64)
        if comps.ndim != 2 or mean.ndim != 1 or comps.shape[1] != mean.shape[0]:
            raise DataError("components must be k x in_dim with matching mean")
        k = comps.shape[0]
        if not 1 <= k <= comps.shape[1]:
            raise DataError("need 1 <= k <= in_dim")
        if ev.shape != (k,):
            raise DataError("explained_variance must have length k")
        if np.any(ev < 0) or np.any(np.diff(ev) > 0):
            raise DataError("explained_variance must be non-negative, non-increasing")
        gram = comps @ comps.T
        if np.max(np.abs(gram - np.eye(k))) > 1e-8:
            raise DataError("components are not orthonormal")
        for arr in (mean, comps, ev):
            arr.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "explained_variance", ev)

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(data, k: int, whiten: bool = False) -> PcaModel:
    """Fit a k-component PCA to an N x D data matrix.

    Requires N >= 2 and 1 <= k <= min(N-1, D). All-constant data (zero
    total variance) is rejected.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("data must be an N x D matrix")
    n, d = x.shape
    if n < 2:
        raise DataError("need at least 2 samples to fit PCA")
    if not np.all(np.isfinite(x)):
        raise DataError("data contains non-finite entries")
    if not 1 <= k <= min(n - 1, d):
        raise DataError(f"k={k} out of range [1, {min(n - 1, d)}]")

    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(centered):
        raise DataError("data has zero total variance; PCA is undefined")

    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:k].copy()
    explained_variance = (s[:k] ** 2) / (n - 1)

    # Sign convention: largest-magnitude entry of each component positive.
    anchors = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), anchors])
    signs[signs == 0] = 1.0
    components *= signs[:, None]

    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=explained_variance,
        whiten=whiten,
    )


def pca_transform(model: PcaModel, data) -> np.ndarray:
    """Project N x D rows onto the model's components: (row - mean) @ compsᵀ."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise DataError(
            f"data must be N x {model.in_dim}, got shape {x.shape}"
        )
    z = (x - model.mean) @ model.components.T
    if model.whiten:
        z = z / np.sqrt(model.explained_variance)
    return z


def pca_inverse_transform(model: PcaModel, scores) -> np.ndarray:
    """Map N x k scores back to the original D-dimensional space."""
    z = np.asarray(scores, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != model.k:
        raise DataError(f"scores must be N x {model.k}, got shape {z.shape}")
    if model.whiten:
        z = z * np.sqrt(model.explained_variance)
    return z @ model.components + model.mean
