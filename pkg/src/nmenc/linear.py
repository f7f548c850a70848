"""Per-parcel lagged linear regression solved for all parcels at once.

Every parcel shares the same design matrix, so one Cholesky factorization
of the (augmented) Gram matrix serves every parcel's normal equations.
The bias is folded in as an unpenalized all-ones column.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .io import MODALITIES, MODALITY_CODES, DataError, FormatError, atomic_write_bytes
from .lagged import DesignMatrix, LagConfig, align_targets, build_design
from .pca import PcaModel, pca_fit, pca_transform

_NMEL_MAGIC = b"NMEL"
_NMEL_VERSION = 1


class SingularFitError(np.linalg.LinAlgError):
    """Normal equations are (numerically) rank deficient."""


@dataclass(frozen=True)
class LinearEncoderModel:
    """Per-parcel weight vectors and biases plus the input-preparation state."""

    weights: np.ndarray
    biases: np.ndarray
    ridge_lambda: float
    pca_models: dict
    lag_config: LagConfig | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise DataError("weights must be P x in_dim with a length-P bias vector")
        if self.ridge_lambda < 0:
            raise DataError("ridge_lambda must be non-negative")
        w.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "pca_models", dict(self.pca_models))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_parcels(self) -> int:
        return self.weights.shape[0]


def fit_linear(design: DesignMatrix, targets, ridge_lambda: float = 0.0,
               pca_models=None, lag_config=None) -> LinearEncoderModel:
    """Solve the (optionally ridge-penalized) least-squares fit per parcel.

    The bias column is never penalized, so ridge_lambda = 0 is the plain
    sum-of-squared-errors minimizer. A rank-deficient system with
    ridge_lambda = 0 raises SingularFitError instead of silently
    pseudo-inverting.
    """
    x = design.values
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise DataError(
            f"targets must have {x.shape[0]} rows to match the design"
        )
    if ridge_lambda < 0:
        raise DataError("ridge_lambda must be non-negative")
    if not np.all(np.isfinite(y)):
        raise DataError("targets contain non-finite entries")
    n, d = x.shape
    if ridge_lambda == 0 and n < d + 1:
        raise DataError(
            f"unpenalized fit needs rows >= in_dim + 1 ({d + 1}), got {n}"
        )
    if n < 2:
        raise DataError("need at least 2 rows")

    xa = np.hstack([x, np.ones((n, 1))])
    gram = xa.T @ xa
    if ridge_lambda > 0:
        gram[np.arange(d), np.arange(d)] += ridge_lambda
    rhs = xa.T @ y

    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
        coef = scipy.linalg.cho_solve(factor, rhs)
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
        coef = _solve_via_eigh(gram, rhs, ridge_lambda, d)

    return LinearEncoderModel(
        weights=coef[:d].T.copy(),
        biases=coef[d].copy(),
        ridge_lambda=float(ridge_lambda),
        pca_models=pca_models or {},
        lag_config=lag_config,
    )


def _solve_via_eigh(gram, rhs, ridge_lambda, d):
    """Eigendecomposition fallback when Cholesky reports non-PD."""
    if ridge_lambda == 0:
        raise SingularFitError(
            f"normal equations are singular: the {d}-column design "
            "(plus bias) is rank deficient. Raise ridge_lambda or reduce "
            "the number of retained PCA components."
        )
    eigvals, eigvecs = np.linalg.eigh(gram)
    tol = max(gram.shape) * np.finfo(np.float64).eps * eigvals[-1]
    if eigvals[0] <= tol:
        raise SingularFitError(
            "normal equations remain numerically singular after ridge "
            f"penalty {ridge_lambda}: smallest eigenvalue {eigvals[0]:.3e}. "
            "Raise ridge_lambda or reduce the number of retained PCA "
            "components."
        )
    return eigvecs @ ((eigvecs.T @ rhs) / eigvals[:, None])


def predict_linear(model: LinearEncoderModel, design: DesignMatrix) -> np.ndarray:
    """Evaluate w.p + b for every design row and parcel."""
    if design.dim != model.in_dim:
        raise DataError(
            f"design dim {design.dim} does not match model in_dim {model.in_dim}"
        )
    return design.values @ model.weights.T + model.biases


@dataclass(frozen=True)
class _ReducedSeries:
    """PCA-reduced feature rows kept at float64 (no file-storage quantization)."""

    modality: str
    values: np.ndarray
    source_id: str

    @property
    def t_samples(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def reduce_features(pca_models: dict, features_by_modality: dict) -> list:
    """Apply the frozen per-modality PCA transforms to one source's features."""
    reduced = []
    for modality, series in features_by_modality.items():
        model = pca_models.get(modality)
        if model is None:
            raise DataError(f"no PCA model for modality {modality!r}")
        reduced.append(
            _ReducedSeries(
                modality=modality,
                values=pca_transform(model, series.values),
                source_id=series.source_id,
            )
        )
    return reduced


def build_reduced_design(model_pca: dict, features_by_modality: dict,
                         lag_config: LagConfig) -> DesignMatrix:
    """PCA-reduce one source's features and build its lagged design."""
    return build_design(reduce_features(model_pca, features_by_modality), lag_config)


def fit_linear_pipeline(features, bold, k_per_modality: dict,
                        lag_config: LagConfig,
                        ridge_lambda: float = 0.0) -> LinearEncoderModel:
    """Fit PCA per modality, build per-source designs, stack, and solve.

    features: ordered mapping source_id -> {modality: FeatureSeries}
    bold:     mapping source_id -> BoldSeries
    Rows are stacked in the iteration order of `features` (manifest order).
    """
    sources = list(features)
    if not sources:
        raise DataError("empty training corpus")
    for sid in sources:
        if sid not in bold:
            raise DataError(f"no BOLD series for training source {sid!r}")

    pca_models = {}
    for modality in lag_config.modality_order:
        stacked = []
        for sid in sources:
            if modality not in features[sid]:
                raise DataError(f"source {sid!r} lacks modality {modality!r}")
            stacked.append(features[sid][modality].values)
        pca_models[modality] = pca_fit(
            np.vstack(stacked), k_per_modality[modality]
        )

    design_blocks = []
    target_blocks = []
    for sid in sources:
        design = build_reduced_design(pca_models, features[sid], lag_config)
        _, targets = align_targets(design, bold[sid])
        design_blocks.append(design.values)
        target_blocks.append(targets)

    stacked_design = DesignMatrix(
        values=np.vstack(design_blocks),
        target_index=np.arange(sum(b.shape[0] for b in design_blocks)),
        source_id=sources[0],
    )
    return fit_linear(
        stacked_design,
        np.vstack(target_blocks),
        ridge_lambda=ridge_lambda,
        pca_models=pca_models,
        lag_config=lag_config,
    )


def predict_from_features(model: LinearEncoderModel, features_by_modality: dict):
    """Predict one source's parcel responses from raw (unreduced) features.

    Returns (target_index, rows x P prediction matrix).
    """
    design = build_reduced_design(model.pca_models, features_by_modality,
                                  model.lag_config)
    return design.target_index, predict_linear(model, design)


# ---------------------------------------------------------------------------
# NMEL model bundle serialization (bit-exact round trip, little-endian f64)

def _pack_array(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _pack_lag_config(cfg: LagConfig) -> bytes:
    out = struct.pack("<IBB", cfg.n_lags, int(cfg.include_lag0),
                      len(cfg.modality_order))
    for m in cfg.modality_order:
        out += struct.pack("<B", MODALITY_CODES[m])
    return out


def _pack_pca_block(modality: str, model: PcaModel) -> bytes:
    out = struct.pack("<BBQQ", MODALITY_CODES[modality], int(model.whiten),
                      model.in_dim, model.k)
    out += _pack_array(model.mean)
    out += _pack_array(model.components)
    out += _pack_array(model.explained_variance)
    return out


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def array(self, count: int, shape) -> np.ndarray:
        size = count * 8
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.path}: truncated array at byte {self.pos}")
        arr = np.frombuffer(self.raw, dtype="<f8", count=count,
                            offset=self.pos).reshape(shape)
        self.pos += size
        return arr.astype(np.float64)

    def expect_end(self):
        if self.pos != len(self.raw):
            raise FormatError(
                f"{self.path}: {len(self.raw) - self.pos} trailing bytes"
            )


def _read_lag_config(r: _Reader) -> LagConfig:
    n_lags, include_lag0, n_mod = r.unpack("<IBB")
    order = []
    for _ in range(n_mod):
        (code,) = r.unpack("<B")
        if code >= len(MODALITIES):
            raise FormatError(f"{r.path}: unknown modality code {code}")
        order.append(MODALITIES[code])
    return LagConfig(n_lags=n_lags, modality_order=tuple(order),
                     include_lag0=bool(include_lag0))


def _read_pca_block(r: _Reader):
    code, whiten, in_dim, k = r.unpack("<BBQQ")
    if code >= len(MODALITIES):
        raise FormatError(f"{r.path}: unknown modality code {code}")
    mean = r.array(in_dim, (in_dim,))
    comps = r.array(k * in_dim, (k, in_dim))
    ev = r.array(k, (k,))
    return MODALITIES[code], PcaModel(mean=mean, components=comps,
                                      explained_variance=ev,
                                      whiten=bool(whiten))


def save_linear_model(model: LinearEncoderModel, path) -> None:
    """Write the NMEL model bundle."""
    if model.lag_config is None:
        raise DataError("model has no lag_config; fit via the pipeline to serialize")
    out = struct.pack("<4sH", _NMEL_MAGIC, _NMEL_VERSION)
    out += _pack_lag_config(model.lag_config)
    out += struct.pack("<B", len(model.pca_models))
    for modality in model.lag_config.modality_order:
        if modality in model.pca_models:
            out += _pack_pca_block(modality, model.pca_models[modality])
    out += struct.pack("<d", model.ridge_lambda)
    out += struct.pack("<QQ", model.in_dim, model.n_parcels)
    out += _pack_array(model.weights)
    out += _pack_array(model.biases)
    atomic_write_bytes(path, out)


def load_linear_model(path) -> LinearEncoderModel:
    """Read an NMEL model bundle, rejecting malformed files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic, version = r.unpack("<4sH")
    if magic != _NMEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _NMEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    lag_config = _read_lag_config(r)
    (n_pca,) = r.unpack("<B")
    pca_models = {}
    for _ in range(n_pca):
        modality, pm = _read_pca_block(r)
        pca_models[modality] = pm
    (ridge_lambda,) = r.unpack("<d")
    in_dim, n_parcels = r.unpack("<QQ")
    weights = r.array(n_parcels * in_dim, (n_parcels, in_dim))
    biases = r.array(n_parcels, (n_parcels,))
    r.expect_end()
    return LinearEncoderModel(
        weights=weights,
        biases=biases,
        ridge_lambda=ridge_lambda,
        pca_models=pca_models,
        lag_config=lag_config,
    )
