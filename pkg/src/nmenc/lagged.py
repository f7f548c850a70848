"""Time-lagged design matrix construction.

The predictor row for BOLD sample i concatenates, per modality, the feature
rows at strictly past times i-1 .. i-n_lags (most recent first). The first
n_lags samples of every source are dropped, never zero-padded, and lag
windows never cross source boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import BoldSeries, DataError


@dataclass(frozen=True)
class LagConfig:
    """Lag-window geometry shared by both encoder families."""

    n_lags: int = 10
    modality_order: tuple = ("visual", "audio")
    include_lag0: bool = False

    def __post_init__(self):
        object.__setattr__(self, "modality_order", tuple(self.modality_order))
        if self.n_lags < 1:
            raise DataError("n_lags must be >= 1")
        if not self.modality_order:
            raise DataError("modality_order must be non-empty")
        if len(set(self.modality_order)) != len(self.modality_order):
            raise DataError("modality_order contains duplicates")

    @property
    def lag_offsets(self) -> tuple:
        """Offsets subtracted from the target index, most recent first."""
        start = 0 if self.include_lag0 else 1
        return tuple(range(start, self.n_lags + 1))

    def design_dim(self, dims_by_modality: dict) -> int:
        return len(self.lag_offsets) * sum(
            dims_by_modality[m] for m in self.modality_order
        )


@dataclass(frozen=True)
class DesignMatrix:
    """Stacked lagged predictor rows aligned to target time indices."""

    values: np.ndarray
    target_index: np.ndarray
    source_id: str

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        idx = np.asarray(self.target_index, dtype=np.int64)
        if vals.ndim != 2:
            raise DataError("design values must be 2-D")
        if idx.ndim != 1 or idx.shape[0] != vals.shape[0]:
            raise DataError("target_index length must match row count")
        if idx.size and np.any(np.diff(idx) <= 0):
            raise DataError("target_index must be strictly increasing")
        vals.flags.writeable = False
        idx.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "target_index", idx)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def build_design(features: list, cfg: LagConfig) -> DesignMatrix:
    """Build the lagged predictor matrix from one series per modality.

    All series must share t_samples and source_id, and their modality set
    must equal cfg.modality_order. Rows cover targets n_lags .. T-1.
    """
    by_modality = {}
    for fs in features:
        if fs.modality in by_modality:
            raise DataError(f"duplicate series for modality {fs.modality!r}")
        by_modality[fs.modality] = fs
    if set(by_modality) != set(cfg.modality_order):
        raise DataError(
            f"modality set {sorted(by_modality)} does not match "
            f"configured order {list(cfg.modality_order)}"
        )
    t_set = {fs.t_samples for fs in features}
    if len(t_set) != 1:
        raise DataError(f"feature series disagree on t_samples: {sorted(t_set)}")
    sid_set = {fs.source_id for fs in features}
    if len(sid_set) != 1:
        raise DataError(f"feature series disagree on source_id: {sorted(sid_set)}")
    t_samples = t_set.pop()
    if t_samples <= cfg.n_lags:
        raise DataError(
            f"need t_samples > n_lags, got T={t_samples} with n_lags={cfg.n_lags}"
        )

    target_index = np.arange(cfg.n_lags, t_samples)
    blocks = []
    for modality in cfg.modality_order:
        vals = by_modality[modality].values
        for k in cfg.lag_offsets:
            blocks.append(vals[cfg.n_lags - k : t_samples - k])
    return DesignMatrix(
        values=np.hstack(blocks),
        target_index=target_index,
        source_id=sid_set.pop(),
    )


def align_targets(design: DesignMatrix, bold: BoldSeries):
    """Select the BOLD rows paired with each design row.

    Returns the design unchanged and a rows x P target matrix.
    """
    if bold.source_id != design.source_id:
        raise DataError(
            f"source_id mismatch: design {design.source_id!r} "
            f"vs BOLD {bold.source_id!r}"
        )
    built_from_t = int(design.target_index[-1]) + 1
    if bold.t_samples != built_from_t:
        raise DataError(
            f"BOLD has {bold.t_samples} samples but the design was built "
            f"from {built_from_t}"
        )
    return design, bold.values[design.target_index]
