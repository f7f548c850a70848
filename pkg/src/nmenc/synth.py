"""Synthetic multimodal corpus with a known lagged-linear ground truth.

Features are i.i.d. standard normal (optionally AR(1)), the clean signal is
the true kernel applied to the exact lag construction, and per-parcel noise
is rescaled to hit the requested SNR on the realized signal. With i.i.d.
features the best achievable held-out correlation is sqrt(snr / (1 + snr)),
which the acceptance tests lean on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .io import BoldSeries, DataError, FeatureSeries, FormatError, atomic_write_bytes
from .lagged import DesignMatrix, LagConfig, build_design

_NMEK_MAGIC = b"NMEK"
_NMEK_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    """Geometry, SNR, and seed of one synthetic source."""

    t_samples: int
    d_visual: int
    d_audio: int
    n_parcels: int
    n_lags_true: int
    snr: float
    seed: int
    tr_seconds: float = 1.49
    source_id: str = "synth"
    subject_id: str = "sub-synth"
    ar_coeff: float = 0.0
    kernel: np.ndarray | None = None

    def __post_init__(self):
        if min(self.d_visual, self.d_audio, self.n_parcels,
               self.n_lags_true) < 1:
            raise DataError("all dimensions must be >= 1")
        if self.t_samples <= self.n_lags_true:
            raise DataError("need t_samples > n_lags_true")
        if not self.snr > 0:
            raise DataError("snr must be positive")
        if not -1 < self.ar_coeff < 1:
            raise DataError("ar_coeff must lie in (-1, 1)")
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=np.float64)
            if k.shape != (self.n_parcels, self.kernel_dim):
                raise DataError(
                    f"kernel must be {self.n_parcels} x {self.kernel_dim}"
                )
            object.__setattr__(self, "kernel", k)

    @property
    def kernel_dim(self) -> int:
        return self.n_lags_true * (self.d_visual + self.d_audio)

    @property
    def lag_config(self) -> LagConfig:
        return LagConfig(n_lags=self.n_lags_true,
                         modality_order=("visual", "audio"))


def _draw_features(rng, t, d, phi):
    x = rng.standard_normal((t, d))
    if phi != 0.0:
        for i in range(1, t):
            x[i] = phi * x[i - 1] + np.sqrt(1 - phi * phi) * x[i]
    return x


def generate(spec: SynthSpec):
    """Generate one source's features, BOLD, and the true kernel.

    Returns (features_by_modality, bold, kernel). BOLD rows before
    n_lags_true carry noise only (the lagged signal is undefined there);
    fits never use them as targets.
    """
    rng = np.random.default_rng(spec.seed)
    visual = _draw_features(rng, spec.t_samples, spec.d_visual, spec.ar_coeff)
    audio = _draw_features(rng, spec.t_samples, spec.d_audio, spec.ar_coeff)
    kernel = spec.kernel
    if kernel is None:
        kernel = rng.standard_normal((spec.n_parcels, spec.kernel_dim))

    features = {
        "visual": FeatureSeries(modality="visual", tr_seconds=spec.tr_seconds,
                                values=visual, source_id=spec.source_id),
        "audio": FeatureSeries(modality="audio", tr_seconds=spec.tr_seconds,
                               values=audio, source_id=spec.source_id),
    }

    # Signal from the file-quantized features, via the exact lag layout.
    design = build_design([features["visual"], features["audio"]],
                          spec.lag_config)
    signal = design.values @ kernel.T
    signal_var = signal.var(axis=0)
    if np.any(signal_var == 0):
        raise DataError("degenerate kernel: a parcel has zero signal variance")

    noise = rng.standard_normal((spec.t_samples, spec.n_parcels))
    # Rescale so var(noise)/var(signal) over the defined rows is exactly 1/snr.
    noise_rows = noise[design.target_index]
    scale = np.sqrt(signal_var / spec.snr) / noise_rows.std(axis=0)
    noise = noise * scale

    bold_values = noise.copy()
    bold_values[design.target_index] += signal
    bold = BoldSeries(tr_seconds=spec.tr_seconds, values=bold_values,
                      source_id=spec.source_id, subject_id=spec.subject_id)
    return features, bold, kernel


def kernel_recovery_error(true_kernel, fitted) -> np.ndarray:
    """Per-parcel cosine distance between true and fitted weight rows.

    `fitted` is a LinearEncoderModel; when it embeds PCA transforms, its
    weights are mapped back to the raw lag-feature space first (lag slots
    keep the most-recent-first layout of the design construction).
    """
    k = np.asarray(true_kernel, dtype=np.float64)
    w = fitted_weights_in_raw_space(fitted)
    if w.shape != k.shape:
        raise DataError(
            f"fitted weights {w.shape} do not match kernel {k.shape}"
        )
    num = np.einsum("ij,ij->i", k, w)
    denom = np.linalg.norm(k, axis=1) * np.linalg.norm(w, axis=1)
    if np.any(denom == 0):
        raise DataError("zero-norm weight row; cosine distance undefined")
    return 1.0 - num / denom


def fitted_weights_in_raw_space(model) -> np.ndarray:
    """Undo per-modality PCA on a linear model's weights, per lag slot."""
    if not model.pca_models:
        return np.asarray(model.weights)
    cfg = model.lag_config
    if cfg is None:
        raise DataError("model lacks a lag_config")
    n_slots = len(cfg.lag_offsets)
    blocks = []
    offset = 0
    for modality in cfg.modality_order:
        pm = model.pca_models[modality]
        for _ in range(n_slots):
            w_slot = model.weights[:, offset:offset + pm.k]
            blocks.append(w_slot @ pm.components)
            offset += pm.k
    if offset != model.in_dim:
        raise DataError("weight layout does not match the PCA models")
    return np.hstack(blocks)


def write_kernel_file(kernel, path) -> None:
    """Write the ground-truth kernel sidecar (NMEK, f64 little-endian)."""
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2:
        raise DataError("kernel must be 2-D")
    header = struct.pack("<4sHQQ", _NMEK_MAGIC, _NMEK_VERSION,
                         k.shape[0], k.shape[1])
    atomic_write_bytes(path, header + np.ascontiguousarray(k, "<f8").tobytes())


def read_kernel_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = struct.calcsize("<4sHQQ")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    magic, version, p, d = struct.unpack_from("<4sHQQ", raw)
    if magic != _NMEK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _NMEK_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) - head != p * d * 8:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(raw, dtype="<f8", offset=head).reshape(p, d).copy()
