"""Attention-based fusion encoder, implemented from scratch in numpy.

Pipeline per sample: each modality's lag window is linearly projected to
d_model, run through a multi-head self-attention block (residual + layer
norm), vectorized, concatenated, recalibrated by a squeeze-and-excitation
style feature gate, and mapped to the parcel space by a three-layer
feed-forward head (ReLU + dropout after the first two layers, linear
output).

Gradients are exact reverse-mode derivatives of the mean-squared-error
loss, verified against central finite differences by the test suite.
Training uses Adam with early stopping on validation loss and is fully
reproducible from the config seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .io import DataError, FormatError, atomic_write_bytes
from .lagged import LagConfig, align_targets
from .linear import (
    _pack_lag_config,
    _pack_pca_block,
    _read_lag_config,
    _read_pca_block,
    _Reader,
    build_reduced_design,
)
from .pca import pca_fit

_NMEA_MAGIC = b"NMEA"
_NMEA_VERSION = 1
_LN_EPS = 1e-5

MODALITY_STREAMS = ("visual", "audio")


class TrainingDivergedError(ArithmeticError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class AttentionConfig:
    """Architecture and optimizer settings for the fusion network.

    None of the numeric defaults is a published value; all were chosen as
    conventional settings for this architecture family and are
    config-surfaced.
    """

    n_lags: int = 10
    d_visual: int = 250
    d_audio: int = 250
    n_parcels: int = 1000
    n_heads: int = 4
    d_model: int = 128
    gate_bottleneck_ratio: float = 0.25
    head_hidden_dims: tuple = (1024, 512)
    dropout_rate: float = 0.3
    vectorize: str = "flatten"
    seed: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5

    def __post_init__(self):
        object.__setattr__(self, "head_hidden_dims",
                           tuple(self.head_hidden_dims))
        if self.d_model % self.n_heads != 0:
            raise DataError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout_rate < 1:
            raise DataError("dropout_rate must lie in [0, 1)")
        if not 0 < self.gate_bottleneck_ratio <= 1:
            raise DataError("gate_bottleneck_ratio must lie in (0, 1]")
        if self.vectorize not in ("flatten", "mean"):
            raise DataError("vectorize must be 'flatten' or 'mean'")
        if len(self.head_hidden_dims) != 2:
            raise DataError("head_hidden_dims must be a pair")
        if min(self.n_lags, self.d_visual, self.d_audio, self.n_parcels,
               self.n_heads, self.d_model, *self.head_hidden_dims) < 1:
            raise DataError("all size settings must be >= 1")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def fused_dim(self) -> int:
        per_mod = (self.n_lags * self.d_model if self.vectorize == "flatten"
                   else self.d_model)
        return 2 * per_mod

    @property
    def gate_bottleneck(self) -> int:
        return max(1, math.ceil(self.fused_dim * self.gate_bottleneck_ratio))


def param_shapes(cfg: AttentionConfig) -> dict:
    """Declaration-ordered map of parameter tensor name -> shape."""
    shapes = {}
    for mod, d_in in (("visual", cfg.d_visual), ("audio", cfg.d_audio)):
        shapes[f"{mod}.in_proj.w"] = (d_in, cfg.d_model)
        shapes[f"{mod}.in_proj.b"] = (cfg.d_model,)
        shapes[f"{mod}.mha.w_q"] = (cfg.n_heads, cfg.d_model, cfg.d_head)
        shapes[f"{mod}.mha.w_k"] = (cfg.n_heads, cfg.d_model, cfg.d_head)
        shapes[f"{mod}.mha.w_v"] = (cfg.n_heads, cfg.d_model, cfg.d_head)
        shapes[f"{mod}.mha.w_o"] = (cfg.d_model, cfg.d_model)
        shapes[f"{mod}.mha.ln_gain"] = (cfg.d_model,)
        shapes[f"{mod}.mha.ln_shift"] = (cfg.d_model,)
    f = cfg.fused_dim
    b = cfg.gate_bottleneck
    h1, h2 = cfg.head_hidden_dims
    shapes["gate.w1"] = (f, b)
    shapes["gate.b1"] = (b,)
    shapes["gate.w2"] = (b, f)
    shapes["gate.b2"] = (f,)
    shapes["head.w1"] = (f, h1)
    shapes["head.b1"] = (h1,)
    shapes["head.w2"] = (h1, h2)
    shapes["head.b2"] = (h2,)
    shapes["head.w3"] = (h2, cfg.n_parcels)
    shapes["head.b3"] = (cfg.n_parcels,)
    return shapes


def param_count(cfg: AttentionConfig) -> int:
    """Closed-form parameter count.

    Per modality m with input dim d_m, writing D = d_model:
        in_proj   d_m * D + D
        mha       3 * D^2 (per-head Q/K/V stacks) + D^2 + 2 * D (layer norm)
    Gate, with F = fused_dim and B = gate_bottleneck:
        F*B + B + B*F + F
    Head, with hidden dims H1, H2 and P parcels:
        F*H1 + H1 + H1*H2 + H2 + H2*P + P
    """
    d = cfg.d_model
    f = cfg.fused_dim
    b = cfg.gate_bottleneck
    h1, h2 = cfg.head_hidden_dims
    total = 0
    for d_in in (cfg.d_visual, cfg.d_audio):
        total += d_in * d + d
        total += 4 * d * d + 2 * d
    total += 2 * f * b + b + f
    total += f * h1 + h1 + h1 * h2 + h2 + h2 * cfg.n_parcels + cfg.n_parcels
    return total


def init_params(cfg: AttentionConfig) -> dict:
    """Seeded initialization: one generator stream per tensor, in order.

    Linear maps use uniform fan-in scaling; biases start at zero; layer
    norm starts at identity; square input projections start near-identity.
    """
    shapes = param_shapes(cfg)
    streams = np.random.SeedSequence(cfg.seed).spawn(len(shapes))
    params = {}
    for (name, shape), ss in zip(shapes.items(), streams):
        rng = np.random.default_rng(ss)
        if name.endswith(".b") or name.endswith(("b1", "b2", "b3")) \
                or name.endswith("ln_shift"):
            params[name] = np.zeros(shape)
        elif name.endswith("ln_gain"):
            params[name] = np.ones(shape)
        elif name.endswith("in_proj.w") and shape[0] == shape[1]:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = np.eye(shape[0]) + 0.01 * rng.uniform(
                -bound, bound, size=shape)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass(frozen=True)
class AttentionEncoderModel:
    """Trained fusion network plus the input-preparation state."""

    config: AttentionConfig
    params: dict
    pca_models: dict = field(default_factory=dict)
    lag_config: LagConfig | None = None

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(self.params) != set(shapes):
            raise DataError("parameter set does not match the architecture")
        for name, shape in shapes.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"{name} has shape {arr.shape}, want {shape}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        object.__setattr__(self, "params", dict(self.params))


# ---------------------------------------------------------------------------
# Forward pass (batched) with cache for the backward pass

def _layer_norm_forward(x, gain, shift):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv_std
    return gain * xhat + shift, (xhat, inv_std)


def _layer_norm_backward(dy, gain, cache):
    xhat, inv_std = cache
    d_gain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    d_shift = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, d_gain, d_shift


def _softmax(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _mha_block_forward(params, prefix, h0):
    """Multi-head self-attention with residual and layer norm.

    h0: (batch, n_lags, d_model) already-projected input.
    Returns (output, cache); cache also exposes the per-head attention
    matrices under key 'attn' for inspection.
    """
    w_q = params[f"{prefix}.mha.w_q"]
    w_k = params[f"{prefix}.mha.w_k"]
    w_v = params[f"{prefix}.mha.w_v"]
    w_o = params[f"{prefix}.mha.w_o"]
    d_head = w_q.shape[-1]

    # (batch, head, lag, d_head)
    q = np.einsum("bnd,hdk->bhnk", h0, w_q)
    k = np.einsum("bnd,hdk->bhnk", h0, w_k)
    v = np.einsum("bnd,hdk->bhnk", h0, w_v)
    scores = np.einsum("bhnk,bhmk->bhnm", q, k) / math.sqrt(d_head)
    attn = _softmax(scores)
    heads = np.einsum("bhnm,bhmk->bhnk", attn, v)
    concat = heads.transpose(0, 2, 1, 3).reshape(h0.shape)
    projected = concat @ w_o
    residual = h0 + projected
    out, ln_cache = _layer_norm_forward(
        residual, params[f"{prefix}.mha.ln_gain"],
        params[f"{prefix}.mha.ln_shift"])
    cache = {"h0": h0, "q": q, "k": k, "v": v, "attn": attn,
             "concat": concat, "ln": ln_cache, "d_head": d_head}
    return out, cache


def _mha_block_backward(params, prefix, d_out, cache, grads):
    h0 = cache["h0"]
    d_head = cache["d_head"]
    w_q = params[f"{prefix}.mha.w_q"]
    w_k = params[f"{prefix}.mha.w_k"]
    w_v = params[f"{prefix}.mha.w_v"]
    w_o = params[f"{prefix}.mha.w_o"]

    d_residual, d_gain, d_shift = _layer_norm_backward(
        d_out, params[f"{prefix}.mha.ln_gain"], cache["ln"])
    grads[f"{prefix}.mha.ln_gain"] += d_gain
    grads[f"{prefix}.mha.ln_shift"] += d_shift

    d_h0 = d_residual.copy()
    d_projected = d_residual
    grads[f"{prefix}.mha.w_o"] += np.einsum(
        "bnd,bne->bde", cache["concat"], d_projected).sum(axis=0)
    d_concat = d_projected @ w_o.T

    batch, n, d_model = h0.shape
    n_heads = w_q.shape[0]
    d_heads_out = d_concat.reshape(batch, n, n_heads, d_head).transpose(0, 2, 1, 3)

    attn = cache["attn"]
    d_attn = np.einsum("bhnk,bhmk->bhnm", d_heads_out, cache["v"])
    d_v = np.einsum("bhnm,bhnk->bhmk", attn, d_heads_out)
    d_scores = attn * (d_attn - np.sum(d_attn * attn, axis=-1, keepdims=True))
    d_scores /= math.sqrt(d_head)
    d_q = np.einsum("bhnm,bhmk->bhnk", d_scores, cache["k"])
    d_k = np.einsum("bhnm,bhnk->bhmk", d_scores, cache["q"])

    grads[f"{prefix}.mha.w_q"] += np.einsum("bnd,bhnk->hdk", h0, d_q)
    grads[f"{prefix}.mha.w_k"] += np.einsum("bnd,bhnk->hdk", h0, d_k)
    grads[f"{prefix}.mha.w_v"] += np.einsum("bnd,bhnk->hdk", h0, d_v)
    d_h0 += np.einsum("bhnk,hdk->bnd", d_q, w_q)
    d_h0 += np.einsum("bhnk,hdk->bnd", d_k, w_k)
    d_h0 += np.einsum("bhnk,hdk->bnd", d_v, w_v)
    return d_h0


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward_batch(model: AttentionEncoderModel, visual, audio,
                  mode: str = "eval", dropout_rng=None):
    """Run the full network on a batch of lag windows.

    visual: (batch, n_lags, d_visual); audio: (batch, n_lags, d_audio).
    In train mode, dropout masks are drawn from dropout_rng (required when
    dropout_rate > 0). Returns (predictions (batch, P), cache).
    """
    cfg = model.config
    params = model.params
    if mode not in ("train", "eval"):
        raise DataError("mode must be 'train' or 'eval'")
    xv = np.asarray(visual, dtype=np.float64)
    xa = np.asarray(audio, dtype=np.float64)
    if xv.ndim != 3 or xv.shape[1:] != (cfg.n_lags, cfg.d_visual):
        raise DataError(
            f"visual windows must be (batch, {cfg.n_lags}, {cfg.d_visual})")
    if xa.ndim != 3 or xa.shape[1:] != (cfg.n_lags, cfg.d_audio):
        raise DataError(
            f"audio windows must be (batch, {cfg.n_lags}, {cfg.d_audio})")
    if xv.shape[0] != xa.shape[0]:
        raise DataError("modality batches differ in size")

    cache = {"mode": mode, "inputs": {"visual": xv, "audio": xa}}
    vectors = []
    for mod, x in (("visual", xv), ("audio", xa)):
        h0 = x @ params[f"{mod}.in_proj.w"] + params[f"{mod}.in_proj.b"]
        block_out, mha_cache = _mha_block_forward(params, mod, h0)
        cache[f"{mod}.mha"] = mha_cache
        if cfg.vectorize == "flatten":
            vec = block_out.reshape(block_out.shape[0], -1)
        else:
            vec = block_out.mean(axis=1)
        cache[f"{mod}.block_out_shape"] = block_out.shape
        vectors.append(vec)
    fused = np.concatenate(vectors, axis=1)

    gate_h = np.maximum(0.0, fused @ params["gate.w1"] + params["gate.b1"])
    gate_logits = gate_h @ params["gate.w2"] + params["gate.b2"]
    gate = _sigmoid(gate_logits)
    gated = fused * gate
    cache.update(fused=fused, gate_h=gate_h, gate=gate, gated=gated)

    h1_pre = gated @ params["head.w1"] + params["head.b1"]
    h1 = np.maximum(0.0, h1_pre)
    h1, mask1 = _dropout(h1, cfg.dropout_rate, mode, dropout_rng)
    h2_pre = h1 @ params["head.w2"] + params["head.b2"]
    h2 = np.maximum(0.0, h2_pre)
    h2, mask2 = _dropout(h2, cfg.dropout_rate, mode, dropout_rng)
    pred = h2 @ params["head.w3"] + params["head.b3"]
    cache.update(h1_pre=h1_pre, h1=h1, mask1=mask1,
                 h2_pre=h2_pre, h2=h2, mask2=mask2)

    if not np.all(np.isfinite(pred)):
        raise DataError("non-finite prediction; check inputs and parameters")
    return pred, cache


def _dropout(x, rate, mode, rng):
    if mode != "train" or rate == 0.0:
        return x, None
    if rng is None:
        raise DataError("train-mode dropout requires a dropout_rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def forward(model: AttentionEncoderModel, visual_window, audio_window,
            mode: str = "eval", dropout_rng=None) -> np.ndarray:
    """Single-sample forward pass; returns the length-P prediction."""
    pred, _ = forward_batch(
        model, np.asarray(visual_window)[None], np.asarray(audio_window)[None],
        mode=mode, dropout_rng=dropout_rng)
    return pred[0]


def mha_forward(model: AttentionEncoderModel, modality: str, x) -> np.ndarray:
    """Run one modality's MHA block alone on an n_lags x d_model sequence.

    Exposes the block for direct verification; x is the block input (after
    input projection).
    """
    if modality not in MODALITY_STREAMS:
        raise DataError(f"unknown modality stream {modality!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.d_model:
        raise DataError(f"x must be n_lags x {model.config.d_model}")
    out, _ = _mha_block_forward(model.params, modality, x[None])
    return out[0]


def attention_weights(model: AttentionEncoderModel, modality: str, x) -> np.ndarray:
    """Per-head softmax attention matrices for one sequence (heads, N, N)."""
    x = np.asarray(x, dtype=np.float64)
    _, cache = _mha_block_forward(model.params, modality, x[None])
    return cache["attn"][0]


def gate_forward(model: AttentionEncoderModel, fused) -> np.ndarray:
    """Apply the feature gate alone to a length-F fused vector."""
    f = np.asarray(fused, dtype=np.float64)
    if f.shape != (model.config.fused_dim,):
        raise DataError(f"fused must have length {model.config.fused_dim}")
    params = model.params
    h = np.maximum(0.0, f @ params["gate.w1"] + params["gate.b1"])
    gate = _sigmoid(h @ params["gate.w2"] + params["gate.b2"])
    return f * gate


def loss(model: AttentionEncoderModel, visual, audio, targets,
         mode: str = "eval", dropout_rng=None) -> float:
    """Mean over batch and parcels of squared prediction error."""
    pred, _ = forward_batch(model, visual, audio, mode=mode,
                            dropout_rng=dropout_rng)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != pred.shape:
        raise DataError(f"targets must have shape {pred.shape}")
    return float(np.mean((pred - y) ** 2))


def backward(model: AttentionEncoderModel, visual, audio, targets,
             mode: str = "eval", dropout_rng=None):
    """Gradients of the mean-squared-error loss w.r.t. every parameter.

    Returns (loss_value, grads dict with the same keys/shapes as params).
    """
    cfg = model.config
    params = model.params
    pred, cache = forward_batch(model, visual, audio, mode=mode,
                                dropout_rng=dropout_rng)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != pred.shape:
        raise DataError(f"targets must have shape {pred.shape}")
    batch, n_parcels = pred.shape
    loss_value = float(np.mean((pred - y) ** 2))

    grads = {name: np.zeros(shape)
             for name, shape in param_shapes(cfg).items()}
    d_pred = 2.0 * (pred - y) / (batch * n_parcels)

    grads["head.b3"] += d_pred.sum(axis=0)
    grads["head.w3"] += cache["h2"].T @ d_pred
    d_h2 = d_pred @ params["head.w3"].T
    if cache["mask2"] is not None:
        d_h2 = d_h2 * cache["mask2"]
    d_h2_pre = d_h2 * (cache["h2_pre"] > 0)
    grads["head.b2"] += d_h2_pre.sum(axis=0)
    grads["head.w2"] += cache["h1"].T @ d_h2_pre
    d_h1 = d_h2_pre @ params["head.w2"].T
    if cache["mask1"] is not None:
        d_h1 = d_h1 * cache["mask1"]
    d_h1_pre = d_h1 * (cache["h1_pre"] > 0)
    grads["head.b1"] += d_h1_pre.sum(axis=0)
    grads["head.w1"] += cache["gated"].T @ d_h1_pre
    d_gated = d_h1_pre @ params["head.w1"].T

    fused = cache["fused"]
    gate = cache["gate"]
    d_fused = d_gated * gate
    d_gate = d_gated * fused
    d_gate_logits = d_gate * gate * (1.0 - gate)
    grads["gate.b2"] += d_gate_logits.sum(axis=0)
    grads["gate.w2"] += cache["gate_h"].T @ d_gate_logits
    d_gate_h = d_gate_logits @ params["gate.w2"].T
    d_gate_h_pre = d_gate_h * (cache["gate_h"] > 0)
    grads["gate.b1"] += d_gate_h_pre.sum(axis=0)
    grads["gate.w1"] += fused.T @ d_gate_h_pre
    d_fused += d_gate_h_pre @ params["gate.w1"].T

    split = (cfg.n_lags * cfg.d_model if cfg.vectorize == "flatten"
             else cfg.d_model)
    for mod, d_vec in (("visual", d_fused[:, :split]),
                       ("audio", d_fused[:, split:])):
        shape = cache[f"{mod}.block_out_shape"]
        if cfg.vectorize == "flatten":
            d_block_out = d_vec.reshape(shape)
        else:
            d_block_out = np.broadcast_to(
                d_vec[:, None, :] / shape[1], shape).copy()
        d_h0 = _mha_block_backward(params, mod, d_block_out,
                                   cache[f"{mod}.mha"], grads)
        x = cache["inputs"][mod]
        grads[f"{mod}.in_proj.w"] += np.einsum("bnd,bne->de", x, d_h0)
        grads[f"{mod}.in_proj.b"] += d_h0.sum(axis=(0, 1))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DataError(f"non-finite gradient for parameter {name}")
    return loss_value, grads


# ---------------------------------------------------------------------------
# Training loop (Adam, early stopping on validation loss)

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


def train(config: AttentionConfig, visual, audio, targets,
          val_visual, val_audio, val_targets,
          pca_models=None, lag_config=None):
    """Train the fusion network; returns (model, log).

    The log is a list of (epoch, train_mse, val_mse) rows. The returned
    model carries the parameters with the best validation loss. Two runs
    with the same config (incl. seed) produce bit-identical trajectories.
    """
    xv = np.asarray(visual, dtype=np.float64)
    xa = np.asarray(audio, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if xv.shape[0] == 0 or np.asarray(val_targets).shape[0] == 0:
        raise DataError("train and validation sets must be non-empty")

    params = init_params(config)
    model = AttentionEncoderModel(config=config, params=params,
                                  pca_models=pca_models or {},
                                  lag_config=lag_config)
    shapes = param_shapes(config)
    m_state = {k: np.zeros(s) for k, s in shapes.items()}
    v_state = {k: np.zeros(s) for k, s in shapes.items()}
    step = 0

    train_rng = np.random.default_rng(
        np.random.SeedSequence(config.seed).spawn(len(shapes) + 1)[-1])
    n = xv.shape[0]
    best_val = math.inf
    best_params = {k: p.copy() for k, p in params.items()}
    stale = 0
    log = []

    for epoch in range(1, config.max_epochs + 1):
        order = train_rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_loss, grads = backward(
                model, xv[idx], xa[idx], y[idx],
                mode="train", dropout_rng=train_rng)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}")
            step += 1
            bc1 = 1.0 - _ADAM_BETA1 ** step
            bc2 = 1.0 - _ADAM_BETA2 ** step
            for name in shapes:
                g = grads[name]
                m_state[name] = _ADAM_BETA1 * m_state[name] + (1 - _ADAM_BETA1) * g
                v_state[name] = _ADAM_BETA2 * v_state[name] + (1 - _ADAM_BETA2) * g * g
                update = (m_state[name] / bc1) / (
                    np.sqrt(v_state[name] / bc2) + _ADAM_EPS)
                params[name] = params[name] - config.learning_rate * update
                if not np.all(np.isfinite(v_state[name])):
                    # squared gradients overflowed; updates would silently
                    # collapse to zero from here on
                    raise TrainingDivergedError(
                        f"optimizer state overflowed in {name} "
                        f"at epoch {epoch}")
            model = AttentionEncoderModel(config=config, params=params,
                                          pca_models=pca_models or {},
                                          lag_config=lag_config)
            epoch_loss += batch_loss
            n_batches += 1

        train_mse = loss(model, xv, xa, y, mode="eval")
        val_mse = loss(model, val_visual, val_audio, val_targets, mode="eval")
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        log.append((epoch, train_mse, val_mse))
        if val_mse < best_val:
            best_val = val_mse
            best_params = {k: p.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    best_model = AttentionEncoderModel(config=config, params=best_params,
                                       pca_models=pca_models or {},
                                       lag_config=lag_config)
    return best_model, log


def write_training_log(log, path) -> None:
    lines = ["epoch,train_mse,val_mse"]
    for epoch, train_mse, val_mse in log:
        lines.append(f"{epoch},{train_mse:.17g},{val_mse:.17g}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Windows from lagged designs

def windows_from_design(design_values, n_lags: int, d_visual: int,
                        d_audio: int):
    """Split flat design rows back into per-modality lag windows.

    The design row layout is [visual lags (most recent first), audio lags];
    windows keep that slot order along the lag axis.
    """
    x = np.asarray(design_values, dtype=np.float64)
    expected = n_lags * (d_visual + d_audio)
    if x.ndim != 2 or x.shape[1] != expected:
        raise DataError(f"design rows must have width {expected}")
    n = x.shape[0]
    xv = x[:, :n_lags * d_visual].reshape(n, n_lags, d_visual)
    xa = x[:, n_lags * d_visual:].reshape(n, n_lags, d_audio)
    return xv, xa


def fit_attention_pipeline(features, bold, k_per_modality: dict,
                           config: AttentionConfig, lag_config: LagConfig,
                           val_fraction: float = 0.2):
    """PCA-reduce, lag, window, and train on an ordered source corpus.

    The validation set is the trailing val_fraction of the stacked rows
    (a temporal hold-out, not a random shuffle, to avoid leakage through
    temporally adjacent samples).
    """
    if lag_config.include_lag0:
        raise DataError("attention windows do not support include_lag0")
    sources = list(features)
    if not sources:
        raise DataError("empty training corpus")
    pca_models = {}
    for modality in lag_config.modality_order:
        stacked = np.vstack([features[sid][modality].values
                             for sid in sources])
        pca_models[modality] = pca_fit(stacked, k_per_modality[modality])

    xv_blocks, xa_blocks, y_blocks = [], [], []
    for sid in sources:
        design = build_reduced_design(pca_models, features[sid], lag_config)
        _, targets = align_targets(design, bold[sid])
        xv, xa = windows_from_design(
            design.values, lag_config.n_lags,
            pca_models["visual"].k, pca_models["audio"].k)
        xv_blocks.append(xv)
        xa_blocks.append(xa)
        y_blocks.append(targets)
    xv = np.concatenate(xv_blocks)
    xa = np.concatenate(xa_blocks)
    y = np.concatenate(y_blocks)

    n_val = max(1, int(round(val_fraction * xv.shape[0])))
    if n_val >= xv.shape[0]:
        raise DataError("validation fraction leaves no training rows")
    split = xv.shape[0] - n_val
    model, log = train(
        config,
        xv[:split], xa[:split], y[:split],
        xv[split:], xa[split:], y[split:],
        pca_models=pca_models, lag_config=lag_config)
    return model, log


def predict_from_features(model: AttentionEncoderModel,
                          features_by_modality: dict):
    """Predict one source's parcel responses from raw features.

    Returns (target_index, rows x P prediction matrix), eval mode.
    """
    if model.lag_config is None:
        raise DataError("model lacks input-preparation state")
    design = build_reduced_design(model.pca_models, features_by_modality,
                                  model.lag_config)
    xv, xa = windows_from_design(
        design.values, model.lag_config.n_lags,
        model.config.d_visual, model.config.d_audio)
    pred, _ = forward_batch(model, xv, xa, mode="eval")
    return design.target_index, pred


# ---------------------------------------------------------------------------
# NMEA model bundle

def _pack_config(cfg: AttentionConfig) -> bytes:
    vec_code = 0 if cfg.vectorize == "flatten" else 1
    return struct.pack(
        "<IIIIIIIIBddqdIII",
        cfg.n_lags, cfg.d_visual, cfg.d_audio, cfg.n_parcels,
        cfg.n_heads, cfg.d_model,
        cfg.head_hidden_dims[0], cfg.head_hidden_dims[1],
        vec_code, cfg.gate_bottleneck_ratio, cfg.dropout_rate,
        cfg.seed, cfg.learning_rate,
        cfg.batch_size, cfg.max_epochs, cfg.patience,
    )


def _read_config(r: _Reader) -> AttentionConfig:
    (n_lags, d_visual, d_audio, n_parcels, n_heads, d_model,
     h1, h2, vec_code, ratio, dropout, seed, lr,
     batch_size, max_epochs, patience) = r.unpack("<IIIIIIIIBddqdIII")
    if vec_code > 1:
        raise FormatError(f"{r.path}: unknown vectorize code {vec_code}")
    try:
        return AttentionConfig(
            n_lags=n_lags, d_visual=d_visual, d_audio=d_audio,
            n_parcels=n_parcels, n_heads=n_heads, d_model=d_model,
            head_hidden_dims=(h1, h2),
            vectorize="flatten" if vec_code == 0 else "mean",
            gate_bottleneck_ratio=ratio, dropout_rate=dropout,
            seed=seed, learning_rate=lr, batch_size=batch_size,
            max_epochs=max_epochs, patience=patience,
        )
    except DataError as exc:
        raise FormatError(f"{r.path}: {exc}") from exc


def save_attention_model(model: AttentionEncoderModel, path) -> None:
    """Write the NMEA model bundle (f64 little-endian tensors)."""
    if model.lag_config is None:
        raise DataError("model has no lag_config; fit via the pipeline "
                        "to serialize")
    out = struct.pack("<4sH", _NMEA_MAGIC, _NMEA_VERSION)
    out += _pack_config(model.config)
    out += _pack_lag_config(model.lag_config)
    out += struct.pack("<B", len(model.pca_models))
    for modality in model.lag_config.modality_order:
        if modality in model.pca_models:
            out += _pack_pca_block(modality, model.pca_models[modality])
    for name in param_shapes(model.config):
        out += np.ascontiguousarray(model.params[name], "<f8").tobytes()
    atomic_write_bytes(path, out)


def load_attention_model(path) -> AttentionEncoderModel:
    """Read an NMEA model bundle, rejecting malformed files."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw, path)
    magic, version = r.unpack("<4sH")
    if magic != _NMEA_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _NMEA_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config = _read_config(r)
    lag_config = _read_lag_config(r)
    (n_pca,) = r.unpack("<B")
    pca_models = {}
    for _ in range(n_pca):
        modality, pm = _read_pca_block(r)
        pca_models[modality] = pm
    params = {}
    for name, shape in param_shapes(config).items():
        params[name] = r.array(int(np.prod(shape)), shape)
    r.expect_end()
    try:
        return AttentionEncoderModel(config=config, params=params,
                                     pca_models=pca_models,
                                     lag_config=lag_config)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc
