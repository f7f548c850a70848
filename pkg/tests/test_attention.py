import math

import numpy as np
import pytest

from nmenc.attention import (
    AttentionConfig,
    AttentionEncoderModel,
    TrainingDivergedError,
    attention_weights,
    backward,
    forward,
    forward_batch,
    gate_forward,
    init_params,
    load_attention_model,
    loss,
    mha_forward,
    param_count,
    param_shapes,
    save_attention_model,
    train,
)
from nmenc.io import DataError
from nmenc.lagged import LagConfig


def tiny_config(**overrides):
    base = dict(n_lags=3, d_visual=4, d_audio=4, n_parcels=5, n_heads=2,
                d_model=4, head_hidden_dims=(6, 4), dropout_rate=0.0, seed=0)
    base.update(overrides)
    return AttentionConfig(**base)


def tiny_model(seed=0, **overrides):
    cfg = tiny_config(seed=seed, **overrides)
    return AttentionEncoderModel(config=cfg, params=init_params(cfg))


def naive_mha_oracle(params, prefix, x):
    """Dense per-head recomputation with explicit loops."""
    w_q = params[f"{prefix}.mha.w_q"]
    w_k = params[f"{prefix}.mha.w_k"]
    w_v = params[f"{prefix}.mha.w_v"]
    w_o = params[f"{prefix}.mha.w_o"]
    n_heads, _, d_head = w_q.shape
    n = x.shape[0]
    head_outs = []
    for h in range(n_heads):
        q, k, v = x @ w_q[h], x @ w_k[h], x @ w_v[h]
        out = np.zeros_like(q)
        for i in range(n):
            scores = np.array([q[i] @ k[j] / math.sqrt(d_head)
                               for j in range(n)])
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            for j in range(n):
                out[i] += a[j] * v[j]
        head_outs.append(out)
    concat = np.concatenate(head_outs, axis=1)
    resid = x + concat @ w_o
    gain = params[f"{prefix}.mha.ln_gain"]
    shift = params[f"{prefix}.mha.ln_shift"]
    out = np.empty_like(resid)
    for i in range(n):
        row = resid[i]
        mu, var = row.mean(), row.var()
        out[i] = gain * (row - mu) / math.sqrt(var + 1e-5) + shift
    return out


def test_mha_single_timestep_attention_is_one():
    model = tiny_model(seed=1)
    cfg = model.config
    x = np.random.default_rng(2).normal(size=(1, cfg.d_model))
    attn = attention_weights(model, "visual", x)
    np.testing.assert_array_equal(attn, np.ones((cfg.n_heads, 1, 1)))
    out = mha_forward(model, "visual", x)
    np.testing.assert_allclose(out, naive_mha_oracle(model.params, "visual", x),
                               atol=1e-12)


def test_identical_rows_give_uniform_attention():
    model = tiny_model(seed=3)
    row = np.random.default_rng(4).normal(size=model.config.d_model)
    x = np.tile(row, (3, 1))
    attn = attention_weights(model, "audio", x)
    np.testing.assert_allclose(attn, 1.0 / 3.0, atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_mha_matches_naive_oracle(seed):
    cfg = tiny_config(n_lags=4, d_model=8, n_heads=2, d_visual=8, d_audio=8)
    model = AttentionEncoderModel(config=cfg, params=init_params(cfg))
    x = np.random.default_rng(seed).normal(size=(4, 8))
    out = mha_forward(model, "visual", x)
    assert np.max(np.abs(out - naive_mha_oracle(model.params, "visual", x))) <= 1e-10


def test_softmax_rows_sum_to_one():
    model = tiny_model(seed=5)
    rng = np.random.default_rng(6)
    for _ in range(10):
        attn = attention_weights(model, "visual",
                                 rng.normal(size=(3, 4)) * 10)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_mha_permutation_equivariance():
    model = tiny_model(seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4))
    perm = [2, 0, 1]
    out = mha_forward(model, "visual", x)
    out_perm = mha_forward(model, "visual", x[perm])
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


def test_gate_zero_params_halves_input():
    cfg = tiny_config()
    params = init_params(cfg)
    for name in ("gate.w1", "gate.b1", "gate.w2", "gate.b2"):
        params[name] = np.zeros_like(params[name])
    model = AttentionEncoderModel(config=cfg, params=params)
    fused = np.random.default_rng(9).normal(size=cfg.fused_dim)
    np.testing.assert_allclose(gate_forward(model, fused), 0.5 * fused,
                               atol=1e-15)


def test_gate_saturation_passes_input_through():
    cfg = tiny_config()
    params = init_params(cfg)
    params["gate.b2"] = np.full_like(params["gate.b2"], 50.0)
    params["gate.w1"] = np.zeros_like(params["gate.w1"])
    params["gate.w2"] = np.zeros_like(params["gate.w2"])
    model = AttentionEncoderModel(config=cfg, params=params)
    fused = np.random.default_rng(10).normal(size=cfg.fused_dim)
    np.testing.assert_allclose(gate_forward(model, fused), fused, rtol=1e-8)


def test_gate_matches_scalar_oracle():
    cfg = tiny_config(n_lags=1, d_model=6, n_heads=2, d_visual=3, d_audio=3)
    assert cfg.fused_dim == 12
    model = AttentionEncoderModel(config=cfg, params=init_params(cfg))
    p = model.params
    fused = np.random.default_rng(11).normal(size=12)
    got = gate_forward(model, fused)
    hidden = [max(0.0, sum(fused[i] * p["gate.w1"][i, j] for i in range(12))
                  + p["gate.b1"][j]) for j in range(cfg.gate_bottleneck)]
    for idx in range(12):
        logit = sum(hidden[j] * p["gate.w2"][j, idx]
                    for j in range(cfg.gate_bottleneck)) + p["gate.b2"][idx]
        g = 1.0 / (1.0 + math.exp(-logit))
        assert got[idx] == pytest.approx(fused[idx] * g, abs=1e-12)
        assert 0.0 < g < 1.0


def test_gate_preserves_sign_pattern():
    model = tiny_model(seed=12)
    fused = np.random.default_rng(13).normal(size=model.config.fused_dim)
    out = gate_forward(model, fused)
    np.testing.assert_array_equal(np.sign(out), np.sign(fused))


def test_forward_all_zero_params_returns_output_bias():
    cfg = tiny_config()
    params = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    params["head.b3"] = np.arange(cfg.n_parcels, dtype=float)
    model = AttentionEncoderModel(config=cfg, params=params)
    rng = np.random.default_rng(14)
    out = forward(model, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(out, params["head.b3"])


def test_eval_forward_bit_deterministic():
    model = tiny_model(seed=15, dropout_rate=0.5)
    rng = np.random.default_rng(16)
    xv, xa = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    a, _ = forward_batch(model, xv, xa, mode="eval")
    b, _ = forward_batch(model, xv, xa, mode="eval")
    assert np.array_equal(a, b)


def test_forward_layer_by_layer_oracle():
    cfg = tiny_config(n_lags=3, d_visual=4, d_audio=4, d_model=4, n_parcels=5)
    model = AttentionEncoderModel(config=cfg, params=init_params(cfg))
    p = model.params
    rng = np.random.default_rng(17)
    xv, xa = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))

    vecs = []
    for mod, x in (("visual", xv), ("audio", xa)):
        h0 = x @ p[f"{mod}.in_proj.w"] + p[f"{mod}.in_proj.b"]
        vecs.append(naive_mha_oracle(p, mod, h0).ravel())
    fused = np.concatenate(vecs)
    hidden = np.maximum(0.0, fused @ p["gate.w1"] + p["gate.b1"])
    gate = 1.0 / (1.0 + np.exp(-(hidden @ p["gate.w2"] + p["gate.b2"])))
    gated = fused * gate
    h1 = np.maximum(0.0, gated @ p["head.w1"] + p["head.b1"])
    h2 = np.maximum(0.0, h1 @ p["head.w2"] + p["head.b2"])
    expected = h2 @ p["head.w3"] + p["head.b3"]
    np.testing.assert_allclose(forward(model, xv, xa), expected, atol=1e-10)


def test_loss_examples():
    model = tiny_model(seed=18)
    rng = np.random.default_rng(19)
    xv, xa = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    pred, _ = forward_batch(model, xv, xa)
    assert loss(model, xv, xa, pred) == 0.0
    # constant-zero model vs unit targets
    cfg = model.config
    zeros = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    zmodel = AttentionEncoderModel(config=cfg, params=zeros)
    assert loss(zmodel, xv, xa, np.ones((3, cfg.n_parcels))) == 1.0
    # random case vs scalar oracle
    y = rng.normal(size=pred.shape)
    manual = sum((pred[i, j] - y[i, j]) ** 2
                 for i in range(3) for j in range(cfg.n_parcels))
    assert loss(model, xv, xa, y) == pytest.approx(
        manual / (3 * cfg.n_parcels), rel=1e-12)


def test_zero_loss_gradients_vanish():
    model = tiny_model(seed=20)
    rng = np.random.default_rng(21)
    xv, xa = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    pred, _ = forward_batch(model, xv, xa)
    value, grads = backward(model, xv, xa, pred)
    assert value == 0.0
    for g in grads.values():
        assert np.max(np.abs(g)) <= 1e-12


def test_output_bias_gradient_is_mean_residual():
    model = tiny_model(seed=22)
    rng = np.random.default_rng(23)
    xv, xa = rng.normal(size=(4, 3, 4)), rng.normal(size=(4, 3, 4))
    y = rng.normal(size=(4, 5))
    pred, _ = forward_batch(model, xv, xa)
    _, grads = backward(model, xv, xa, y)
    expected = 2.0 * (pred - y).mean(axis=0) / 5
    np.testing.assert_allclose(grads["head.b3"], expected, atol=1e-14)


def finite_difference_check(model, xv, xa, y, n_per_tensor=4, step=1e-5):
    _, grads = backward(model, xv, xa, y)
    cfg = model.config
    rng = np.random.default_rng(99)
    worst = 0.0
    n_checked = 0
    for name in param_shapes(cfg):
        flat = model.params[name].ravel()
        idxs = rng.choice(flat.size, size=min(n_per_tensor, flat.size),
                          replace=False)
        for idx in idxs:
            params2 = {k: v.copy() for k, v in model.params.items()}
            params2[name].ravel()[idx] += step
            lp = loss(AttentionEncoderModel(config=cfg, params=params2), xv, xa, y)
            params2[name].ravel()[idx] -= 2 * step
            lm = loss(AttentionEncoderModel(config=cfg, params=params2), xv, xa, y)
            fd = (lp - lm) / (2 * step)
            g = grads[name].ravel()[idx]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
            n_checked += 1
    return worst, n_checked


def test_gradients_match_finite_differences():
    model = tiny_model(seed=24)
    rng = np.random.default_rng(25)
    xv, xa = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    y = rng.normal(size=(3, 5))
    worst, _ = finite_difference_check(model, xv, xa, y)
    assert worst <= 1e-4


def test_gradients_with_fixed_dropout_mask():
    model = tiny_model(seed=26, dropout_rate=0.4)
    rng = np.random.default_rng(27)
    xv, xa = rng.normal(size=(3, 3, 4)), rng.normal(size=(3, 3, 4))
    y = rng.normal(size=(3, 5))
    # identical rng state in forward and backward fixes the masks
    _, grads = backward(model, xv, xa, y, mode="train",
                        dropout_rng=np.random.default_rng(1))
    step = 1e-5
    worst = 0.0
    for name in ("head.w2", "head.b1"):
        flat = model.params[name].ravel()
        for idx in (0, 1):
            params2 = {k: v.copy() for k, v in model.params.items()}
            params2[name].ravel()[idx] += step
            lp = loss(AttentionEncoderModel(config=model.config, params=params2),
                      xv, xa, y, mode="train", dropout_rng=np.random.default_rng(1))
            params2[name].ravel()[idx] -= 2 * step
            lm = loss(AttentionEncoderModel(config=model.config, params=params2),
                      xv, xa, y, mode="train", dropout_rng=np.random.default_rng(1))
            fd = (lp - lm) / (2 * step)
            g = grads[name].ravel()[idx]
            worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
    assert worst <= 1e-4


def test_param_count_formula():
    for cfg in (tiny_config(),
                tiny_config(n_lags=5, d_visual=7, d_audio=3, d_model=8,
                            n_heads=4, head_hidden_dims=(10, 9), n_parcels=11),
                tiny_config(vectorize="mean")):
        params = init_params(cfg)
        assert sum(v.size for v in params.values()) == param_count(cfg)


def test_init_determinism_and_config_validation():
    a = init_params(tiny_config(seed=31))
    b = init_params(tiny_config(seed=31))
    for k in a:
        assert np.array_equal(a[k], b[k])
    with pytest.raises(DataError):
        tiny_config(d_model=5, n_heads=2)
    with pytest.raises(DataError):
        tiny_config(dropout_rate=1.0)
    with pytest.raises(DataError):
        tiny_config(gate_bottleneck_ratio=0.0)


def _toy_training_data(n=32, seed=0):
    cfg = tiny_config(seed=seed, learning_rate=3e-3, batch_size=8,
                      max_epochs=60, patience=60)
    rng = np.random.default_rng(seed + 100)
    xv = rng.normal(size=(n, cfg.n_lags, cfg.d_visual))
    xa = rng.normal(size=(n, cfg.n_lags, cfg.d_audio))
    w = rng.normal(size=(cfg.n_lags * cfg.d_visual, cfg.n_parcels))
    y = xv.reshape(n, -1) @ w * 0.3
    return cfg, xv, xa, y


def test_training_reduces_loss_and_is_deterministic():
    cfg, xv, xa, y = _toy_training_data()
    m1, log1 = train(cfg, xv[:24], xa[:24], y[:24], xv[24:], xa[24:], y[24:])
    m2, log2 = train(cfg, xv[:24], xa[:24], y[:24], xv[24:], xa[24:], y[24:])
    assert log1 == log2
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])
    assert log1[-1][1] < log1[0][1]


def test_patience_zero_stops_after_first_non_improvement():
    cfg, xv, xa, y = _toy_training_data()
    cfg = AttentionConfig(**{**cfg.__dict__, "patience": 0, "max_epochs": 200})
    _, log = train(cfg, xv[:24], xa[:24], y[:24], xv[24:], xa[24:], y[24:])
    vals = [row[2] for row in log]
    # every epoch but the last improved on the best so far
    best = math.inf
    for v in vals[:-1]:
        assert v < best
        best = min(best, v)
    assert len(log) == 200 or vals[-1] >= best


def test_training_divergence_reported():
    cfg, xv, xa, y = _toy_training_data()
    cfg = AttentionConfig(**{**cfg.__dict__, "learning_rate": 1e12})
    with np.errstate(over="ignore"), \
            pytest.raises((TrainingDivergedError, DataError)):
        train(cfg, xv[:24], xa[:24], y[:24] * 1e150,
              xv[24:], xa[24:], y[24:] * 1e150)


def test_bundle_round_trip(tmp_path):
    cfg, xv, xa, y = _toy_training_data(seed=2)
    cfg = AttentionConfig(**{**cfg.__dict__, "max_epochs": 2})
    model, _ = train(cfg, xv[:24], xa[:24], y[:24], xv[24:], xa[24:], y[24:],
                     lag_config=LagConfig(n_lags=cfg.n_lags))
    path = tmp_path / "model.nmea"
    save_attention_model(model, path)
    back = load_attention_model(path)
    assert back.config == model.config
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    rng = np.random.default_rng(3)
    probe_v = rng.normal(size=(2, cfg.n_lags, cfg.d_visual))
    probe_a = rng.normal(size=(2, cfg.n_lags, cfg.d_audio))
    p1, _ = forward_batch(model, probe_v, probe_a)
    p2, _ = forward_batch(back, probe_v, probe_a)
    assert np.array_equal(p1, p2)
