from __future__ import annotations

import numpy as np
import pytest

from conftest import grad_vs_fd
from mixgraph import engine as E
from mixgraph import losses as L
from mixgraph import processors as P
from mixgraph.scheduler import LengthMismatch


def oracle_mel_spec(x, n_fft, cfg):
    """Independent spectrogram implementation (no engine ops)."""
    hop = n_fft // 4
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (xp.size - n_fft) // hop
    t = np.arange(n_fft)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * t / n_fft)
    frames = np.stack([xp[m * hop:m * hop + n_fft] * win for m in range(n_frames)])
    mag = np.abs(np.fft.rfft(frames, axis=-1))
    fb = L.mel_filterbank(n_fft, cfg.sample_rate, cfg.mel_bins, cfg.mel_fmax)
    gains = L.a_weight_gains(n_fft, cfg.sample_rate) if cfg.a_weighting else 1.0
    return (mag * gains) @ fb.T


def oracle_mrstft(y_hat, y, cfg):
    groups_hat = {"lr0": y_hat[0], "lr1": y_hat[1],
                  "m": y_hat[0] + y_hat[1], "s": y_hat[0] - y_hat[1]}
    groups_ref = {"lr0": y[0], "lr1": y[1], "m": y[0] + y[1], "s": y[0] - y[1]}
    per_group = {}
    for g in groups_hat:
        acc = 0.0
        for n_fft in cfg.fft_sizes:
            mh = oracle_mel_spec(groups_hat[g], n_fft, cfg)
            mr = oracle_mel_spec(groups_ref[g], n_fft, cfg)
            log_term = np.abs(np.log(mh + L.LOG_EPS) - np.log(mr + L.LOG_EPS)).sum() / mh.shape[0]
            sc = np.linalg.norm(mh - mr) / max(np.linalg.norm(mr), L.NORM_EPS)
            acc += log_term + sc
        per_group[g] = acc
    return (cfg.weight_lr * (per_group["lr0"] + per_group["lr1"]) / 2
            + cfg.weight_mid * per_group["m"] + cfg.weight_side * per_group["s"])


def music_like(rng, length=4000):
    t = np.arange(length) / 30000.0
    sig = 0.3 * np.sin(2 * np.pi * 220 * t) + 0.1 * np.sin(2 * np.pi * 931 * t)
    sig = sig * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t) ** 2)
    noise = 0.02 * rng.standard_normal((2, length))
    return np.stack([sig, 0.8 * sig]) + noise


def test_identical_signals_have_zero_loss(rng):
    y = music_like(rng)
    assert float(E.value_of(L.mrstft(y, y))) == 0.0


def test_doubled_signal_matches_oracle(rng):
    cfg = L.LossConfig()
    y = music_like(rng)
    got = float(E.value_of(L.mrstft(2 * y, y, cfg)))
    want = oracle_mrstft(2 * y, y, cfg)
    np.testing.assert_allclose(got, want, rtol=1e-10)
    assert got > 0.1


def test_matches_oracle_on_random_pair(rng):
    cfg = L.LossConfig()
    y = music_like(rng)
    y_hat = music_like(rng) + 0.05 * rng.standard_normal(y.shape)
    got = float(E.value_of(L.mrstft(y_hat, y, cfg)))
    np.testing.assert_allclose(got, oracle_mrstft(y_hat, y, cfg), rtol=1e-10)


def test_mono_estimate_of_wide_target_is_dominated_by_side_term(rng):
    length = 6000
    left = 0.4 * rng.standard_normal(length)
    right = 0.4 * rng.standard_normal(length)  # decorrelated: wide stereo
    y = np.stack([left, right])
    mono = (left + right) / 2
    y_hat = np.stack([mono, mono])
    cfg = L.LossConfig()

    # compare the raw per-group contributions through the oracle decomposition
    mid_hat, side_hat = y_hat[0] + y_hat[1], y_hat[0] - y_hat[1]
    mid_ref, side_ref = y[0] + y[1], y[0] - y[1]
    side_term = sum(
        np.abs(np.log(oracle_mel_spec(side_hat, n, cfg) + L.LOG_EPS)
               - np.log(oracle_mel_spec(side_ref, n, cfg) + L.LOG_EPS)).sum()
        / oracle_mel_spec(side_hat, n, cfg).shape[0]
        + np.linalg.norm(oracle_mel_spec(side_hat, n, cfg) - oracle_mel_spec(side_ref, n, cfg))
        / np.linalg.norm(oracle_mel_spec(side_ref, n, cfg))
        for n in cfg.fft_sizes
    )
    mid_term = sum(
        np.abs(np.log(oracle_mel_spec(mid_hat, n, cfg) + L.LOG_EPS)
               - np.log(oracle_mel_spec(mid_ref, n, cfg) + L.LOG_EPS)).sum()
        / oracle_mel_spec(mid_hat, n, cfg).shape[0]
        + np.linalg.norm(oracle_mel_spec(mid_hat, n, cfg) - oracle_mel_spec(mid_ref, n, cfg))
        / np.linalg.norm(oracle_mel_spec(mid_ref, n, cfg))
        for n in cfg.fft_sizes
    )
    assert side_term > 3 * mid_term


def test_length_mismatch(rng):
    y = music_like(rng)
    with pytest.raises(LengthMismatch):
        L.mrstft(y[:, :-10], y)


def test_a_weighting_swap_keeps_zero_moves_value(rng):
    y = music_like(rng)
    y_hat = 1.5 * y
    on = L.LossConfig(a_weighting=True)
    off = L.LossConfig(a_weighting=False)
    assert float(E.value_of(L.mrstft(y, y, on))) == 0.0
    assert float(E.value_of(L.mrstft(y, y, off))) == 0.0
    v_on = float(E.value_of(L.mrstft(y_hat, y, on)))
    v_off = float(E.value_of(L.mrstft(y_hat, y, off)))
    assert v_on > 0 and v_off > 0 and abs(v_on - v_off) > 1e-6


def test_loss_nonnegative_and_zero_only_at_match(rng):
    y = music_like(rng)
    assert float(E.value_of(L.mrstft(y + 0.01 * rng.standard_normal(y.shape), y))) > 0


def test_mel_filterbank_invariants():
    for n_fft in (512, 1024, 4096):
        fb = L.mel_filterbank(n_fft)
        assert np.all(fb.sum(axis=1) > 0), "zero row"
        freqs = np.fft.rfftfreq(n_fft, d=1.0 / 30000)
        below = freqs < 15000
        assert np.all(fb.sum(axis=0)[below] > 0), "uncovered bin below Nyquist"


def test_a_weight_curve_reference_points():
    gains = L.a_weight_gains(4096)
    freqs = np.fft.rfftfreq(4096, d=1.0 / 30000)
    at_1k = gains[np.argmin(np.abs(freqs - 1000))]
    np.testing.assert_allclose(at_1k, 1.0, atol=0.01)  # 0 dB at 1 kHz
    assert gains[0] == 0.0
    at_100 = gains[np.argmin(np.abs(freqs - 100))]
    assert 10 ** (-25 / 20) < at_100 < 10 ** (-15 / 20)  # about -19 dB


def test_mrstft_gradient_fd(rng):
    y = music_like(rng, length=1500)

    def loss(t, p):
        return L.mrstft(E.reshape(p, y.shape), y)

    p0 = y * 1.3 + 0.01 * rng.standard_normal(y.shape)
    assert grad_vs_fd(loss, p0, n_probes=12, rng=rng) < 1e-4


def test_gain_staging_loss_values(rng):
    u = 0.4 * rng.standard_normal((1, 2, 800))
    flat, _ = P.equalizer(u, np.zeros((1, P.EQ_BINS)))
    boosted, _ = P.equalizer(u, np.full((1, P.EQ_BINS), np.log(2.0)))
    assert abs(float(E.value_of(L.gain_staging_loss([(u, flat)])))) < 1e-9
    np.testing.assert_allclose(
        float(E.value_of(L.gain_staging_loss([(u, boosted)]))), np.log(2.0), atol=1e-6)


def test_gain_staging_silent_input_guarded():
    u = np.zeros((1, 2, 500))
    ybar = np.zeros((1, 2, 500))
    assert float(E.value_of(L.gain_staging_loss([(u, ybar)]))) == 0.0


def test_gain_staging_scale_invariant_for_lti(rng):
    u = 0.4 * rng.standard_normal((1, 2, 800))
    p = 0.2 * rng.standard_normal((1, P.EQ_BINS))
    y1, _ = P.equalizer(u, p)
    y2, _ = P.equalizer(5.0 * u, p)
    a = float(E.value_of(L.gain_staging_loss([(u, y1)])))
    b = float(E.value_of(L.gain_staging_loss([(5.0 * u, y2)])))
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_sparsity_loss(rng):
    assert float(E.value_of(L.sparsity_loss(np.zeros(5)))) == 0.0
    assert float(E.value_of(L.sparsity_loss(np.ones(7)))) == 7.0
    w = rng.uniform(0, 1, 9)
    np.testing.assert_allclose(float(E.value_of(L.sparsity_loss(w))), w.sum())


def test_loss_config_validates_weights():
    with pytest.raises(ValueError):
        L.LossConfig(weight_lr=0.5, weight_mid=0.5, weight_side=0.5)
