from __future__ import annotations

import numpy as np
import pytest

from mixgraph import metrics as M
from mixgraph.console import SessionManifest, TrackEntry, build_console
from mixgraph.graph import bypass_remove


def sine_stereo(freq=300.0, amp=0.4, seconds=16.0, sr=30_000):
    # 300 Hz gives an exact 100-sample period, so the peak is sampled exactly
    t = np.arange(int(seconds * sr)) / sr
    sig = amp * np.sin(2 * np.pi * freq * t)
    return np.stack([sig, sig])


def test_crest_factor_sine_and_square():
    y = sine_stereo()
    seg = M.split_segments(y)[0]
    np.testing.assert_allclose(M.feature_crest(seg)[0], np.sqrt(2.0), atol=1e-6)
    square = 0.3 * np.where(sine_stereo() >= 0, 1.0, -1.0)  # constant amplitude
    seg = M.split_segments(square)[0]
    np.testing.assert_allclose(M.feature_crest(seg)[0], 1.0, atol=1e-6)


def test_stereo_width_of_dual_mono_is_zero():
    seg = M.split_segments(sine_stereo())[0]
    assert M.feature_stereo_width(seg)[0] == 0.0


def test_stereo_imbalance_negates_on_swap(rng):
    y = rng.standard_normal((2, 240_000)) * np.array([[0.2], [0.7]])
    seg = M.split_segments(y)[0]
    si = M.feature_stereo_imbalance(seg)[0]
    si_swapped = M.feature_stereo_imbalance(seg[::-1])[0]
    np.testing.assert_allclose(si_swapped, -si, rtol=1e-12)
    assert si > 0  # right channel is louder


def test_features_finite_on_silence():
    seg = np.zeros((2, 240_000))
    for name, fn in M.FEATURES.items():
        vals = fn(seg)
        assert np.all(np.isfinite(vals)), name


def test_mir_distance_identity_floor(rng):
    y = rng.standard_normal((2, 240_000)) * 0.2
    for name in M.FEATURES:
        assert M.mir_distance(y, y, name) == -12.0


def test_mir_distance_symmetry(rng):
    y = 0.2 * rng.standard_normal((2, 480_000))
    y_hat = 0.2 * rng.standard_normal((2, 480_000))
    for name in M.FEATURES:
        np.testing.assert_allclose(M.mir_distance(y, y_hat, name),
                                   M.mir_distance(y_hat, y, name), rtol=1e-12)


def test_mir_rms_doubled_sine_closed_form():
    amp = 0.4
    y = sine_stereo(amp=amp)
    d = M.mir_distance(y, 2 * y, "rms")
    # mid = 2*amp*sin, rms = amp*sqrt(2); error per segment = rms itself
    expected = np.log10((amp * np.sqrt(2.0)) ** 2)
    np.testing.assert_allclose(d, expected, atol=1e-6)


def test_mir_distance_too_short(rng):
    with pytest.raises(M.TooShort):
        M.mir_distance(rng.standard_normal((2, 1000)), rng.standard_normal((2, 1000)), "rms")


def test_si_sdr_identity_is_capped(rng):
    y = 0.3 * rng.standard_normal((2, 30_000))
    assert M.si_sdr(y, y) == 100.0


def test_si_sdr_scale_invariance(rng):
    y = 0.3 * rng.standard_normal((2, 30_000))
    noisy = y + 0.01 * rng.standard_normal(y.shape)
    np.testing.assert_allclose(M.si_sdr(y, noisy), M.si_sdr(y, 3 * noisy), rtol=1e-9)
    assert M.si_sdr(y, 3 * y) == M.si_sdr(y, y) == 100.0


def test_si_sdr_equal_energy_orthogonal_noise_is_zero_db(rng):
    y = rng.standard_normal(60_000)
    noise = rng.standard_normal(60_000)
    noise -= (np.dot(noise, y) / np.dot(y, y)) * y  # orthogonalize
    noise *= np.linalg.norm(y) / np.linalg.norm(noise)
    y2 = np.stack([y[:30_000], y[30_000:]])
    n2 = np.stack([noise[:30_000], noise[30_000:]])
    np.testing.assert_allclose(M.si_sdr(y2, y2 + n2), 0.0, atol=1e-9)


def test_si_sdr_zero_target():
    with pytest.raises(M.ZeroTarget):
        M.si_sdr(np.zeros((2, 100)), np.ones((2, 100)))


def test_spearman():
    x = [1.0, 2.0, 3.0, 4.0]
    np.testing.assert_allclose(M.spearman(x, [2.0, 4.0, 6.0, 8.0]), 1.0, rtol=1e-12)
    np.testing.assert_allclose(M.spearman(x, [8.0, 6.0, 4.0, 2.0]), -1.0, rtol=1e-12)
    assert M.spearman(x, [1.0, 1.0, 1.0, 1.0]) == 0.0


def console_pair(k=3, s=2):
    groups = [f"bus{j}" for j in range(s)]
    tracks = [TrackEntry(f"t{i}.wav", f"t{i}", groups[i % s]) for i in range(k)]
    return build_console(SessionManifest(tracks, "mix.wav"))


def test_consistency_identical_graphs_score_one(rng):
    graph, params = console_pair()
    drop = set(list(graph.processor_nodes())[::3])
    g, _ = bypass_remove(graph, params, drop)
    score = M.consistency_score(g, g)
    assert score["micro"]["accuracy"] == 1.0
    assert score["micro"]["f1"] == 1.0
    for tag, row in score["per_type"].items():
        assert row["precision"] == row["recall"] == 1.0


def test_consistency_base_vs_full_console():
    graph, params = console_pair()
    base, _ = bypass_remove(graph, params, set(graph.processor_nodes()))
    score = M.consistency_score(graph, base)
    assert score["micro"]["recall"] == 0.0
    assert score["micro"]["precision"] == 1.0  # vacuous: nothing predicted


def test_consistency_hand_case():
    graph, params = console_pair(k=2, s=1)
    # true graph keeps only track-0 equalizer; estimate keeps track-0 e and c
    procs = graph.processor_nodes()
    keep_true = {v for v in procs if graph.node_types[v] == "e" and v == procs[0]}
    keep_est = set(procs[:2])  # e and c of track 0
    g_true, _ = bypass_remove(graph, params, set(procs) - keep_true)
    g_est, _ = bypass_remove(graph, params, set(procs) - keep_est)
    score = M.consistency_score(g_true, g_est)
    e_row = score["per_type"]["e"]
    assert e_row["recall"] == 1.0 and e_row["precision"] == 1.0
    c_row = score["per_type"]["c"]
    assert c_row["precision"] == 0.0 and c_row["accuracy"] == 2 / 3


def test_consistency_incompatible():
    g1, _ = console_pair(k=2, s=1)
    g2, _ = console_pair(k=3, s=1)
    with pytest.raises(M.IncompatibleConsoles):
        M.consistency_score(g1, g2)


def test_bark_spectrum_dimension(rng):
    seg = 0.1 * rng.standard_normal((2, 240_000))
    assert M.feature_bark_spectrum(seg).shape == (24,)
