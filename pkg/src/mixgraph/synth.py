"""Synthetic multitrack sessions with planted ground-truth mixing graphs.

Generates dry stems (tonal, noise, or percussive material with rhythmic
envelopes), picks a sparse subset of console slots, samples strong but
bounded parameters for them, renders the target mix through that planted
graph, and writes everything to disk alongside the ground-truth graph file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine as E
from .audio_io import write_wav
from .common import SAMPLE_RATE, rng_for
from .console import SessionManifest, TrackEntry, build_console
from .graph import bypass_remove, save
from .optimizer import Session
from .processors import (
    COLOR_BINS,
    DELAY_TAPS,
    ENVELOPE_EPS,
    REVERB_PARAM_BINS,
    reverb_fir,
)
from .scheduler import execute_reference

STEM_KINDS = ("tonal", "noise", "percussive")


@dataclass
class SynthSpec:
    tracks: int = 4
    subgroups: int = 2
    duration_seconds: float = 10.0
    planted_fraction: float = 0.4
    # per-channel RMS of each stem; hot enough that the mid-channel log
    # energy sits near the dynamics processors' initial thresholds (~0)
    stem_level: float = 0.35
    full_wet: bool = False  # planted dry/wet weights pinned to ~1.0


def _envelope(rng, n, sr):
    t = np.arange(n) / sr
    rate = rng.uniform(0.8, 3.0)
    duty = rng.uniform(0.4, 0.8)
    phase = rng.uniform(0, 1)
    gate = ((t * rate + phase) % 1.0) < duty
    env = 0.4 + 0.6 * gate.astype(np.float64)
    ramp = np.ones(n)
    edge = min(n, int(0.004 * sr))
    ramp[:edge] = np.linspace(0, 1, edge)
    return env * ramp


def _tonal_stem(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(70, 900)
    sig = np.zeros(n)
    for h in range(1, 5):
        amp = rng.uniform(0.2, 1.0) / h
        vibrato = 1.0 + 0.002 * np.sin(2 * np.pi * rng.uniform(3, 7) * t)
        sig += amp * np.sin(2 * np.pi * f0 * h * vibrato * t + rng.uniform(0, 2 * np.pi))
    return sig


def _noise_stem(rng, n, sr):
    white = rng.standard_normal(n + 512)
    lo, hi = sorted(rng.uniform(60, 12_000, size=2))
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(white.size, d=1.0 / sr)
    band = (freqs >= lo) & (freqs <= max(hi, lo * 2))
    spec[~band] *= 0.02
    return np.fft.irfft(spec, n=white.size)[:n]


def _percussive_stem(rng, n, sr):
    sig = np.zeros(n)
    period = int(sr / rng.uniform(1.5, 4.0))
    decay = np.exp(-np.arange(period) / (sr * rng.uniform(0.02, 0.08)))
    for start in range(int(rng.uniform(0, period / 2)), n, period):
        burst = rng.standard_normal(min(period, n - start))
        sig[start:start + burst.size] += burst * decay[: burst.size]
    return sig


_STEM_BUILDERS = {"tonal": _tonal_stem, "noise": _noise_stem, "percussive": _percussive_stem}


def make_stems(spec: SynthSpec, seed):
    n = int(round(spec.duration_seconds * SAMPLE_RATE))
    stems = np.zeros((spec.tracks, 2, n))
    kinds = []
    for k in range(spec.tracks):
        rng = rng_for(seed, f"stem-{k}")
        kind = STEM_KINDS[int(rng.integers(0, len(STEM_KINDS)))]
        kinds.append(kind)
        sig = _STEM_BUILDERS[kind](rng, n, SAMPLE_RATE)
        sig = sig * _envelope(rng, n, SAMPLE_RATE)
        sig /= max(np.max(np.abs(sig)), 1e-9)
        # near-mono stereo: a touch of lagged signal on the right plus
        # independent broadband floors, so side-channel processing is
        # observable without making the stem actually wide
        lag = int(rng.integers(4, 24))
        lagged = np.concatenate([np.zeros(lag), sig[:-lag]])
        mix = rng.uniform(0.04, 0.1)
        # a -42 dB broadband floor keeps every mel bin audibly occupied, so
        # the log-spectral loss is not dominated by near-silence mismatches
        stems[k, 0] = sig + 8e-3 * rng.standard_normal(n)
        stems[k, 1] = (1 - mix) * sig + mix * lagged + 8e-3 * rng.standard_normal(n)
        stems[k] *= spec.stem_level / max(np.sqrt(np.mean(stems[k] ** 2)), 1e-9)
    return stems, kinds


def _stem_log_energy(stems):
    """Median log energy of the ballistics-smoothed mid channels."""
    mid = stems[:, 0] + stems[:, 1]
    kernel = np.full(2048, 1.0 / 2048)
    levels = []
    for row in mid:
        env = np.convolve(row**2, kernel, mode="same")
        levels.append(np.log(np.maximum(env, ENVELOPE_EPS)))
    return float(np.median(np.concatenate(levels)))


def _plant_row(tag, rng, level_log):
    """Strong, bounded parameters for one planted processor."""
    if tag == "g":
        return rng.uniform(0.35, 1.1, size=2) * rng.choice([-1.0, 1.0], size=2)
    if tag == "s":
        return np.array([rng.uniform(-2.0, 1.5)])
    if tag == "e":
        k = np.arange(1024)
        curve = np.zeros(1024)
        for _ in range(int(rng.integers(1, 4))):
            curve += rng.uniform(0.4, 0.8) * rng.choice([-1, 1]) * np.cos(
                np.pi * k / 1024 * rng.uniform(0.5, 4.0) + rng.uniform(0, np.pi))
        curve *= rng.uniform(0.5, 0.8) / max(np.std(curve), 1e-9)  # 4-7 dB swings
        return curve
    if tag == "r":
        row = np.zeros(768)
        for lo in (0, 384):
            ripple = 0.2 * rng.standard_normal(REVERB_PARAM_BINS)
            decay = -rng.uniform(0.03, 0.09) - 0.02 * rng.random(REVERB_PARAM_BINS)
            row[lo:lo + 192] = ripple
            row[lo + 192:lo + 384] = decay
        fir = E.value_of(reverb_fir(row[None, :]))[0]
        norm = np.sqrt(np.sum(fir**2))
        row[0:192] += np.log(rng.uniform(0.25, 0.6) / max(norm, 1e-12))
        row[384:576] += np.log(rng.uniform(0.25, 0.6) / max(norm, 1e-12))
        return row
    if tag in "cn":
        alpha_raw = rng.uniform(3.5, 6.0)
        if tag == "c":
            thresh = level_log + rng.uniform(-1.0, 1.0)
            ratio = rng.uniform(2.5, 6.0)
        else:
            thresh = level_log - rng.uniform(1.0, 3.0)
            ratio = rng.uniform(2.0, 4.0)
        knee = rng.uniform(0.5, 1.5)
        return np.array([alpha_raw, thresh,
                         np.log(np.expm1(knee)), np.log(np.expm1(ratio - 1.0))])
    if tag == "d":
        row = np.zeros(880)
        for c in range(2):
            base = c * 440
            row[base + 2 * DELAY_TAPS:base + 440] = -60.0
            for m in rng.choice(np.arange(1, 5), size=int(rng.integers(1, 3)),
                                replace=False):
                angle = rng.uniform(0, 2 * np.pi)
                row[base + m] = np.cos(angle)
                row[base + DELAY_TAPS + m] = np.sin(angle)
                lo = base + 2 * DELAY_TAPS + m * COLOR_BINS
                row[lo:lo + COLOR_BINS] = np.log(rng.uniform(0.3, 0.6))
        return row
    raise ValueError(tag)


def plant_graph(manifest: SessionManifest, spec: SynthSpec, seed, stems):
    """Sparse pruning of the console with strong planted parameters."""
    graph, params = build_console(manifest)
    rng = rng_for(seed, "plant")
    level_log = _stem_log_energy(stems)

    procs = graph.processor_nodes()
    keep = [v for v in procs if rng.random() < spec.planted_fraction]
    if not keep:
        keep = [procs[int(rng.integers(0, len(procs)))]]
    planted, params = bypass_remove(graph, params, set(procs) - set(keep))

    for v in planted.processor_nodes():
        tag = planted.node_types[v]
        row = params.row_of(planted, v)
        params.params[tag][row] = _plant_row(tag, rng, level_log)
        logit = 40.0 if spec.full_wet else rng.uniform(2.2, 4.0)
        params.raw_weights[params.weight_index(planted, v)] = logit
    return planted, params


def synth_session(spec: SynthSpec, seed, out_dir=None):
    """Build a session and its ground truth; optionally write it to disk.

    Returns (manifest, session, planted_graph, planted_params). The in-memory
    session is exactly self-consistent: rendering the planted graph over its
    stems reproduces the target bit-for-bit. On disk, stems and target are
    float32 WAVs plus `session.json` and `planted.mixgraph.json`.
    """
    groups = [f"bus{j}" for j in range(spec.subgroups)]
    tracks = [TrackEntry(f"stems/track{k:02d}.wav", f"track{k:02d}", groups[k % spec.subgroups])
              for k in range(spec.tracks)]
    manifest = SessionManifest(tracks, "target.wav")

    stems, kinds = make_stems(spec, seed)
    stems = stems.astype(np.float32).astype(np.float64)  # disk == memory
    planted, params = plant_graph(manifest, spec, seed, stems)
    target, _ = execute_reference(planted, params, stems)
    target = np.asarray(E.value_of(target))
    session = Session(stems, target, name=f"synth-{seed}")

    if out_dir is not None:
        out = Path(out_dir)
        (out / "stems").mkdir(parents=True, exist_ok=True)
        for k in range(spec.tracks):
            write_wav(out / manifest.tracks[k].path, stems[k], SAMPLE_RATE)
        write_wav(out / manifest.target_path, target, SAMPLE_RATE)
        (out / "session.json").write_text(manifest.to_json())
        save(planted, params, out / "planted.mixgraph.json")
    return manifest, session, planted, params
