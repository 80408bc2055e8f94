"""Audio-domain loss (multi-resolution Mel STFT over left/right, mid, side),
gain-staging regularization, and sparsity regularization."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .common import SAMPLE_RATE
from .processors import gain_staging_term
from .scheduler import LengthMismatch

LOG_EPS = 1e-7
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    fft_sizes: tuple = (512, 1024, 4096)
    mel_bins: int = 96
    weight_lr: float = 0.5
    weight_mid: float = 0.25
    weight_side: float = 0.25
    gain_staging_weight: float = 1e-3
    mel_fmax: float = 15_000.0
    a_weighting: bool = True
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        total = self.weight_lr + self.weight_mid + self.weight_side
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"channel weights sum to {total}, expected 1.0")
        if any(s <= 0 for s in self.fft_sizes) or self.mel_bins <= 0:
            raise ValueError("sizes must be positive")

    def hop(self, n_fft):
        return n_fft // 4


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=None)
def mel_filterbank(n_fft, sr=SAMPLE_RATE, n_mels=96, fmax=15_000.0):
    """Triangular HTK-mel filterbank (n_mels, bins).

    Every row sums to a positive value and every bin below Nyquist is covered
    by some filter; degenerate triangles (narrower than the bin spacing) and
    uncovered bins are repaired by snapping unit weight to the nearest peak.
    """
    bins = n_fft // 2 + 1
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    pts = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, bins))
    for j in range(n_mels):
        lo, peak, hi = pts[j], pts[j + 1], pts[j + 2]
        up = (freqs - lo) / max(peak - lo, 1e-12)
        down = (hi - freqs) / max(hi - peak, 1e-12)
        fb[j] = np.clip(np.minimum(up, down), 0.0, None)
    for j in np.where(fb.sum(axis=1) == 0)[0]:
        fb[j, np.argmin(np.abs(freqs - pts[j + 1]))] = 1.0
    below = np.where((freqs < sr / 2) & (fb.sum(axis=0) == 0))[0]
    for k in below:
        fb[np.argmin(np.abs(pts[1:-1] - freqs[k])), k] = 1.0
    return fb


@functools.lru_cache(maxsize=None)
def a_weight_gains(n_fft, sr=SAMPLE_RATE):
    """Linear A-weighting curve evaluated at the rfft bin frequencies."""
    f2 = np.fft.rfftfreq(n_fft, d=1.0 / sr) ** 2
    ra = (12194.0**2 * f2**2) / (
        (f2 + 20.6**2)
        * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2))
        * (f2 + 12194.0**2)
    )
    return ra * 10.0 ** (2.0 / 20.0)  # +2 dB makes the curve 0 dB at 1 kHz


@functools.lru_cache(maxsize=None)
def _stft_window(n_fft):
    t = np.arange(n_fft)
    return 0.5 - 0.5 * np.cos(2 * np.pi * t / n_fft)


@functools.lru_cache(maxsize=None)
def _projection(n_fft, cfg: LossConfig):
    """(bins, mel) matrix combining A-weighting and the Mel filterbank."""
    fb = mel_filterbank(n_fft, cfg.sample_rate, cfg.mel_bins, cfg.mel_fmax)
    proj = fb.T.copy()
    if cfg.a_weighting:
        proj *= a_weight_gains(n_fft, cfg.sample_rate)[:, None]
    return proj


def mel_spectrogram(x, n_fft, cfg: LossConfig):
    """A-weighted Mel magnitude spectrogram of a 1-D signal, (frames, mel)."""
    frames = E.frame(x, n_fft, cfg.hop(n_fft), reflect_pad=True)
    spec = E.rfft(E.mul(frames, _stft_window(n_fft)), n=n_fft, axis=-1)
    return E.dot_last(E.absolute(spec), _projection(n_fft, cfg))


@dataclass
class PreparedTarget:
    length: int
    mels: dict = field(default_factory=dict)       # n_fft -> (4, frames, mel)
    log_mels: dict = field(default_factory=dict)
    norms: dict = field(default_factory=dict)      # n_fft -> (4,)


def _channel_groups(sig):
    """Stack [left, right, mid, side] signals as one (4, L) batch."""
    left, right = sig[0], sig[1]
    return E.stack([left, right, E.add(left, right), E.sub(left, right)], axis=0)


def _group_weights(cfg: LossConfig):
    return np.array([cfg.weight_lr / 2, cfg.weight_lr / 2,
                     cfg.weight_mid, cfg.weight_side])


def prepare_target(y, cfg: LossConfig = LossConfig()):
    y = np.asarray(E.value_of(y))
    out = PreparedTarget(length=y.shape[-1])
    groups = _channel_groups(y)
    for n_fft in cfg.fft_sizes:
        mel = mel_spectrogram(groups, n_fft, cfg)
        out.mels[n_fft] = mel
        out.log_mels[n_fft] = np.log(mel + LOG_EPS)
        out.norms[n_fft] = np.maximum(
            np.linalg.norm(mel.reshape(4, -1), axis=1), NORM_EPS)
    return out


def mrstft(y_hat, target, cfg: LossConfig = LossConfig()):
    """Multi-resolution log-Mel + spectral-convergence distance.

    ``target`` is either a (2, L) array or a PreparedTarget. Per resolution
    the term is mean-abs log-Mel difference normalized by frame count plus
    the relative Frobenius error; left/right average, mid and side add with
    weights 0.5/0.25/0.25.
    """
    if not isinstance(target, PreparedTarget):
        target = prepare_target(np.asarray(E.value_of(target)), cfg)
    if E.value_of(y_hat).shape[-1] != target.length:
        raise LengthMismatch(
            f"estimate length {E.value_of(y_hat).shape[-1]} != target {target.length}")

    groups = _channel_groups(y_hat)
    weights = _group_weights(cfg)
    total = 0.0
    for n_fft in cfg.fft_sizes:
        mel = mel_spectrogram(groups, n_fft, cfg)  # (4, frames, mel)
        n_frames = E.value_of(mel).shape[-2]
        logdiff = E.sub(E.log(E.add(mel, LOG_EPS)), target.log_mels[n_fft])
        log_terms = E.mul(E.array_sum(E.absolute(logdiff), axis=(-2, -1)),
                          1.0 / n_frames)
        sc_terms = E.div(
            E.sqrt(E.array_sum(E.square(E.sub(mel, target.mels[n_fft])), axis=(-2, -1))),
            target.norms[n_fft])
        total = E.add(total, E.array_sum(E.mul(E.add(log_terms, sc_terms), weights)))
    return total


def gain_staging_loss(pairs):
    """Sum of per-node gain-staging terms over (input, wet-output) pairs."""
    total = 0.0
    for u, ybar in pairs:
        total = E.add(total, gain_staging_term(u, ybar))
    return total


def sparsity_loss(weights):
    """l1 norm of the dry/wet weight vector (weights already in [0, 1])."""
    return E.array_sum(weights)
