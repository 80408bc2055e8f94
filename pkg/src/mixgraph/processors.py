"""The seven differentiable processors, batched over same-type nodes.

Every kernel maps a batch of stereo inputs ``u`` of shape (B, 2, L) and a
parameter matrix of shape (B, N_t) to an output of the same shape as ``u``,
plus an optional gain-staging regularization scalar. Kernels are pure: called
with tape buffers they record adjoints, called with plain arrays they are
ordinary numpy DSP.
"""

from __future__ import annotations

import functools

import numpy as np

from . import engine as E
from .common import SAMPLE_RATE, rng_for

EQ_FIR_LEN = 2047
EQ_BINS = 1024

REVERB_NFFT = 384
REVERB_HOP = 192
REVERB_PARAM_BINS = 192
REVERB_NOISE_SECONDS = 2.0
REVERB_NOISE_LEN = int(REVERB_NOISE_SECONDS * SAMPLE_RATE)
REVERB_NOISE_SEED = 0x5EED_0001  # shipped constant; runs reproduce byte-for-byte

BALLISTICS_LEN = 8192
ENVELOPE_EPS = 1e-8

DELAY_TAPS = 20
DELAY_WINDOW = 3000  # 100 ms at 30 kHz
COLOR_LEN = 39
COLOR_BINS = 20
DELAY_FIR_LEN = DELAY_TAPS * DELAY_WINDOW + COLOR_LEN - 1
DELAY_RADIUS_GAMMA = 0.01

GAIN_STAGING_EPS = 1e-8


@functools.lru_cache(maxsize=None)
def _hann_symmetric(n):
    return np.hanning(n)


@functools.lru_cache(maxsize=None)
def _hann_periodic(n):
    t = np.arange(n)
    return 0.5 - 0.5 * np.cos(2 * np.pi * t / n)


def zero_phase_fir(log_mag, n):
    """FIR from a log-magnitude half spectrum: exp, inverse FFT, center, Hann."""
    half = (n - 1) // 2
    h = E.irfft(E.exp(log_mag), n=n)
    centered = E.concat([h[..., half + 1:], h[..., :half + 1]], axis=-1)
    return E.mul(centered, _hann_symmetric(n))


def drywet_wrap(kernel_out, u, w):
    """y = w * wet + (1 - w) * u with w broadcast over (B, 2, L).

    Rows with w == 0 (masked-out nodes) return the input bit-exactly, even
    when extreme parameters drive the wet path non-finite.
    """
    wv = np.asarray(E.value_of(w), dtype=np.float64).reshape(-1, 1, 1)
    w_b = E.reshape(w, (-1, 1, 1)) if np.asarray(E.value_of(w)).ndim == 1 else w
    mixed = E.add(E.mul(w_b, kernel_out), E.mul(E.sub(1.0, w_b), u))
    if not np.any(wv == 0):
        return mixed
    bypass = np.broadcast_to(wv == 0, E.value_of(u).shape)
    return E.where(bypass, u, mixed)


def mix_signals(signals):
    out = signals[0]
    for s in signals[1:]:
        out = E.add(out, s)
    return out


def gain_staging_term(u, ybar):
    """Sum over the batch of |log ||wet_mid|| - log ||in_mid|||."""
    mid_u = E.add(u[:, 0], u[:, 1])
    mid_y = E.add(ybar[:, 0], ybar[:, 1])
    nu = E.sqrt(E.array_sum(E.square(mid_u), axis=-1))
    ny = E.sqrt(E.array_sum(E.square(mid_y), axis=-1))
    diff = E.sub(E.log(E.add(ny, GAIN_STAGING_EPS)), E.log(E.add(nu, GAIN_STAGING_EPS)))
    return E.array_sum(E.absolute(diff))


# ---------------------------------------------------------------------------
# gain/panning and stereo imager


def gain_panning(u, p):
    gain = E.reshape(E.exp(p), (-1, 2, 1))
    return E.mul(u, gain), None


def stereo_imager(u, p):
    ul, ur = u[:, 0], u[:, 1]
    mid = E.add(ul, ur)
    side = E.mul(E.exp(p), E.sub(ul, ur))  # p is (B, 1), broadcasts over time
    left = E.mul(E.add(mid, side), 0.5)
    right = E.mul(E.sub(mid, side), 0.5)
    return E.stack([left, right], axis=1), None


# ---------------------------------------------------------------------------
# equalizer


def equalizer(u, p):
    L = E.value_of(u).shape[-1]
    fir = zero_phase_fir(p, EQ_FIR_LEN)
    fir = E.reshape(fir, (-1, 1, EQ_FIR_LEN))  # same FIR on both channels
    ybar = E.fft_conv(u, fir, offset=(EQ_FIR_LEN - 1) // 2, out_len=L)
    return ybar, gain_staging_term(u, ybar)


# ---------------------------------------------------------------------------
# reverb


@functools.lru_cache(maxsize=None)
def _reverb_tables():
    """Fixed noise, its STFT, and the overlap-add normalizer."""
    win = _hann_periodic(REVERB_NFFT)
    pad = REVERB_HOP
    padded_len = REVERB_NOISE_LEN + 2 * pad
    n_frames = 1 + (padded_len - REVERB_NFFT) // REVERB_HOP

    specs = {}
    for chan in ("mid", "side"):
        noise = rng_for(REVERB_NOISE_SEED, f"reverb-{chan}").uniform(-1, 1, REVERB_NOISE_LEN)
        xp = np.pad(noise, pad, mode="reflect")
        frames = E._extract(xp, REVERB_NFFT, REVERB_HOP, n_frames)
        specs[chan] = np.fft.rfft(frames * win, axis=-1)

    cover = (n_frames - 1) * REVERB_HOP + REVERB_NFFT
    wss = E._ola(np.tile((win * win)[None, :], (n_frames, 1)), REVERB_HOP, cover)
    wss_slice = wss[pad:pad + REVERB_NOISE_LEN]
    return specs, wss_slice, n_frames


def _reverb_channel_fir(h0, hdelta):
    """Time-varying filtered-noise FIR for one mid/side channel."""
    specs, wss, n_frames = _reverb_tables()
    # pin the Nyquist bin of the 384-point spectrum to the top parameter bin
    h0 = E.concat([h0, h0[..., -1:]], axis=-1)
    hdelta = E.concat([hdelta, hdelta[..., -1:]], axis=-1)
    m_index = np.arange(n_frames, dtype=np.float64)[None, :, None]
    expo = E.add(E.reshape(h0, (-1, 1, REVERB_PARAM_BINS + 1)),
                 E.mul(E.reshape(hdelta, (-1, 1, REVERB_PARAM_BINS + 1)), m_index))
    return E.exp(expo)  # (B, frames, bins)


def _istft(spec, out_len):
    specs, wss, n_frames = _reverb_tables()
    win = _hann_periodic(REVERB_NFFT)
    frames = E.irfft(spec, n=REVERB_NFFT, axis=-1)
    frames = E.mul(frames, win)
    cover = (n_frames - 1) * REVERB_HOP + REVERB_NFFT
    sig = E.fold(frames, REVERB_HOP, cover)
    sig = sig[..., REVERB_HOP:REVERB_HOP + out_len]
    return E.div(sig, wss[:out_len])


def reverb_fir(p):
    """Stereo FIR (B, 2, 60000) from the 768-dim reverb parameter rows."""
    k = REVERB_PARAM_BINS
    mask_m = _reverb_channel_fir(p[:, 0:k], p[:, k:2 * k])
    mask_s = _reverb_channel_fir(p[:, 2 * k:3 * k], p[:, 3 * k:4 * k])
    specs, _, _ = _reverb_tables()
    h_mid = _istft(E.mul(mask_m, specs["mid"][None]), REVERB_NOISE_LEN)
    h_side = _istft(E.mul(mask_s, specs["side"][None]), REVERB_NOISE_LEN)
    h_l = E.mul(E.add(h_mid, h_side), 0.5)
    h_r = E.mul(E.sub(h_mid, h_side), 0.5)
    return E.stack([h_l, h_r], axis=1)


def reverb(u, p):
    L = E.value_of(u).shape[-1]
    h = reverb_fir(p)
    ybar = E.fft_conv(u, h, offset=0, out_len=L)
    return ybar, gain_staging_term(u, ybar)


# ---------------------------------------------------------------------------
# compressor / noisegate


def _dynamics(u, p, gate):
    L = E.value_of(u).shape[-1]
    a_raw, thresh = p[:, 0:1], p[:, 1:2]
    knee_raw, ratio_raw = p[:, 2:3], p[:, 3:4]

    # h_env[n] = (1 - alpha) alpha^n, alpha = sigmoid(a_raw), in log space
    log_alpha = E.neg(E.softplus(E.neg(a_raw)))
    log_one_minus = E.neg(E.softplus(a_raw))
    n_idx = np.arange(BALLISTICS_LEN, dtype=np.float64)
    h_env = E.exp(E.add(E.mul(n_idx, log_alpha), log_one_minus))

    mid = E.add(u[:, 0], u[:, 1])
    g_u = E.fft_conv(E.square(mid), h_env, offset=0, out_len=L)
    # FFT rounding can dip the (mathematically non-negative) envelope below
    # zero when the input spans a huge dynamic range; clamp before the log
    g_u = E.where(E.value_of(g_u) > 0, g_u, 0.0)
    G_u = E.log(E.add(g_u, ENVELOPE_EPS))

    W = E.add(E.softplus(knee_raw), 1e-3)
    R = E.add(E.softplus(ratio_raw), 1.0)

    Gv = E.value_of(G_u)
    Tv, Wv = E.value_of(thresh), E.value_of(W)
    above_mask = Gv >= Tv + Wv
    below_mask = Gv < Tv - Wv

    if gate:
        above = G_u
        knee = E.add(G_u, E.mul(E.sub(1.0, R),
                                E.div(E.square(E.sub(E.sub(G_u, thresh), W)), E.mul(W, 4.0))))
        below = E.add(thresh, E.mul(R, E.sub(G_u, thresh)))
    else:
        above = E.add(thresh, E.div(E.sub(G_u, thresh), R))
        knee = E.add(G_u, E.mul(E.sub(E.div(1.0, R), 1.0),
                                E.div(E.square(E.add(E.sub(G_u, thresh), W)), E.mul(W, 4.0))))
        below = G_u

    G_y = E.where(above_mask, above, E.where(below_mask, below, knee))
    gain = E.exp(E.sub(G_y, G_u))
    B = E.value_of(u).shape[0]
    return E.mul(u, E.reshape(gain, (B, 1, L))), None


def compressor(u, p):
    return _dynamics(u, p, gate=False)


def noisegate(u, p):
    return _dynamics(u, p, gate=True)


# ---------------------------------------------------------------------------
# multitap delay


def quantize_delay(z):
    """Integer in-window offsets from complex angular frequencies."""
    theta = np.angle(z)
    pos = (-theta) % (2 * np.pi) / (2 * np.pi) * DELAY_WINDOW
    return np.rint(pos).astype(int) % DELAY_WINDOW


def delay_surrogate_window(z, n=DELAY_WINDOW):
    """Damped-sinusoid surrogate of a delayed unit impulse (real part)."""
    k = np.arange(n)
    return np.fft.ifft(z ** k).real


def _delay_place_forward(color, z):
    b = color.shape[0]
    d = quantize_delay(z)
    out = np.zeros((b, DELAY_FIR_LEN))
    for m in range(DELAY_TAPS):
        for row in range(b):
            start = m * DELAY_WINDOW + d[row, m]
            out[row, start:start + COLOR_LEN] += color[row, m]
    return out


def _delay_place_backward(g, color, z):
    b = color.shape[0]
    d = quantize_delay(z)
    gcolor = np.zeros_like(color)
    for row in range(b):
        for m in range(DELAY_TAPS):
            start = m * DELAY_WINDOW + d[row, m]
            gcolor[row, m] = g[row, start:start + COLOR_LEN]

    # surrogate gradient: correlate the upstream grad with each color FIR,
    # then project onto the derivative of the damped sinusoid
    windows = np.lib.stride_tricks.sliding_window_view(g, COLOR_LEN, axis=-1)
    windows = windows[:, :DELAY_TAPS * DELAY_WINDOW]
    windows = windows.reshape(b, DELAY_TAPS, DELAY_WINDOW, COLOR_LEN)
    e_t = np.einsum("bmtj,bmj->bmt", windows, color)

    zmag = np.abs(z)
    z_safe = np.where(zmag > 1.0, z / np.where(zmag > 0, zmag, 1.0), z)
    k = np.arange(DELAY_WINDOW, dtype=np.float64)
    # z^(k-1) via exp((k-1) log z); the z = 0 column only scales k = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        logz = np.where(z_safe == 0, 0.0, np.log(np.where(z_safe == 0, 1.0, z_safe)))
        powers = np.exp(np.maximum(k - 1, 0) * logz[..., None])
    powers = np.where((z_safe == 0)[..., None] & (k > 1), 0.0, powers)
    deriv = np.fft.ifft(k * powers * (k > 0), axis=-1)
    graw = np.conj(np.einsum("bmt,bmt->bm", e_t, deriv))
    return gcolor, graw


delay_fir_op = E.custom_gradient(_delay_place_forward, _delay_place_backward)


def multitap_delay(u, p):
    L = E.value_of(u).shape[-1]
    chans = []
    for c in range(2):
        base = c * 440
        z = E.complexify(p[:, base:base + DELAY_TAPS],
                         p[:, base + DELAY_TAPS:base + 2 * DELAY_TAPS])
        bins = E.reshape(p[:, base + 2 * DELAY_TAPS:base + 440], (-1, DELAY_TAPS, COLOR_BINS))
        color = zero_phase_fir(bins, COLOR_LEN)
        chans.append(delay_fir_op(color, z))
    h = E.stack(chans, axis=1)  # (B, 2, fir_len), index k is lag k - (COLOR_LEN-1)//2
    ybar = E.fft_conv(u, h, offset=(COLOR_LEN - 1) // 2, out_len=L)
    return ybar, gain_staging_term(u, ybar)


KERNELS = {
    "g": gain_panning,
    "s": stereo_imager,
    "e": equalizer,
    "r": reverb,
    "c": compressor,
    "n": noisegate,
    "d": multitap_delay,
}
