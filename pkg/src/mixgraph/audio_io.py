"""WAV ingestion and windowed-sinc polyphase resampling to 30 kHz."""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

from .common import SAMPLE_RATE


class UnsupportedFormat(Exception):
    pass


class CorruptFile(Exception):
    pass


def _chunks(blob):
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise CorruptFile("not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack("<I", blob[pos + 4:pos + 8])
        body = blob[pos + 8:pos + 8 + size]
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path):
    """Raw samples as float64 (channels, n) plus the file's sample rate."""
    blob = Path(path).read_bytes()
    fmt = data = None
    for cid, body in _chunks(blob):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
    if fmt is None or data is None:
        raise CorruptFile("missing fmt or data chunk")
    if len(fmt) < 16:
        raise CorruptFile("fmt chunk too short")
    audio_format, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format == 0xFFFE and len(fmt) >= 26:  # WAVE_FORMAT_EXTENSIBLE
        (audio_format,) = struct.unpack("<H", fmt[24:26])
    if channels < 1:
        raise CorruptFile("zero channels")
    if block_align and len(data) % block_align:
        data = data[: len(data) - len(data) % block_align]

    if audio_format == 1 and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 1 and bits == 24:
        raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        as_int = (raw[:, 0].astype(np.int32)
                  | (raw[:, 1].astype(np.int32) << 8)
                  | (raw[:, 2].astype(np.int32) << 16))
        as_int = np.where(as_int >= 1 << 23, as_int - (1 << 24), as_int)
        x = as_int.astype(np.float64) / float(1 << 23)
    elif audio_format == 3 and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormat(f"format {audio_format} at {bits} bits")
    if x.size % channels:
        raise CorruptFile("sample count not divisible by channel count")
    return x.reshape(-1, channels).T.copy(), rate


def write_wav(path, data, rate=SAMPLE_RATE, fmt="float32"):
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    channels, n = data.shape
    interleaved = data.T.reshape(-1)
    if fmt == "float32":
        f32max = float(np.finfo(np.float32).max)
        payload = np.clip(interleaved, -f32max, f32max).astype("<f4").tobytes()
        audio_format, bits = 3, 32
    elif fmt == "pcm16":
        clipped = np.clip(interleaved, -1.0, 1.0)
        payload = (clipped * 32767.0).round().astype("<i2").tobytes()
        audio_format, bits = 1, 16
    else:
        raise UnsupportedFormat(f"unknown writer format {fmt!r}")
    block_align = channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
        audio_format, channels, rate, rate * block_align, block_align, bits,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)


def _resample_kernel(up, down):
    """Kaiser-windowed sinc lowpass for the up/down polyphase pair."""
    width = max(up, down)
    half = 16 * width
    half = math.ceil(half / down) * down  # delay divisible by the decimation
    taps = np.arange(-half, half + 1, dtype=np.float64)
    cutoff = 0.94 / width
    kernel = cutoff * np.sinc(cutoff * taps) * np.kaiser(2 * half + 1, 10.0)
    return kernel * up, half


def resample(x, rate_in, rate_out=SAMPLE_RATE):
    """Polyphase windowed-sinc resampling along the last axis."""
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(int(rate_in), int(rate_out))
    up, down = rate_out // g, rate_in // g
    kernel, half = _resample_kernel(up, down)
    y = upfirdn(kernel, np.asarray(x, dtype=np.float64), up=up, down=down, axis=-1)
    skip = half // down  # half is a multiple of down by construction
    n_out = int(np.floor(np.asarray(x).shape[-1] * up / down))
    return y[..., skip:skip + n_out]


def load_audio(path):
    """Stereo float64 signal at 30 kHz.

    Mono files are duplicated to both channels; other channel counts are
    rejected. Integer PCM is normalized to [-1, 1]; 30 kHz float input passes
    through bit-exactly.
    """
    x, rate = read_wav(path)
    if x.shape[0] == 1:
        x = np.vstack([x, x])
    elif x.shape[0] != 2:
        raise UnsupportedFormat(f"{x.shape[0]} channels; only mono or stereo supported")
    return resample(x, rate, SAMPLE_RATE)


def load_session(manifest, base_dir="."):
    """Load every stem and the target mix; lengths trimmed to the shortest."""
    from .optimizer import Session

    base = Path(base_dir)
    stems = [load_audio(base / t.path) for t in manifest.tracks]
    target = load_audio(base / manifest.target_path)
    n = min(min(s.shape[-1] for s in stems), target.shape[-1])
    return Session(np.stack([s[..., :n] for s in stems]), target[..., :n],
                   name=str(manifest.target_path))
