"""Shared constants and small helpers used across the package."""

import zlib

import numpy as np

SAMPLE_RATE = 30_000


def rng_for(seed, label):
    """Named substream of the root seed, stable across runs and platforms."""
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


def round_half_away(x):
    """Round half away from zero (np.round rounds half to even)."""
    return int(np.floor(abs(x) + 0.5) * np.sign(x)) if x != 0 else 0


def seconds_to_samples(t, sr=SAMPLE_RATE):
    return int(round(t * sr))
