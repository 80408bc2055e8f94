"""Evaluation metrics: MIR feature distances, SI-SDR, consistency scoring."""

from __future__ import annotations

import numpy as np

from .common import SAMPLE_RATE
from .graph import PROCESSOR_TYPES, MixGraph
from .scheduler import console_chains

SEGMENT_SECONDS = 8.0
FLOOR = 1e-12

# Zwicker critical-band edges up to the 15 kHz Nyquist of the 30 kHz rate
BARK_EDGES = np.array([
    0, 100, 200, 300, 400, 510, 630, 770, 920, 1080, 1270, 1480, 1720, 2000,
    2320, 2700, 3150, 3700, 4400, 5300, 6400, 7720, 9500, 12000, 15000,
], dtype=np.float64)


class TooShort(Exception):
    pass


class ZeroTarget(Exception):
    pass


class IncompatibleConsoles(Exception):
    pass


def split_segments(y, seg_seconds=SEGMENT_SECONDS, sr=SAMPLE_RATE):
    seg = int(round(seg_seconds * sr))
    m = y.shape[-1] // seg
    if m < 1:
        raise TooShort(f"need at least {seg} samples, got {y.shape[-1]}")
    return [y[..., i * seg:(i + 1) * seg] for i in range(m)]


def _mid(seg):
    return seg[0] + seg[1]


def feature_rms(seg):
    return np.array([np.sqrt(np.mean(_mid(seg) ** 2))])


def feature_crest(seg):
    mid = _mid(seg)
    rms = np.sqrt(np.mean(mid**2))
    return np.array([np.max(np.abs(mid)) / max(rms, FLOOR)])


def feature_stereo_width(seg):
    side = seg[0] - seg[1]
    return np.array([np.sum(side**2) / max(np.sum(_mid(seg) ** 2), FLOOR)])


def feature_stereo_imbalance(seg):
    el, er = np.sum(seg[0] ** 2), np.sum(seg[1] ** 2)
    return np.array([(er - el) / max(er + el, FLOOR)])


def feature_bark_spectrum(seg, sr=SAMPLE_RATE):
    mid = _mid(seg)
    spec = np.abs(np.fft.rfft(mid)) ** 2
    freqs = np.fft.rfftfreq(mid.size, d=1.0 / sr)
    bands = np.zeros(BARK_EDGES.size - 1)
    for j in range(bands.size):
        sel = (freqs >= BARK_EDGES[j]) & (freqs < BARK_EDGES[j + 1])
        bands[j] = np.log10(spec[sel].sum() + FLOOR)
    return bands


FEATURES = {
    "rms": feature_rms,
    "cf": feature_crest,
    "sw": feature_stereo_width,
    "si": feature_stereo_imbalance,
    "bs": feature_bark_spectrum,
}


def mir_distance(y, y_hat, feature):
    """log10 of the per-segment feature MSE, floored at log10(1e-12)."""
    fn = FEATURES[feature]
    segs_y = split_segments(np.asarray(y))
    segs_h = split_segments(np.asarray(y_hat))
    m = min(len(segs_y), len(segs_h))
    k = fn(segs_y[0]).size
    total = sum(np.sum((fn(segs_y[i]) - fn(segs_h[i])) ** 2) for i in range(m))
    return float(np.log10(max(total / (m * k), FLOOR)))


def si_sdr(y, y_hat, cap_db=100.0):
    """Scale-invariant SDR over the concatenated stereo channels, in dB."""
    s = np.asarray(y, dtype=np.float64).ravel()
    sh = np.asarray(y_hat, dtype=np.float64).ravel()
    if s.shape != sh.shape:
        raise ZeroTarget(f"length mismatch {s.shape} vs {sh.shape}")
    denom = float(np.dot(s, s))
    if denom == 0.0:
        raise ZeroTarget("target signal is identically zero")
    alpha = float(np.dot(sh, s)) / denom
    target = alpha * s
    err = sh - target
    num = float(np.dot(target, target))
    den = float(np.dot(err, err))
    if den == 0.0 or num / den > 10 ** (cap_db / 10):
        return cap_db
    return float(10 * np.log10(num / den))


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties."""

    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(v.size)
        r[order] = np.arange(1, v.size + 1)
        for val in np.unique(v):
            sel = v == val
            if sel.sum() > 1:
                r[sel] = r[sel].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.mean((rx - rx.mean()) * (ry - ry.mean())) / (sx * sy))


# ---------------------------------------------------------------------------
# consistency scoring


def chain_presence(graph: MixGraph):
    """Per-slot processor-type presence for a console pruning.

    Slots are the track chains (keyed by input node order) followed by the
    subgroup chains (keyed by mix node order).
    """
    track_chains, subgroup_chains = console_chains(graph)
    slots = []
    for i in sorted(track_chains):
        types = {graph.node_types[v] for v in track_chains[i]}
        slots.append(("track", len(slots), types))
    for m in sorted(subgroup_chains):
        types = {graph.node_types[v] for v in subgroup_chains[m]}
        slots.append(("subgroup", len(slots), types))
    return slots


def _slot_structure(graph):
    inputs = sorted(graph.nodes_of_type("i"))
    mixes = sorted(graph.nodes_of_type("m"))
    mix_pos = {m: j for j, m in enumerate(mixes)}
    return [mix_pos[graph.subgroup_of[i]] if i in graph.subgroup_of else None
            for i in inputs]


def consistency_score(g_true: MixGraph, g_est: MixGraph):
    """Binary per-slot, per-type detection metrics of g_est against g_true.

    Both graphs must be prunings of the same console. Returns per-type plus
    micro-averaged accuracy/precision/recall/F1; empty denominators score 1.0.
    """
    if len(g_true.nodes_of_type("i")) != len(g_est.nodes_of_type("i")) or \
            len(g_true.nodes_of_type("m")) != len(g_est.nodes_of_type("m")) or \
            _slot_structure(g_true) != _slot_structure(g_est):
        raise IncompatibleConsoles("graphs are not prunings of the same console")

    slots_true = chain_presence(g_true)
    slots_est = chain_presence(g_est)

    def rates(tp, fp, fn, tn):
        total = tp + fp + fn + tn
        acc = (tp + tn) / total if total else 1.0
        prec = tp / (tp + fp) if tp + fp else 1.0
        rec = tp / (tp + fn) if tp + fn else 1.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return {"accuracy": acc, "precision": prec, "recall": rec, "f1": f1}

    per_type = {}
    micro = np.zeros(4, dtype=int)
    for tag in PROCESSOR_TYPES:
        tp = fp = fn = tn = 0
        for (_, _, types_t), (_, _, types_e) in zip(slots_true, slots_est):
            t_has, e_has = tag in types_t, tag in types_e
            tp += t_has and e_has
            fp += e_has and not t_has
            fn += t_has and not e_has
            tn += not t_has and not e_has
        per_type[tag] = rates(tp, fp, fn, tn)
        micro += np.array([tp, fp, fn, tn])
    return {"per_type": per_type, "micro": rates(*micro)}
