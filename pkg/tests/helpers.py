"""Shared builders for randomized graph tests."""

from __future__ import annotations

import numpy as np

from mixgraph.graph import PARAM_COUNTS, PROCESSOR_TYPES, MixGraph, ParamStore


def random_valid_graph(rng, max_extra=12):
    """Random valid typed DAG: inputs feed processors/mixes, one output."""
    k = int(rng.integers(1, 5))
    types = list("i" * k)
    edges = []
    n_extra = int(rng.integers(0, max_extra + 1))
    for _ in range(n_extra):
        nid = len(types)
        if rng.random() < 0.7:
            tag = PROCESSOR_TYPES[int(rng.integers(0, len(PROCESSOR_TYPES)))]
            pred = int(rng.integers(0, nid))
            types.append(tag)
            edges.append((pred, nid))
        else:
            fan = int(rng.integers(1, min(3, nid) + 1))
            preds = rng.choice(nid, size=fan, replace=False)
            types.append("m")
            edges.extend((int(p), nid) for p in preds)
    sinks = [v for v in range(len(types)) if all(a != v for a, _ in edges)]
    out = len(types)
    types.append("o")
    edges.extend((v, out) for v in sinks)
    return MixGraph("".join(types), tuple(edges))


def random_params(graph, rng, scale=0.1):
    params = {
        t: scale * rng.standard_normal((len(graph.nodes_of_type(t)), PARAM_COUNTS[t]))
        for t in PROCESSOR_TYPES
    }
    raw = scale * rng.standard_normal(len(graph.processor_nodes()))
    return ParamStore(params, raw)


def sane_random_params(graph, rng, scale=0.1):
    """Init-style random parameters with reverb decays forced non-positive.

    Positive per-frame log decays compound to e^30-scale FIRs over the 313
    reverb frames, which drowns fp-level executor comparisons.
    """
    store = random_params(graph, rng, scale)
    r = store.params["r"]
    for lo in (192, 576):
        r[:, lo:lo + 192] = -np.abs(r[:, lo:lo + 192]) - 0.01
    return store


def tone_stems(rng, k=2, length=45_000, sr=30_000):
    """Deterministic tonal stems with rhythmic envelopes, near-mono stereo."""
    t = np.arange(length) / sr
    stems = np.zeros((k, 2, length))
    for i in range(k):
        f0 = float(rng.uniform(90, 800))
        sig = sum(rng.uniform(0.2, 0.5) / (h + 1) * np.sin(2 * np.pi * f0 * (h + 1) * t)
                  for h in range(3))
        env = 0.4 + 0.6 * np.clip(np.sin(2 * np.pi * rng.uniform(1, 3) * t), 0, None)
        sig = sig * env + 0.01 * rng.standard_normal(length)
        stems[i, 0] = sig
        stems[i, 1] = sig
    return stems


def tiny_session(rng, k=2, s=1, length=45_000, render_params=None):
    """Small in-memory session; target rendered by a known console when given."""
    from mixgraph.console import SessionManifest, TrackEntry, build_console
    from mixgraph.optimizer import Session
    from mixgraph.scheduler import execute_reference
    from mixgraph import engine as E

    groups = [f"bus{j}" for j in range(s)]
    tracks = [TrackEntry(f"t{i}.wav", f"t{i}", groups[i % s]) for i in range(k)]
    manifest = SessionManifest(tracks, "mix.wav")
    graph, params = build_console(manifest)
    stems = tone_stems(rng, k, length)
    if render_params is None:
        target = stems.sum(axis=0)
    else:
        target, _ = execute_reference(graph, render_params, stems)
        target = np.asarray(E.value_of(target))
    return Session(stems, target), graph, params, manifest


def random_console(rng, kmax=8, prune_fraction=0.0):
    """Console for a random manifest, optionally with random slots pruned."""
    from mixgraph.console import SessionManifest, TrackEntry, build_console
    from mixgraph.graph import bypass_remove

    k = int(rng.integers(1, kmax + 1))
    s = int(rng.integers(1, min(3, k) + 1))
    groups = [f"bus{j}" for j in range(s)]
    tracks = [TrackEntry(f"t{i}.wav", f"t{i}", groups[i % s]) for i in range(k)]
    graph, params = build_console(SessionManifest(tracks, "mix.wav"))
    params = sane_random_params(graph, rng)
    if prune_fraction > 0:
        procs = graph.processor_nodes()
        n_drop = int(round(prune_fraction * len(procs)))
        if n_drop:
            drop = rng.choice(procs, size=n_drop, replace=False)
            graph, params = bypass_remove(graph, params, set(int(v) for v in drop))
    return graph, params
