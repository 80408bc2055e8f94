"""Mixing-console construction from a session manifest.

A console applies the full processor chain ``e c n s g d r`` to every track,
sums each subgroup with a mix node, applies the chain again per subgroup, and
sums the subgroup chains into the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .common import rng_for
from .graph import PARAM_COUNTS, PROCESSOR_TYPES, MixGraph, ParamStore

CHAIN = "ecnsgdr"


class EmptyManifest(Exception):
    pass


@dataclass
class TrackEntry:
    path: str
    name: str
    subgroup: str


@dataclass
class SessionManifest:
    tracks: list[TrackEntry]
    target_path: str
    sample_rate: int = 30_000

    def subgroup_names(self):
        seen = []
        for t in self.tracks:
            if t.subgroup not in seen:
                seen.append(t.subgroup)
        return seen

    def to_json(self):
        return json.dumps(
            {
                "tracks": [
                    {"path": t.path, "name": t.name, "subgroup": t.subgroup}
                    for t in self.tracks
                ],
                "target": self.target_path,
                "sample_rate": self.sample_rate,
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        tracks = [TrackEntry(t["path"], t["name"], t["subgroup"]) for t in doc["tracks"]]
        return cls(tracks, doc["target"], doc.get("sample_rate", 30_000))


def build_console(manifest: SessionManifest):
    """Full console graph and zeroed parameters for a manifest.

    Node layout: track inputs first, then per-track chains, then per-subgroup
    mix nodes and chains in subgroup order, then the output node.
    """
    if not manifest.tracks:
        raise EmptyManifest("manifest lists no tracks")

    k = len(manifest.tracks)
    subgroups = manifest.subgroup_names()
    types = list("i" * k)
    edges = []
    chain_tail = {}

    for ti in range(k):
        prev = ti
        for tag in CHAIN:
            nid = len(types)
            types.append(tag)
            edges.append((prev, nid))
            prev = nid
        chain_tail[ti] = prev

    subgroup_of = {}
    mix_tail = {}
    for si, name in enumerate(subgroups):
        mix_id = len(types)
        types.append("m")
        for ti, entry in enumerate(manifest.tracks):
            if entry.subgroup == name:
                edges.append((chain_tail[ti], mix_id))
                subgroup_of[ti] = mix_id
        prev = mix_id
        for tag in CHAIN:
            nid = len(types)
            types.append(tag)
            edges.append((prev, nid))
            prev = nid
        mix_tail[si] = prev

    out = len(types)
    types.append("o")
    edges.extend((mix_tail[si], out) for si in range(len(subgroups)))

    graph = MixGraph(
        "".join(types),
        tuple(edges),
        track_labels=tuple(t.name for t in manifest.tracks),
        subgroup_of=subgroup_of,
    )
    return graph, ParamStore.zeros(graph)


def init_params(store: ParamStore, seed):
    """Gaussian N(0, 1e-2) draw for every parameter and dry/wet logit.

    The reverb's per-frame log-decay vectors are drawn non-positive (sign
    flipped onto the same magnitudes): a positive decay compounds over the
    313 reverb frames into e^30-scale filters, which costs thousands of
    optimization steps just to undo.
    """
    out = store.copy()
    for t in PROCESSOR_TYPES:
        gen = rng_for(seed, f"init-{t}")
        out.params[t] = 0.1 * gen.standard_normal(out.params[t].shape)
    decay = out.params["r"]
    for lo in (192, 576):
        decay[:, lo:lo + 192] = -np.abs(decay[:, lo:lo + 192])
    gen = rng_for(seed, "init-weights")
    out.raw_weights = 0.1 * gen.standard_normal(out.raw_weights.shape)
    return out
