"""Mixing-graph data model: typed DAG, parameter banks, edits, serialization.

Node types are single-letter codes. Seven are processors, three are
auxiliary (input, output, mix):

    i input   o output   m mix
    e equalizer   c compressor   n noisegate   s stereo imager
    g gain/panning   d multitap delay   r reverb

Parameter bank layouts (one row per node of that type, node-id order):

    g  (2)    log gain per channel [left, right]
    s  (1)    log side gain
    e  (1024) log-magnitude half spectrum of the 2047-tap zero-phase FIR
    r  (768)  [H0_mid(192), Hdelta_mid(192), H0_side(192), Hdelta_side(192)]
    c  (4)    [alpha_raw, threshold, knee_raw, ratio_raw]
    n  (4)    same as compressor
    d  (880)  per channel (440): [Re z (20), Im z (20), color bins (20 x 20)]

Graphs serialize to a JSON document (file extension ``.mixgraph.json``) with
full float round-trip precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

PROCESSOR_TYPES = "ecnsgdr"  # chain order inside a console
AUX_TYPES = "imo"
ALL_TYPES = PROCESSOR_TYPES + AUX_TYPES

PARAM_COUNTS = {"g": 2, "s": 1, "e": 1024, "r": 768, "c": 4, "n": 4, "d": 880}


class GraphError(Exception):
    pass


class CycleDetected(GraphError):
    pass


class MultipleOutputs(GraphError):
    pass


class DanglingNode(GraphError):
    pass


class ProcessorFanInViolation(GraphError):
    pass


class NotAProcessor(GraphError):
    pass


class MalformedInput(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


def is_processor(tag):
    return tag in PROCESSOR_TYPES


@dataclass(frozen=True)
class MixGraph:
    """Immutable typed DAG. Node ids are dense integers 0..len(types)-1."""

    node_types: str
    edges: tuple[tuple[int, int], ...]
    track_labels: tuple[str, ...] | None = None
    subgroup_of: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))

    @property
    def num_nodes(self):
        return len(self.node_types)

    def nodes_of_type(self, tag):
        return [i for i, t in enumerate(self.node_types) if t == tag]

    def processor_nodes(self):
        return [i for i, t in enumerate(self.node_types) if is_processor(t)]

    def predecessors(self, node):
        return [a for a, b in self.edges if b == node]

    def successors(self, node):
        return [b for a, b in self.edges if a == node]

    def adjacency(self):
        preds = [[] for _ in range(self.num_nodes)]
        succs = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            preds[b].append(a)
            succs[a].append(b)
        return preds, succs


def topological_order(graph: MixGraph):
    """Kahn's algorithm; raises CycleDetected listing the stuck nodes."""
    n = graph.num_nodes
    indeg = [0] * n
    _, succs = graph.adjacency()
    for _, b in graph.edges:
        indeg[b] += 1
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for w in succs[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                ready.append(w)
        ready.sort()
    if len(order) != n:
        stuck = sorted(set(range(n)) - set(order))
        raise CycleDetected(f"cycle through nodes {stuck}")
    return order


def validate(graph: MixGraph):
    """Check all MixGraph invariants; raises the first violated one."""
    n = graph.num_nodes
    for i, t in enumerate(graph.node_types):
        if t not in ALL_TYPES:
            raise MalformedInput(f"unknown node type {t!r} at node {i}")
    seen = set()
    for a, b in graph.edges:
        if not (0 <= a < n and 0 <= b < n):
            raise MalformedInput(f"edge ({a}, {b}) references a missing node")
        if (a, b) in seen:
            raise DuplicateEdge(f"parallel edge ({a}, {b})")
        seen.add((a, b))

    topological_order(graph)

    outputs = graph.nodes_of_type("o")
    if len(outputs) != 1:
        raise MultipleOutputs(f"expected exactly one output node, found {outputs}")
    output = outputs[0]

    preds, succs = graph.adjacency()
    for i, t in enumerate(graph.node_types):
        fan_in = len(preds[i])
        if is_processor(t) and fan_in != 1:
            raise ProcessorFanInViolation(f"processor node {i} ({t}) has fan-in {fan_in}")
        if t == "i" and fan_in != 0:
            raise ProcessorFanInViolation(f"input node {i} has fan-in {fan_in}")
        if t in "mo" and fan_in < 1:
            raise ProcessorFanInViolation(f"{t} node {i} has no inputs")

    # every node must reach the single output
    reach = {output}
    stack = [output]
    while stack:
        v = stack.pop()
        for w in preds[v]:
            if w not in reach:
                reach.add(w)
                stack.append(w)
    missing = sorted(set(range(n)) - reach)
    if missing:
        raise DanglingNode(f"nodes {missing} have no path to the output")


def is_valid(graph: MixGraph):
    try:
        validate(graph)
        return True
    except GraphError:
        return False


@dataclass
class ParamStore:
    """Dense per-type parameter banks plus raw dry/wet logits per processor."""

    params: dict[str, np.ndarray]
    raw_weights: np.ndarray

    @classmethod
    def zeros(cls, graph: MixGraph):
        params = {
            t: np.zeros((len(graph.nodes_of_type(t)), PARAM_COUNTS[t]))
            for t in PROCESSOR_TYPES
        }
        return cls(params, np.zeros(len(graph.processor_nodes())))

    def copy(self):
        return ParamStore({t: v.copy() for t, v in self.params.items()},
                          self.raw_weights.copy())

    def effective_weights(self):
        """sigmoid(raw) per processor, always inside (0, 1)."""
        from scipy.special import expit

        return expit(self.raw_weights)

    def row_of(self, graph: MixGraph, node):
        """Row index of node inside its type bank."""
        tag = graph.node_types[node]
        return graph.nodes_of_type(tag).index(node)

    def weight_index(self, graph: MixGraph, node):
        return graph.processor_nodes().index(node)


def bypass_remove(graph: MixGraph, params: ParamStore, node_ids):
    """Remove processors, rewiring each one's predecessor to its successors.

    Returns a new (graph, params) pair; surviving node ids are re-indexed
    densely with their relative order preserved.
    """
    node_ids = set(int(v) for v in node_ids)
    for v in node_ids:
        if not (0 <= v < graph.num_nodes):
            raise MalformedInput(f"node {v} does not exist")
        if not is_processor(graph.node_types[v]):
            raise NotAProcessor(f"node {v} ({graph.node_types[v]}) is not a processor")
    if not node_ids:
        return graph, params.copy()

    preds, _ = graph.adjacency()

    def surviving_source(v):
        while v in node_ids:
            v = preds[v][0]  # processors have exactly one predecessor
        return v

    new_edges = []
    seen = set()
    for a, b in graph.edges:
        if b in node_ids:
            continue
        src = surviving_source(a)
        if (src, b) not in seen:
            seen.add((src, b))
            new_edges.append((src, b))

    keep = [v for v in range(graph.num_nodes) if v not in node_ids]
    remap = {old: new for new, old in enumerate(keep)}
    types = "".join(graph.node_types[v] for v in keep)
    edges = tuple((remap[a], remap[b]) for a, b in new_edges)
    subgroup_of = {remap[k]: remap[v] for k, v in graph.subgroup_of.items()
                   if k in remap and v in remap}
    new_graph = MixGraph(types, edges, graph.track_labels, subgroup_of)

    new_params = {}
    for t in PROCESSOR_TYPES:
        rows = [r for r, v in enumerate(graph.nodes_of_type(t)) if v not in node_ids]
        new_params[t] = params.params[t][rows].copy()
    w_rows = [r for r, v in enumerate(graph.processor_nodes()) if v not in node_ids]
    new_store = ParamStore(new_params, params.raw_weights[w_rows].copy())

    validate(new_graph)
    return new_graph, new_store


# ---------------------------------------------------------------------------
# serialization


def to_document(graph: MixGraph, params: ParamStore):
    doc = {
        "types": graph.node_types,
        "edges": [list(e) for e in graph.edges],
        "params": {t: params.params[t].tolist() for t in PROCESSOR_TYPES},
        "raw_weights": params.raw_weights.tolist(),
    }
    if graph.track_labels is not None:
        doc["track_labels"] = list(graph.track_labels)
    if graph.subgroup_of:
        doc["subgroup_of"] = {str(k): v for k, v in graph.subgroup_of.items()}
    return doc


def serialize(graph: MixGraph, params: ParamStore):
    """Graph + parameters as a UTF-8 JSON byte stream, round-trip exact."""
    validate(graph)
    return json.dumps(to_document(graph, params), indent=1).encode("utf-8")


def deserialize(stream):
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8", errors="replace")
    try:
        doc = json.loads(stream)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"bad graph document at char {exc.pos}: {exc.msg}") from None
    try:
        types = doc["types"]
        edges = tuple((int(a), int(b)) for a, b in doc["edges"])
        labels = tuple(doc["track_labels"]) if "track_labels" in doc else None
        subgroup_of = {int(k): int(v) for k, v in doc.get("subgroup_of", {}).items()}
        graph = MixGraph(types, edges, labels, subgroup_of)
        params = {}
        for t in PROCESSOR_TYPES:
            mat = np.asarray(doc["params"].get(t, []), dtype=np.float64)
            mat = mat.reshape((-1, PARAM_COUNTS[t]))
            params[t] = mat
        store = ParamStore(params, np.asarray(doc["raw_weights"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInput(f"bad graph document: {exc}") from None
    for t in PROCESSOR_TYPES:
        want = len(graph.nodes_of_type(t))
        if params[t].shape[0] != want:
            raise MalformedInput(
                f"type {t!r} has {want} nodes but {params[t].shape[0]} parameter rows")
    if store.raw_weights.shape[0] != len(graph.processor_nodes()):
        raise MalformedInput("raw_weights length does not match processor count")
    return graph, store


def save(graph: MixGraph, params: ParamStore, path):
    with open(path, "wb") as fh:
        fh.write(serialize(graph, params))


def load(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())
