"""Batched-execution schedules for typed DAGs and the graph executors.

A schedule is a node-subset sequence that is a partition of the nodes,
causal (edges only point from earlier to later subsets), and homogeneous
(one node type per subset), with all inputs first and the output last.
Executing a schedule gathers each subset's inputs from earlier subsets,
aggregates fan-in by summation, and runs one batched kernel per subset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import engine as E
from .graph import MixGraph, is_processor, topological_order, validate
from .processors import KERNELS, drywet_wrap

GREEDY_TIE_ORDER = "ecnsgdrm"
CONSOLE_SEQUENCE = "iecnsgdrmecnsgdro"


class SchedulerError(Exception):
    pass


class NotAConsole(SchedulerError):
    pass


class LengthMismatch(SchedulerError):
    pass


@dataclass
class StepPlan:
    gather: list            # (producer_step, row) per gathered input signal
    segments: np.ndarray | None  # fan-in aggregation map; None if all fan-in 1
    batch: int
    pslice: slice | None    # contiguous rows into the execution-ordered bank
    weight_idx: np.ndarray | None  # rows into the dry/wet weight vector


@dataclass
class Schedule:
    type_sequence: str
    subsets: list
    type_perm: dict | None = None
    plans: list | None = None

    @property
    def length(self):
        return len(self.subsets) - 1  # N, number of processing steps


def schedule_greedy(graph: MixGraph):
    """Largest-computable-type-first schedule; works on any valid graph."""
    validate(graph)
    preds, _ = graph.adjacency()
    inputs = graph.nodes_of_type("i")
    output = graph.nodes_of_type("o")[0]
    scheduled = set(inputs)
    subsets = [sorted(inputs)]
    seq = ["i"]
    pending = set(range(graph.num_nodes)) - scheduled - {output}

    while pending:
        ready = {}
        for v in pending:
            if all(p in scheduled for p in preds[v]):
                ready.setdefault(graph.node_types[v], []).append(v)
        if not ready:
            raise SchedulerError("no computable node; graph should have been invalid")
        best = max(ready, key=lambda t: (len(ready[t]), -GREEDY_TIE_ORDER.index(t)))
        batch = sorted(ready[best])
        subsets.append(batch)
        seq.append(best)
        scheduled.update(batch)
        pending.difference_update(batch)

    subsets.append([output])
    seq.append("o")
    return Schedule("".join(seq), subsets)


def console_chains(graph: MixGraph):
    """Track and subgroup chains of a console or any of its prunings.

    Returns (track_chains, subgroup_chains) where each chain is the list of
    processor node ids between an input (resp. mix) and the next mix (resp.
    output). Raises NotAConsole when the graph has any other shape.
    """
    preds, succs = graph.adjacency()
    inputs = graph.nodes_of_type("i")
    outputs = graph.nodes_of_type("o")
    if len(outputs) != 1 or not inputs:
        raise NotAConsole("console needs inputs and exactly one output")

    def walk(start, terminal_type):
        chain = []
        v = start
        last_pos = -1
        while True:
            nxt = succs[v]
            if len(nxt) != 1:
                raise NotAConsole(f"node {v} must feed exactly one node, feeds {nxt}")
            v = nxt[0]
            tag = graph.node_types[v]
            if tag == terminal_type:
                return chain, v
            if not is_processor(tag):
                raise NotAConsole(f"unexpected {tag!r} node {v} inside a chain")
            pos = "ecnsgdr".index(tag)
            if pos <= last_pos:
                raise NotAConsole(f"chain order violated at node {v}")
            last_pos = pos
            chain.append(v)

    track_chains = {}
    mixes = set()
    for i in inputs:
        chain, mix = walk(i, "m")
        track_chains[i] = chain
        mixes.add(mix)
    if mixes != set(graph.nodes_of_type("m")):
        raise NotAConsole("found mix nodes not fed by any track chain")
    subgroup_chains = {}
    for m in sorted(mixes):
        chain, out = walk(m, "o")
        subgroup_chains[m] = chain
    return track_chains, subgroup_chains


def schedule_console(graph: MixGraph):
    """Known-console schedule: a stagewise subsequence of iecnsgdrmecnsgdro."""
    validate(graph)
    track_chains, subgroup_chains = console_chains(graph)

    subsets = [sorted(graph.nodes_of_type("i"))]
    seq = ["i"]
    for stage in (track_chains, subgroup_chains):
        for tag in "ecnsgdr":
            batch = sorted(v for chain in stage.values() for v in chain
                           if graph.node_types[v] == tag)
            if batch:
                subsets.append(batch)
                seq.append(tag)
        if stage is track_chains:
            subsets.append(sorted(graph.nodes_of_type("m")))
            seq.append("m")
    subsets.append(graph.nodes_of_type("o"))
    seq.append("o")
    return Schedule("".join(seq), subsets)


def plan_indices(graph: MixGraph, schedule: Schedule):
    """Gather/aggregate/parameter/store index plans for a schedule.

    Node ids are implicitly reordered into execution order so that each
    step's parameter rows form a contiguous slice of the per-type banks.
    """
    preds, _ = graph.adjacency()
    pos = {}
    for step, subset in enumerate(schedule.subsets):
        for row, v in enumerate(subset):
            pos[v] = (step, row)

    type_perm = {}
    offsets = {}
    for step, subset in enumerate(schedule.subsets):
        tag = schedule.type_sequence[step]
        if tag in KERNELS:
            bank_rows = {v: r for r, v in enumerate(graph.nodes_of_type(tag))}
            perm = type_perm.setdefault(tag, [])
            offsets[step] = len(perm)
            perm.extend(bank_rows[v] for v in subset)

    proc_index = {v: i for i, v in enumerate(graph.processor_nodes())}
    plans = [StepPlan([], None, len(schedule.subsets[0]), None, None)]
    for step in range(1, len(schedule.subsets)):
        subset = schedule.subsets[step]
        tag = schedule.type_sequence[step]
        gather, segments = [], []
        for row, v in enumerate(subset):
            for p in sorted(preds[v]):
                src_step, src_row = pos[p]
                if src_step >= step:
                    raise SchedulerError(f"gather for node {v} references step {src_step}")
                gather.append((src_step, src_row))
                segments.append(row)
        needs_agg = len(gather) != len(subset)
        pslice = None
        weight_idx = None
        if tag in KERNELS:
            start = offsets[step]
            pslice = slice(start, start + len(subset))
            weight_idx = np.array([proc_index[v] for v in subset])
        plans.append(StepPlan(gather,
                              np.array(segments) if needs_agg else None,
                              len(subset), pslice, weight_idx))

    perms = {t: np.array(p) for t, p in type_perm.items()}
    return replace(schedule, type_perm=perms, plans=plans)


def _check_sources(graph, sources):
    sources = [np.asarray(E.value_of(s)) for s in sources]
    k = len(graph.nodes_of_type("i"))
    if len(sources) != k:
        raise LengthMismatch(f"graph has {k} inputs, got {len(sources)} sources")
    lengths = {s.shape[-1] for s in sources}
    if len(lengths) != 1:
        raise LengthMismatch(f"sources have mixed lengths {sorted(lengths)}")
    return np.stack(sources, axis=0)


def effective_weights(params, mask=None):
    w = E.sigmoid(params.raw_weights)
    if mask is not None:
        w = E.mul(w, np.asarray(mask, dtype=np.float64))
    return w


def execute_batched(graph, params, sources, schedule=None, mask=None):
    """Run the graph via its schedule; returns (stereo output, reg loss)."""
    if schedule is None:
        schedule = schedule_greedy(graph)
    if schedule.plans is None:
        schedule = plan_indices(graph, schedule)

    src = _check_sources(graph, sources)
    input_row = {v: i for i, v in enumerate(graph.nodes_of_type("i"))}
    perm0 = [input_row[v] for v in schedule.subsets[0]]
    if perm0 != list(range(len(perm0))):
        src = src[perm0]
    w_all = effective_weights(params, mask)
    banks = {}
    for tag, perm in schedule.type_perm.items():
        bank = params.params[tag]
        identity = np.array_equal(perm, np.arange(len(perm)))
        banks[tag] = bank if identity else E.take(bank, perm, axis=0)

    step_out = [src]
    reg_total = 0.0
    y = None
    for step in range(1, len(schedule.subsets)):
        plan = schedule.plans[step]
        tag = schedule.type_sequence[step]
        gathered = E.gather_rows([(step_out[s], r) for s, r in plan.gather])
        u = E.segment_sum(gathered, plan.segments, plan.batch) \
            if plan.segments is not None else gathered
        if tag in KERNELS:
            p_rows = banks[tag][plan.pslice]
            ybar, reg = KERNELS[tag](u, p_rows)
            w = E.take(w_all, plan.weight_idx)
            y = drywet_wrap(ybar, u, w)
            if reg is not None:
                reg_total = E.add(reg_total, reg)
        else:  # mix and output nodes: aggregation already summed the inputs
            y = u
        step_out.append(y)
    return y[0], reg_total


def execute_reference(graph, params, sources):
    """One-node-at-a-time oracle executor; same contract as execute_batched."""
    src = _check_sources(graph, sources)
    w_all = effective_weights(params)
    preds, _ = graph.adjacency()
    inputs = graph.nodes_of_type("i")
    input_row = {v: i for i, v in enumerate(inputs)}
    proc_index = {v: i for i, v in enumerate(graph.processor_nodes())}
    bank_row = {
        tag: {v: r for r, v in enumerate(graph.nodes_of_type(tag))} for tag in KERNELS
    }

    outputs = {}
    reg_total = 0.0
    for v in topological_order(graph):
        tag = graph.node_types[v]
        if tag == "i":
            outputs[v] = src[input_row[v]][None]
            continue
        u = outputs[preds[v][0]]
        for p in preds[v][1:]:
            u = E.add(u, outputs[p])
        if tag in KERNELS:
            rows = params.params[tag][bank_row[tag][v]:bank_row[tag][v] + 1]
            ybar, reg = KERNELS[tag](u, rows)
            w = E.take(w_all, np.array([proc_index[v]]))
            outputs[v] = drywet_wrap(ybar, u, w)
            if reg is not None:
                reg_total = E.add(reg_total, reg)
        else:
            outputs[v] = u
    out_node = graph.nodes_of_type("o")[0]
    return outputs[out_node][0], reg_total
