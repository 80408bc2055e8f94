"""Tolerance-constrained iterative pruning of a trained mixing console.

The search alternates pruning passes with fine-tuning. A pass runs masking
trials: candidates are masked (dry/wet weight forced to zero), the eval-set
audio loss is measured, and the mask is kept only while the loss stays below
the best observed loss plus the tolerance. Accepted masks are then applied
structurally (bypass removal) before fine-tuning resumes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .common import round_half_away, rng_for, seconds_to_samples
from .graph import PROCESSOR_TYPES, bypass_remove, serialize
from .losses import mrstft, prepare_target
from .optimizer import Session, TrainConfig, train
from .scheduler import execute_batched, plan_indices, schedule_console, schedule_greedy

MODES = ("bruteforce", "drywet", "hybrid")


@dataclass
class PruneConfig:
    tolerance: float = 0.01
    tolerance_relative: float | None = None  # overrides: tau = rel * console loss
    mode: str = "hybrid"
    iterations: int = 12
    seed: int = 0
    console_steps: int = 6_000
    finetune_steps: int = 500
    eval_segments: int = 8
    eval_segment_seconds: float = 3.8
    sparsity_max: float = 1e-4
    sparsity_ramp_steps: int = 4_000
    console_sparsity: float = 0.0  # optional alpha_p during console training
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class TrialRecord:
    iteration: int
    mode: str
    candidates: tuple  # console slot ids
    loss: float
    la_min_before: float
    accepted: bool


@dataclass
class PruneState:
    alive: np.ndarray  # bool per console processor slot
    la_min: float
    tolerance: float
    iteration: int = 0
    ledger: list = field(default_factory=list)

    @property
    def trial_count(self):
        return len(self.ledger)


@dataclass
class PruneReport:
    console_loss: float
    final_loss: float
    la_min: float
    tolerance: float
    mode: str
    console_counts: dict
    pruned_counts: dict
    trial_count: int
    wall_seconds: float

    @property
    def pruning_ratio(self):
        total = sum(self.console_counts.values())
        return sum(self.pruned_counts.values()) / total if total else 0.0

    def ratio_of(self, tag):
        n = self.console_counts.get(tag, 0)
        return self.pruned_counts.get(tag, 0) / n if n else 0.0


@dataclass
class EvalSet:
    segments: list  # (stems_slice, prepared_target_after_warmup)
    warmup_len: int


def build_eval_set(session: Session, cfg: PruneConfig):
    """Deterministic, evenly spaced segments reused by every trial."""
    seg_len = seconds_to_samples(cfg.eval_segment_seconds)
    ws = cfg.train.warmup_len
    span = session.length - seg_len
    if span < 0:
        raise ValueError("session shorter than one eval segment")
    offsets = np.unique(np.round(np.linspace(0, span, cfg.eval_segments)).astype(int))
    segments = []
    for off in offsets:
        stems = session.stems[..., off:off + seg_len]
        target = session.target[..., off + ws:off + seg_len]
        segments.append((stems, prepare_target(target, cfg.train.loss)))
    return EvalSet(segments, ws)


def eval_loss(graph, params, mask, eval_set: EvalSet, schedule=None):
    """Mean eval-set audio loss with weights w * mask; no parameter updates."""
    if schedule is None:
        schedule = _schedule_for(graph)
    total = 0.0
    for stems, target in eval_set.segments:
        y, _ = execute_batched(graph, params, stems, schedule, mask=mask)
        total += float(E.value_of(mrstft(y[:, eval_set.warmup_len:], target)))
    return total / len(eval_set.segments)


def _schedule_for(graph):
    try:
        sched = schedule_console(graph)
    except Exception:
        sched = schedule_greedy(graph)
    return plan_indices(graph, sched)


def prune_bruteforce_pass(state: PruneState, graph, params, eval_set,
                          mask, orig_ids, rng, schedule=None):
    """Try every alive processor one by one, in seeded random order."""
    schedule = schedule or _schedule_for(graph)
    order = [i for i in range(mask.size) if mask[i] > 0]
    order = [order[j] for j in rng.permutation(len(order))]
    for local in order:
        trial = mask.copy()
        trial[local] = 0.0
        la = eval_loss(graph, params, trial, eval_set, schedule)
        accepted = la < state.la_min + state.tolerance
        state.ledger.append(TrialRecord(state.iteration, "bruteforce",
                                        (orig_ids[local],), la, state.la_min, accepted))
        if accepted:
            state.la_min = min(state.la_min, la)
            mask[local] = 0.0
    return mask


def prune_drywet_pass(state: PruneState, graph, params, eval_set,
                      mask, orig_ids, rng, schedule=None):
    """Per-type ratio search over the smallest dry/wet weights."""
    schedule = schedule or _schedule_for(graph)
    procs = graph.processor_nodes()
    weights = params.effective_weights()
    pools = {}
    for idx, v in enumerate(procs):
        if mask[idx] > 0:
            pools.setdefault(graph.node_types[v], []).append(idx)
    counts = {t: len(p) for t, p in pools.items()}
    ratios = {t: 0.1 for t in pools}
    types = sorted(pools)

    while types:
        t = types[int(rng.integers(0, len(types)))]
        k = max(1, round_half_away(counts[t] * ratios[t]))
        pool = pools[t]
        if not pool:
            types.remove(t)
            continue
        chosen = sorted(pool, key=lambda i: weights[i])[:k]
        trial = mask.copy()
        trial[chosen] = 0.0
        la = eval_loss(graph, params, trial, eval_set, schedule)
        accepted = la < state.la_min + state.tolerance
        state.ledger.append(TrialRecord(
            state.iteration, "drywet", tuple(orig_ids[i] for i in chosen),
            la, state.la_min, accepted))
        if accepted:
            state.la_min = min(state.la_min, la)
            mask[chosen] = 0.0
            pools[t] = [i for i in pool if i not in set(chosen)]
            if not pools[t]:
                types.remove(t)
        elif k > 1:
            ratios[t] /= 2.0
        else:
            types.remove(t)
    return mask


def _mode_for_iteration(mode, iteration):
    if mode == "hybrid":
        return "bruteforce" if iteration % 4 == 0 else "drywet"
    return mode


def prune_song(graph, params, session: Session, cfg: PruneConfig,
               snapshot_hook=None):
    """Full search: train console, then iterate pruning passes + fine-tuning.

    Returns (pruned graph, its params, PruneState, PruneReport, history).
    snapshot_hook(iteration, graph, params), when given, observes each
    hard-pruned graph (the console is reported as iteration 0).
    """
    t_start = time.perf_counter()
    params = params.copy()
    history = []
    train_cfg = cfg.train
    train_rng = rng_for(cfg.seed, "train-segments")
    order_rng = rng_for(cfg.seed, "prune-order")

    console_counts = {t: len(graph.nodes_of_type(t)) for t in PROCESSOR_TYPES}
    console_cfg = TrainConfig(**{**train_cfg.__dict__, "steps": cfg.console_steps})
    console_alpha = None
    if cfg.console_sparsity > 0:
        ramp = max(1, cfg.console_steps // 4)
        console_alpha = lambda s: cfg.console_sparsity * min(1.0, s / ramp)
    train(graph, params, session, console_cfg, rng=train_rng, history=history,
          alpha_p_fn=console_alpha)

    eval_set = build_eval_set(session, cfg)
    la_console = eval_loss(graph, params, np.ones(len(graph.processor_nodes())), eval_set)
    tolerance = (cfg.tolerance_relative * la_console
                 if cfg.tolerance_relative is not None else cfg.tolerance)
    state = PruneState(
        alive=np.ones(len(graph.processor_nodes()), dtype=bool),
        la_min=la_console, tolerance=tolerance)
    if snapshot_hook:
        snapshot_hook(0, graph, params)

    orig_ids = list(range(len(graph.processor_nodes())))
    ft_step = 0

    def alpha_p(step, base=None):
        gs = step + (base if base is not None else 0)
        if cfg.sparsity_ramp_steps <= 0:
            return cfg.sparsity_max
        return cfg.sparsity_max * min(1.0, gs / cfg.sparsity_ramp_steps)

    for iteration in range(1, cfg.iterations + 1):
        state.iteration = iteration
        mode = _mode_for_iteration(cfg.mode, iteration)
        mask = np.ones(len(graph.processor_nodes()))
        schedule = _schedule_for(graph)
        if mode == "bruteforce":
            mask = prune_bruteforce_pass(state, graph, params, eval_set,
                                         mask, orig_ids, order_rng, schedule)
        else:
            mask = prune_drywet_pass(state, graph, params, eval_set,
                                     mask, orig_ids, order_rng, schedule)

        dropped_local = np.where(mask == 0)[0]
        if dropped_local.size:
            for i in dropped_local:
                state.alive[orig_ids[i]] = False
            procs = graph.processor_nodes()
            graph, params = bypass_remove(graph, params,
                                          {procs[i] for i in dropped_local})
            orig_ids = [oid for i, oid in enumerate(orig_ids) if i not in set(dropped_local)]

        base = ft_step
        ft_cfg = TrainConfig(**{**train_cfg.__dict__, "steps": cfg.finetune_steps})
        train(graph, params, session, ft_cfg, rng=train_rng,
              alpha_p_fn=lambda s: alpha_p(s, base), history=history)
        ft_step += cfg.finetune_steps
        if snapshot_hook:
            snapshot_hook(iteration, graph, params)

    final_loss = eval_loss(graph, params, np.ones(len(graph.processor_nodes())), eval_set)
    pruned_counts = {t: console_counts[t] - len(graph.nodes_of_type(t))
                     for t in PROCESSOR_TYPES}
    report = PruneReport(
        console_loss=la_console, final_loss=final_loss, la_min=state.la_min,
        tolerance=tolerance, mode=cfg.mode, console_counts=console_counts,
        pruned_counts=pruned_counts, trial_count=state.trial_count,
        wall_seconds=time.perf_counter() - t_start)
    return graph, params, state, report, history


def weight_vs_delta(graph, params, eval_set: EvalSet):
    """Per-processor (weight, loss increase when masked) pairs plus Spearman.

    The loss increase is measured by single-node masking against the unmasked
    eval loss; nodes whose mask makes no difference report delta 0 exactly.
    """
    from .metrics import spearman

    schedule = _schedule_for(graph)
    procs = graph.processor_nodes()
    weights = params.effective_weights()
    base_mask = np.ones(len(procs))
    base = eval_loss(graph, params, base_mask, eval_set, schedule)
    rows = []
    for idx, v in enumerate(procs):
        trial = base_mask.copy()
        trial[idx] = 0.0
        delta = eval_loss(graph, params, trial, eval_set, schedule) - base
        rows.append({"node": v, "type": graph.node_types[v],
                     "weight": float(weights[idx]), "delta": float(delta)})
    rho = spearman([r["weight"] for r in rows], [r["delta"] for r in rows])
    return rows, rho
