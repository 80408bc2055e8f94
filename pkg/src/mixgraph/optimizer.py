"""Gradient-descent training of console parameters.

Each step samples one random segment, runs the batched executor forward and
backward, replaces the multitap-delay angular-frequency gradients with the
sign-normalized surrogate rule, applies a decoupled-weight-decay adaptive
update, and projects the delay frequencies back into the unit disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .common import rng_for, seconds_to_samples
from .graph import PROCESSOR_TYPES, ParamStore
from .losses import LossConfig, mrstft, prepare_target, sparsity_loss
from .processors import DELAY_RADIUS_GAMMA, DELAY_TAPS
from .scheduler import execute_batched, plan_indices, schedule_console, schedule_greedy


class SongTooShort(Exception):
    pass


class NonFiniteLoss(Exception):
    pass


@dataclass
class Session:
    """Dry stems plus the target mixture, all stereo at the same length."""

    stems: np.ndarray   # (K, 2, L)
    target: np.ndarray  # (2, L)
    name: str = "session"

    @property
    def length(self):
        return self.stems.shape[-1]


@dataclass
class TrainConfig:
    lr: float = 0.01
    steps: int = 12_000
    segment_seconds: float = 3.8
    warmup_seconds: float = 1.0
    seed: int = 0
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.segment_seconds <= self.warmup_seconds:
            raise ValueError("segment must be longer than the warm-up exclusion")

    @property
    def segment_len(self):
        return seconds_to_samples(self.segment_seconds)

    @property
    def warmup_len(self):
        return seconds_to_samples(self.warmup_seconds)


class AdamW:
    """Adaptive moments with decoupled weight decay over named arrays."""

    def __init__(self, arrays, lr=0.01, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in arrays.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


def sample_segment(session: Session, segment_len, rng):
    """Uniformly random aligned slice of all stems and the target."""
    total = session.length
    if total < segment_len:
        raise SongTooShort(f"song has {total} samples, segment needs {segment_len}")
    offset = int(rng.integers(0, total - segment_len + 1))
    stems = session.stems[..., offset:offset + segment_len]
    target = session.target[..., offset:offset + segment_len]
    return stems, target, offset


def _delay_gradient_rule(p_rows, g_rows):
    """Sign-normalize the surrogate gradient and add the radius pull."""
    out = g_rows.copy()
    for c in range(2):
        base = c * (2 * DELAY_TAPS + DELAY_TAPS * 20)
        re = slice(base, base + DELAY_TAPS)
        im = slice(base + DELAY_TAPS, base + 2 * DELAY_TAPS)
        z = p_rows[:, re] + 1j * p_rows[:, im]
        raw = g_rows[:, re] + 1j * g_rows[:, im]
        mag = np.abs(raw)
        sgn = np.where(mag > 0, raw / np.where(mag > 0, mag, 1.0), 0.0)
        zmag = np.abs(z)
        sgn_z_conj = np.where(zmag > 0, np.conj(z) / np.where(zmag > 0, zmag, 1.0), 0.0)
        final = sgn + DELAY_RADIUS_GAMMA * (zmag - 1.0) * sgn_z_conj
        out[:, re] = final.real
        out[:, im] = final.imag
    return out


def project_delay_radius(params: ParamStore):
    """Clamp every delay angular frequency back into the unit disk."""
    d = params.params["d"]
    for c in range(2):
        base = c * 440
        re = d[:, base:base + DELAY_TAPS]
        im = d[:, base + DELAY_TAPS:base + 2 * DELAY_TAPS]
        mag = np.sqrt(re * re + im * im)
        scale = np.where(mag > 1.0, 1.0 / np.where(mag > 0, mag, 1.0), 1.0)
        d[:, base:base + DELAY_TAPS] = re * scale
        d[:, base + DELAY_TAPS:base + 2 * DELAY_TAPS] = im * scale


def train_step(graph, params, segment, cfg: TrainConfig, opt: AdamW,
               schedule=None, alpha_p=0.0):
    """One forward/backward/update on an aligned (stems, target) segment.

    The warm-up prefix feeds the processors but is excluded from the audio
    loss. Returns the updated params (in place) and a metrics dict.
    """
    stems, target = segment
    ws = cfg.warmup_len
    tape = E.Tape()
    traced = ParamStore(
        {t: tape.leaf(v) for t, v in params.params.items()},
        tape.leaf(params.raw_weights),
    )
    y, reg = execute_batched(graph, traced, stems, schedule)
    assert E.value_of(y).shape[-1] == stems.shape[-1]
    y_scored = y[:, ws:]
    target_scored = target[:, ws:]
    l_a = mrstft(y_scored, target_scored, cfg.loss)
    loss = E.add(l_a, E.mul(reg, cfg.loss.gain_staging_weight))
    l_p = sparsity_loss(E.sigmoid(traced.raw_weights))
    if alpha_p > 0.0:
        loss = E.add(loss, E.mul(l_p, alpha_p))

    values = {
        "loss": float(E.value_of(loss)),
        "L_a": float(E.value_of(l_a)),
        "L_g": float(E.value_of(reg)),
        "L_p": float(E.value_of(l_p)),
    }
    if not np.isfinite(values["loss"]):
        raise NonFiniteLoss(f"non-finite loss: {values}")

    tape.backward(loss)
    grads = {t: (traced.params[t].grad if traced.params[t].grad is not None
                 else np.zeros_like(params.params[t]))
             for t in PROCESSOR_TYPES}
    grads["w"] = (traced.raw_weights.grad if traced.raw_weights.grad is not None
                  else np.zeros_like(params.raw_weights))
    if params.params["d"].size:
        grads["d"] = _delay_gradient_rule(params.params["d"], grads["d"])

    arrays = dict(params.params)
    arrays["w"] = params.raw_weights
    opt.step(arrays, grads)
    project_delay_radius(params)
    return values


def make_optimizer(params: ParamStore, cfg: TrainConfig):
    arrays = dict(params.params)
    arrays["w"] = params.raw_weights
    return AdamW(arrays, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                 weight_decay=cfg.weight_decay)


def train(graph, params, session: Session, cfg: TrainConfig,
          schedule=None, alpha_p_fn=None, rng=None, history=None):
    """Optimize params in place for cfg.steps; returns the loss history."""
    if schedule is None:
        try:
            schedule = schedule_console(graph)
        except Exception:
            schedule = schedule_greedy(graph)
    schedule = plan_indices(graph, schedule)
    opt = make_optimizer(params, cfg)
    rng = rng or rng_for(cfg.seed, "segments")
    history = history if history is not None else []
    for step in range(cfg.steps):
        stems, target, _ = sample_segment(session, cfg.segment_len, rng)
        alpha_p = alpha_p_fn(step) if alpha_p_fn else 0.0
        t0 = time.perf_counter()
        values = train_step(graph, params, (stems, target), cfg, opt, schedule, alpha_p)
        values["step"] = len(history)
        values["wall_s"] = time.perf_counter() - t0
        history.append(values)
    return history
