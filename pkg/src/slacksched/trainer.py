"""DQN training: replay, exploration, TD targets, Polyak targets and a BC warm start."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import encoder as enc
from . import numcore as nc
from .dispatch import argmax_action, masked_greedy
from .simcore import Env, RewardConfig, Snapshot, assign_cores, compute_metrics
from .taskmodel import TaskSpec, atomic_write_text
from .urgency import QuantizerConfig, tokenize

log = logging.getLogger(__name__)

CURVE_HEADER = ("episode", "epsilon", "loss", "compliance")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: str | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Transition:
    state: Snapshot
    tokens: tuple[int, ...]     # chosen rows of the state's token sequence; (0,) means idle
    reward: float
    next_state: Snapshot
    done: bool


class ReplayBuffer:
    """FIFO ring of transitions with uniform sampling (no repeats inside a batch)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def push(self, tr: Transition) -> None:
        self._items.append(tr)

    def __len__(self) -> int:
        return len(self._items)

    def items(self) -> list[Transition]:
        return list(self._items)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(len(self._items), size=min(n, len(self._items)), replace=False)
        return [self._items[i] for i in idx]


@dataclass
class ExplorationConfig:
    eps0: float = 1.0
    eps_min: float = 0.05
    decay_episodes: int = 100
    beta: float = 0.0

    def __post_init__(self):
        if not 0 <= self.eps_min <= self.eps0 <= 1:
            raise ValueError("need 0 <= eps_min <= eps0 <= 1")
        if self.beta < 0:
            raise ValueError("bonus beta must be non-negative")

    def epsilon(self, episode: int) -> float:
        if self.decay_episodes <= 0 or episode >= self.decay_episodes:
            return self.eps_min
        frac = episode / self.decay_episodes
        return self.eps0 + frac * (self.eps_min - self.eps0)


class VisitCounter:
    """N(s, a) keyed by (sorted quantised slacks, action task id)."""

    def __init__(self):
        self.counts: dict[tuple, int] = defaultdict(int)

    @staticmethod
    def key(s_idx: Iterable[int], action: int) -> tuple:
        return (tuple(sorted(int(s) for s in s_idx)), int(action))

    def get(self, s_idx, action) -> int:
        return self.counts.get(self.key(s_idx, action), 0)

    def add(self, s_idx, action) -> None:
        self.counts[self.key(s_idx, action)] += 1

    @property
    def total(self) -> int:
        return sum(self.counts.values())


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lr: float = 1e-3
    batch_size: int = 64
    capacity: int = 100_000
    warmup: int = 1000
    train_interval: int = 1
    tau: float = 0.005
    episodes: int = 100
    horizon: int = 500
    seed: int = 0
    cores: int = 1
    divergence: float = 1e6

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.train_interval < 1:
            raise ValueError("batch size and train interval must be positive")


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# learning pieces


def _task_rows(snap: Snapshot) -> dict[int, int]:
    return {j.task_id: i + 1 for i, j in enumerate(snap.jobs)}


def action_tokens(snap: Snapshot, action) -> tuple[int, ...]:
    """Rows selected by a per-core action; (0,) when every core idles."""
    rows = _task_rows(snap)
    toks = tuple(rows[a] for a in action if a is not None)
    return toks or (0,)


def td_targets(batch: Sequence[Transition], target_params, enc_cfg: enc.EncoderConfig,
               quantizer: QuantizerConfig, gamma: float):
    """Per chosen token: y = r/k + gamma * max_a Q_target(s', a), no bootstrap when done.

    Returns (y, rows, cols) with one entry per (transition, chosen token).
    """
    if not batch:
        raise nc.ContractError("empty batch")
    live = [i for i, tr in enumerate(batch) if not tr.done]
    boot = np.zeros(len(batch))
    if live and gamma > 0:
        q_next = enc.forward(tokenize([batch[i].next_state for i in live], quantizer),
                             target_params, enc_cfg).q
        boot[live] = q_next.max(axis=1)
    y, rows, cols = [], [], []
    for i, tr in enumerate(batch):
        k = len(tr.tokens)
        for tok in tr.tokens:
            y.append(tr.reward / k + gamma * boot[i])
            rows.append(i)
            cols.append(tok)
    return np.array(y), np.array(rows), np.array(cols)


def dqn_loss(batch: Sequence[Transition], leaves, params, enc_cfg: enc.EncoderConfig,
             quantizer: QuantizerConfig, y, rows, cols) -> nc.Tensor:
    """Mean squared TD error over the chosen tokens (graph built on ``leaves``)."""
    out = enc.forward(tokenize([tr.state for tr in batch], quantizer), params, enc_cfg, leaves=leaves)
    pred = nc.pick(out.q_t, rows, cols)
    resid = nc.add(pred, nc.Tensor(-np.asarray(y, dtype=np.float64)))
    loss = nc.mean_all(nc.square(resid))
    if not np.isfinite(loss.data):
        bad = int(np.flatnonzero(~np.isfinite(resid.data))[0]) if np.any(~np.isfinite(resid.data)) else -1
        raise FloatingPointError(f"non-finite loss (first bad entry {bad}, batch row {rows[bad]})")
    return loss


def polyak_update(target: nc.ParamStore, online: nc.ParamStore, tau: float) -> nc.ParamStore:
    """In-place target <- tau * online + (1 - tau) * target; returns target."""
    if set(target) != set(online):
        raise nc.ContractError("target and online parameter keys differ")
    for k, v in online.items():
        if target[k].shape != v.shape:
            raise nc.ContractError(f"shape mismatch for {k}: {target[k].shape} vs {v.shape}")
        target[k] *= 1.0 - tau
        target[k] += tau * v
    return target


def select_exploratory(q, snap: Snapshot, s_idx: np.ndarray, eps: float,
                       rng: np.random.Generator, beta: float = 0.0,
                       counter: VisitCounter | None = None) -> tuple[int, ...]:
    """Epsilon-greedy with an optional inverse-visit bonus beta / sqrt(N(s,a) + 1).

    ``q`` is a score vector or a zero-argument callable producing one; it is
    only evaluated on the exploit branch. Uniform exploration on one core
    covers all valid rows (idle included); on several cores it picks a random
    subset via masked-greedy.
    """
    n = len(snap.jobs) + 1
    if rng.random() < eps:
        if snap.cores == 1:
            return (int(rng.integers(n)),)
        return tuple(masked_greedy(np.concatenate([[np.inf], rng.random(n - 1)]), snap.cores).tokens) or (0,)
    if callable(q):
        q = q()
    q = np.asarray(q[:n], dtype=np.float64)
    ids = [0] + [j.task_id for j in snap.jobs]
    sig = s_idx[1:n]
    if beta > 0:
        if counter is None:
            raise nc.ContractError("bonus exploration needs a visit counter")
        q = q + np.array([beta / math.sqrt(counter.get(sig, a) + 1) for a in ids])
    if snap.cores == 1:
        chosen = (argmax_action(q),)
    else:
        chosen = tuple(masked_greedy(q, snap.cores).tokens) or (0,)
    if beta > 0:
        for tok in chosen:
            counter.add(sig, ids[tok])
    return chosen


def tokens_to_action(snap: Snapshot, tokens: Sequence[int]):
    ids = [snap.jobs[t - 1].task_id for t in tokens if t != 0]
    return assign_cores(ids, snap)


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    params: nc.ParamStore
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    visits: VisitCounter | None = None
    steps: int = 0

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for ep, eps, loss, comp in self.curve:
            w.writerow((ep, f"{eps:.6f}", "" if math.isnan(loss) else f"{loss:.8g}", f"{comp:.6f}"))
        return buf.getvalue()


def save_checkpoint(path, params: nc.ParamStore, enc_cfg, quantizer, cfg: TrainConfig, **extra) -> None:
    meta = {"encoder": enc_cfg.to_dict(), "quantizer": quantizer.to_dict(), "train": asdict(cfg)}
    meta["config_hash"] = config_hash(meta["encoder"], meta["quantizer"], meta["train"])
    meta.update(extra)
    params.save(path, extra=meta)


def train(tasks: Sequence[TaskSpec], cfg: TrainConfig, enc_cfg: enc.EncoderConfig,
          quantizer: QuantizerConfig, expl: ExplorationConfig | None = None,
          reward: RewardConfig | None = None, params: nc.ParamStore | None = None,
          curve_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          on_episode: Callable[[int, nc.ParamStore], None] | None = None,
          until: Callable[[tuple], bool] | None = None) -> TrainResult:
    """Run ``cfg.episodes`` episodes of DQN on the task set.

    ``on_episode(ep, params)`` is called before episode ``ep`` and once more
    after the last one (with ``ep == cfg.episodes``); it is how callers plug in
    greedy evaluations without touching the training randomness. ``until``
    sees each finished learning-curve row and stops training early when true.
    """
    expl = expl or ExplorationConfig()
    root = np.random.SeedSequence(cfg.seed)
    init_seed, act_seed, replay_seed = (int(s.generate_state(1)[0]) for s in root.spawn(3))
    if params is None:
        params = enc.init_params(enc_cfg, quantizer.Q, seed=init_seed,
                                 reserve=quantizer.reserve_long_slack)
    params = params.copy()
    target = params.copy()
    opt = nc.Adam(lr=cfg.lr)
    act_rng = np.random.default_rng(act_seed)
    replay_rng = np.random.default_rng(replay_seed)
    buffer = ReplayBuffer(cfg.capacity)
    visits = VisitCounter()
    result = TrainResult(params, visits=visits)
    steps = 0

    def diverged(msg: str):
        path = None
        if checkpoint_path is not None:
            path = str(checkpoint_path)
            save_checkpoint(path, params, enc_cfg, quantizer, cfg, aborted=msg)
        raise TrainingDiverged(msg, path)

    for ep in range(cfg.episodes):
        if on_episode is not None:
            on_episode(ep, params)
        eps = expl.epsilon(ep)
        env = Env(tasks, cfg.horizon, reward, cfg.cores)
        env.reset()
        losses = []
        while not env.done:
            snap = env.state.snapshot()
            batch = tokenize([snap], quantizer)

            def scores(batch=batch):
                return enc.forward(batch, params, enc_cfg).q[0]

            tokens = select_exploratory(scores, snap, batch.s_idx[0], eps, act_rng, expl.beta, visits)
            _, r, _ = env.step(tokens_to_action(snap, tokens))
            buffer.push(Transition(snap, tokens, r, env.state.snapshot(), env.done))
            steps += 1
            if len(buffer) >= max(cfg.warmup, cfg.batch_size) and steps % cfg.train_interval == 0:
                sample = buffer.sample(cfg.batch_size, replay_rng)
                y, rows, cols = td_targets(sample, target, enc_cfg, quantizer, cfg.gamma)
                leaves = params.leaves()
                try:
                    loss = dqn_loss(sample, leaves, params, enc_cfg, quantizer, y, rows, cols)
                except FloatingPointError as exc:
                    diverged(f"episode {ep}, step {steps}: {exc}")
                if loss.data > cfg.divergence:
                    diverged(f"episode {ep}, step {steps}: loss {float(loss.data):.3g} exceeds {cfg.divergence:g}")
                loss.backward()
                opt.step(params, nc.collect_grads(leaves))
                polyak_update(target, params, cfg.tau)
                losses.append(float(loss.data))
        comp = compute_metrics(env.trace).compliance_rate
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        result.curve.append((ep, eps, mean_loss, comp))
        log.info("episode %d eps=%.3f loss=%s compliance=%.4f", ep, eps, mean_loss, comp)
        if until is not None and until(result.curve[-1]):
            break
    if on_episode is not None:
        on_episode(cfg.episodes, params)
    result.steps = steps
    if curve_path is not None:
        atomic_write_text(curve_path, result.curve_csv())
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, enc_cfg, quantizer, cfg)
    return result


def teacher_pairs(decisions: Iterable[tuple[Snapshot, tuple]]) -> list[tuple[Snapshot, tuple[int, ...]]]:
    """(state, teacher action) pairs from a trace's recorded decisions, as token rows."""
    return [(snap, action_tokens(snap, action)) for snap, action in decisions]


def bc_nll(pairs, leaves, params, enc_cfg, quantizer) -> nc.Tensor:
    """Mean -log softmax(q)[teacher row] over valid rows."""
    batch = tokenize([s for s, _ in pairs], quantizer)
    out = enc.forward(batch, params, enc_cfg, leaves=leaves)
    logits = nc.add(out.q_t, nc.Tensor(np.where(batch.valid, 0.0, enc.NEG)))
    logp = nc.log_softmax_rows(logits)
    rows = np.array([i for i, (_, toks) in enumerate(pairs) for _ in toks])
    cols = np.array([t for _, toks in pairs for t in toks])
    return nc.mul_scalar(nc.mean_all(nc.pick(logp, rows, cols)), -1.0)


def bc_pretrain(pairs: Sequence[tuple[Snapshot, tuple[int, ...]]], params: nc.ParamStore,
                enc_cfg: enc.EncoderConfig, quantizer: QuantizerConfig, epochs: int = 50,
                lr: float = 1e-3) -> tuple[nc.ParamStore, list[float]]:
    """Full-batch Adam on the imitation NLL; returns new params and the per-epoch loss."""
    params = params.copy()
    if not pairs or epochs <= 0:
        return params, []
    opt = nc.Adam(lr=lr)
    losses = []
    for _ in range(epochs):
        leaves = params.leaves()
        loss = bc_nll(pairs, leaves, params, enc_cfg, quantizer)
        loss.backward()
        losses.append(float(loss.data))
        opt.step(params, nc.collect_grads(leaves))
    return params, losses
