"""Turning per-token Q-scores into core assignments, plus overload mitigation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .numcore import ContractError, ParamStore
from .simcore import Action, Snapshot, assign_cores
from .urgency import QuantizerConfig, short_slack_fraction, tokenize


@dataclass
class OpCounter:
    """Counts the expensive steps of one selection call."""
    sorts: int = 0
    masks: int = 0


def argmax_action(q) -> int:
    """Index of the best valid score (invalid rows are -inf); ties go to the lowest index."""
    q = np.asarray(q, dtype=np.float64)
    if q.size == 0 or not np.any(np.isfinite(q)):
        raise ContractError("argmax over a score vector with no valid entry")
    return int(np.argmax(q))


@dataclass
class Selection:
    tokens: list[int]            # chosen task rows in selection order
    counter: OpCounter


def masked_greedy(q, m: int, counter: OpCounter | None = None) -> Selection:
    """Pick up to ``m`` distinct task rows by repeated argmax-then-mask.

    Row 0 (idle) is never picked and never masked: cores only idle once the
    valid task rows run out. One stable descending sort serves every pick.
    """
    if m < 1:
        raise ContractError("need at least one core")
    q = np.asarray(q, dtype=np.float64)
    counter = counter or OpCounter()
    order = np.argsort(-q, kind="stable")
    counter.sorts += 1
    masked = np.zeros(q.shape, dtype=bool)
    chosen: list[int] = []
    for i in order:
        if len(chosen) == m:
            break
        if i == 0 or not np.isfinite(q[i]) or masked[i]:
            continue
        chosen.append(int(i))
        masked[i] = True
        counter.masks += 1
    return Selection(chosen, counter)


def selection_jacobian_mask(q, chosen) -> tuple[np.ndarray, bool]:
    """One-hot pattern d a_j / d q_i = [i == a_j] and a flag for boundary ties.

    The pattern is only meaningful off the tie set; the flag reports when a
    chosen score equals another chosen score or the best unchosen task score.
    """
    q = np.asarray(q, dtype=np.float64)
    jac = np.zeros((len(chosen), q.size))
    jac[np.arange(len(chosen)), list(chosen)] = 1.0
    picked = q[list(chosen)]
    rest = np.array([q[i] for i in range(1, q.size) if i not in set(chosen) and np.isfinite(q[i])])
    tie = len(set(picked.tolist())) < len(picked)
    if picked.size and rest.size:
        tie = tie or bool(np.isclose(picked.min(), rest.max(), rtol=0.0, atol=0.0))
    return jac, tie


# ---------------------------------------------------------------------------
# mitigation


@dataclass
class MitigationState:
    active: bool = False
    tau: float = 0.30
    alpha_nom: float = 0.10
    alpha_burst: float = 0.05
    hysteresis: int = 5
    calm: int = 0          # consecutive ticks at or below tau while active

    def __post_init__(self):
        if not 0 < self.alpha_burst < self.alpha_nom <= 1:
            raise ValueError("need 0 < alpha_burst < alpha_nom <= 1")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.hysteresis < 1:
            raise ValueError("hysteresis must be at least one tick")

    @property
    def alpha(self) -> float:
        return self.alpha_burst if self.active else self.alpha_nom


def update_mitigation(mit: MitigationState, p: float) -> tuple[MitigationState, float]:
    """Enter burst mode when p > tau; leave only after ``hysteresis`` calm ticks in a row."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"short-slack fraction must lie in [0, 1], got {p}")
    if p > mit.tau:
        new = replace(mit, active=True, calm=0)
    elif mit.active:
        calm = mit.calm + 1
        new = replace(mit, active=calm < mit.hysteresis, calm=0 if calm >= mit.hysteresis else calm)
    else:
        new = replace(mit, calm=0)
    return new, new.alpha


def effective_k(alpha: float, B: int) -> int:
    """k' = floor(alpha * B), never below one."""
    # small epsilon keeps products such as 0.29 * 100 from flooring one step low
    return max(1, math.floor(alpha * B + 1e-9))


# ---------------------------------------------------------------------------
# agent policy


@dataclass
class Decision:
    t: int
    q: np.ndarray              # (n,) scores, -inf on invalid rows
    tokens: list[int]          # chosen rows (0 means the single core idles)
    task_ids: np.ndarray       # (n,) row -> task id, 0 for idle
    s_idx: np.ndarray          # (n,) quantised slack per row
    remaining: np.ndarray      # (n,) remaining work per row
    wcet: np.ndarray           # (n,) wcet per row
    attention: np.ndarray      # (n, n) final-layer attention averaged over heads
    p: float = 0.0
    alpha: float | None = None


@dataclass
class QPolicy:
    """Greedy agent: argmax on one core, masked-greedy on several."""
    params: ParamStore
    enc_cfg: enc.EncoderConfig
    quantizer: QuantizerConfig
    mitigation: MitigationState | None = None
    record: bool = False
    decisions: list[Decision] = field(default_factory=list)
    mitigation_log: list[tuple[int, float, float]] = field(default_factory=list)

    name = "agent"

    def scores(self, snap: Snapshot):
        batch = tokenize([snap], self.quantizer)
        k_override = None
        p, alpha = short_slack_fraction(snap, self.quantizer.delta), None
        if self.mitigation is not None:
            self.mitigation, alpha = update_mitigation(self.mitigation, p)
            self.mitigation_log.append((snap.t, p, alpha))
            if self.enc_cfg.attention == "block_topk":
                sp = self.enc_cfg.sparse_params(len(snap.jobs))
                k_override = effective_k(alpha, sp.B)
        out = enc.forward(batch, self.params, self.enc_cfg, k_override=k_override)
        return out, batch, p, alpha

    def select(self, q: np.ndarray, cores: int) -> list[int]:
        if cores == 1:
            return [argmax_action(q)]
        return masked_greedy(q, cores).tokens

    def __call__(self, snap: Snapshot) -> Action:
        out, batch, p, alpha = self.scores(snap)
        q = out.q[0]
        tokens = self.select(q, snap.cores)
        if self.record:
            n = len(snap.jobs) + 1
            rem = np.array([0] + [j.remaining for j in snap.jobs])
            wc = np.array([1] + [j.wcet for j in snap.jobs])
            self.decisions.append(Decision(snap.t, q[:n].copy(), list(tokens), batch.task_ids[0, :n].copy(),
                                           batch.s_idx[0, :n].copy(), rem, wc,
                                           out.attention.mean[0, :n, :n].copy(), p, alpha))
        ids = [int(batch.task_ids[0, i]) for i in tokens if i != 0]
        return assign_cores(ids, snap)

    def __repr__(self) -> str:
        return self.name
