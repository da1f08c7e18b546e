"""Attention diagnostics, policy heatmaps, rule distillation and scaling fits."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import WeightedSlack
from .dispatch import Decision
from .numcore import ContractError
from .simcore import Action, Snapshot
from .urgency import QuantizerConfig, quantize

DIAG_HEADER = ("t", "entropy", "align_top1", "align_topk")
HEATMAP_HEADER = ("slack_bin", "rem_bin", "p", "count")


def attention_entropy(row, tol: float = 1e-6) -> float:
    """Shannon entropy (nats) of an attention row; zeros contribute nothing."""
    a = np.asarray(row, dtype=np.float64)
    if abs(a.sum() - 1.0) > tol:
        raise ContractError(f"attention row sums to {a.sum():.9f}, not 1")
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def topk_alignment(row, chosen: Sequence[int], k: int) -> float:
    """|Top_k(row) & chosen| / min(k, |chosen|); ties in the row go to the lower index."""
    if k < 1:
        raise ContractError("k must be at least 1")
    chosen = set(int(c) for c in chosen)
    if not chosen:
        return 0.0
    a = np.asarray(row, dtype=np.float64)
    top = np.argsort(-a, kind="stable")[:k]
    return len(chosen.intersection(int(i) for i in top)) / min(k, len(chosen))


@dataclass
class RunDiagnostics:
    t: list[int] = field(default_factory=list)
    entropy: list[float] = field(default_factory=list)
    align_top1: list[float] = field(default_factory=list)
    align_topk: list[float] = field(default_factory=list)
    valid: list[int] = field(default_factory=list)
    p: list[float] = field(default_factory=list)
    alpha: list[float | None] = field(default_factory=list)

    @property
    def mean_entropy(self) -> float:
        return float(np.mean(self.entropy)) if self.entropy else float("nan")

    @property
    def mean_align_top1(self) -> float:
        return float(np.mean(self.align_top1)) if self.align_top1 else float("nan")

    @property
    def mean_align_topk(self) -> float:
        return float(np.mean(self.align_topk)) if self.align_topk else float("nan")

    def to_csv(self, mitigation: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DIAG_HEADER + (("p", "alpha") if mitigation else ()))
        for i, t in enumerate(self.t):
            row = [t, f"{self.entropy[i]:.10g}", f"{self.align_top1[i]:.10g}", f"{self.align_topk[i]:.10g}"]
            if mitigation:
                a = self.alpha[i]
                row += [f"{self.p[i]:.10g}", "" if a is None else f"{a:g}"]
            w.writerow(row)
        return buf.getvalue()


def run_diagnostics(decisions: Sequence[Decision], k: int = 2) -> RunDiagnostics:
    """Per-step entropy and alignment of the decision (idle) token's attention row."""
    out = RunDiagnostics()
    for d in decisions:
        row = d.attention[0]
        out.t.append(d.t)
        out.entropy.append(attention_entropy(row))
        out.align_top1.append(topk_alignment(row, d.tokens, 1))
        out.align_topk.append(topk_alignment(row, d.tokens, k))
        out.valid.append(len(row))
        out.p.append(d.p)
        out.alpha.append(d.alpha)
    return out


def attention_dump_csv(decisions: Sequence[Decision]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("t", "i", "j", "weight"))
    for d in decisions:
        n = d.attention.shape[0]
        for i in range(n):
            for j in range(n):
                w.writerow((d.t, i, j, f"{d.attention[i, j]:.10g}"))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# policy structure


@dataclass
class Candidates:
    """Per-decision candidate features (task rows only) and the chosen task ids."""
    task_ids: np.ndarray
    s_idx: np.ndarray
    remaining: np.ndarray
    wcet: np.ndarray
    chosen: frozenset
    cores: int


def candidates(pairs: Sequence[tuple[Snapshot, Action]], quantizer: QuantizerConfig) -> list[Candidates]:
    out = []
    for snap, action in pairs:
        jobs = snap.jobs
        out.append(Candidates(
            np.array([j.task_id for j in jobs], dtype=np.int64),
            np.asarray(quantize([snap.slack(j) for j in jobs], quantizer), dtype=np.int64).reshape(-1),
            np.array([j.remaining for j in jobs], dtype=np.int64),
            np.array([j.wcet for j in jobs], dtype=np.int64),
            frozenset(a for a in action if a is not None),
            snap.cores))
    return out


@dataclass
class Heatmap:
    p: np.ndarray          # (slack_bins, rem_bins), nan where unobserved
    count: np.ndarray
    sparse: np.ndarray     # True where fewer than min_count observations

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEATMAP_HEADER)
        for i in range(self.p.shape[0]):
            for j in range(self.p.shape[1]):
                p = self.p[i, j]
                w.writerow((i, j, "" if np.isnan(p) else f"{p:.10g}", int(self.count[i, j])))
        return buf.getvalue()


def policy_heatmap(pairs: Sequence[tuple[Snapshot, Action]], quantizer: QuantizerConfig,
                   slack_bins: int = 10, rem_bins: int = 10, min_count: int = 10) -> Heatmap:
    """P(selected | slack bin, remaining-fraction bin) over all candidate jobs."""
    hits = np.zeros((slack_bins, rem_bins))
    count = np.zeros((slack_bins, rem_bins), dtype=np.int64)
    for c in candidates(pairs, quantizer):
        if not c.task_ids.size:
            continue
        sb = np.minimum(c.s_idx * slack_bins // quantizer.Q, slack_bins - 1)
        rb = np.minimum((c.remaining / c.wcet * rem_bins).astype(np.int64), rem_bins - 1)
        sel = np.array([tid in c.chosen for tid in c.task_ids], dtype=np.float64)
        np.add.at(count, (sb, rb), 1)
        np.add.at(hits, (sb, rb), sel)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(count > 0, hits / np.maximum(count, 1), np.nan)
    return Heatmap(p, count, count < min_count)


def _rule_choice(c: Candidates, rule: WeightedSlack) -> frozenset:
    if not c.task_ids.size:
        return frozenset()
    prio = rule.alpha / (c.s_idx + 1) + rule.beta / (c.remaining + 1)
    order = np.lexsort((c.task_ids, -prio))
    return frozenset(int(t) for t in c.task_ids[order[:c.cores]])


@dataclass
class Distillation:
    alpha: float
    beta: float
    agreement: float
    grid: np.ndarray
    curve: np.ndarray

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "agreement": self.agreement}


def distill_rule(pairs: Sequence[tuple[Snapshot, Action]], quantizer: QuantizerConfig,
                 step: float = 0.01) -> Distillation:
    """Grid-search WeightedSlack(alpha, 1 - alpha) for the best action-set agreement.

    Among equally good alphas the middle of the longest contiguous run wins.
    """
    cands = candidates(pairs, quantizer)
    n_grid = int(round(1.0 / step))
    grid = np.arange(n_grid + 1) / n_grid
    curve = np.zeros(grid.size)
    for g, a in enumerate(grid):
        rule = WeightedSlack(float(a), float(1.0 - a), quantizer)
        if cands:
            curve[g] = sum(_rule_choice(c, rule) == c.chosen for c in cands) / len(cands)
    best = curve.max() if curve.size else 0.0
    on = curve == best
    runs, start = [], None
    for i, flag in enumerate(np.append(on, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((i - start, -start, start, i - 1))
            start = None
    _, _, lo, hi = max(runs)
    idx = (lo + hi) // 2
    a = float(grid[idx])
    return Distillation(a, 1.0 - a, float(best), grid, curve)


def agreement(pairs: Sequence[tuple[Snapshot, Action]], policy: Callable[[Snapshot], Action]) -> float:
    """Fraction of recorded states on which ``policy`` runs the same set of tasks."""
    if not pairs:
        return 1.0
    same = 0
    for snap, action in pairs:
        mine = frozenset(a for a in policy(snap) if a is not None)
        same += mine == frozenset(a for a in action if a is not None)
    return same / len(pairs)


def fit_power_law(sizes, times) -> tuple[float, float, float]:
    """Least squares on log T = log c + b log N; returns (c, b, R^2 in log space)."""
    x = np.asarray(sizes, dtype=np.float64)
    y = np.asarray(times, dtype=np.float64)
    if x.size != y.size or x.size < 4:
        raise ValueError("need at least four (size, time) pairs")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("sizes and times must be positive")
    lx, ly = np.log(x), np.log(y)
    b, log_c = np.polyfit(lx, ly, 1)
    resid = ly - (log_c + b * lx)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(math.exp(log_c)), float(b), r2
