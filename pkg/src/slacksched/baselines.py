"""Classical dispatch rules used as opponents, oracles and imitation teachers.

All rules rank the active jobs and hand the top ``m`` to ``assign_cores``;
ties go to the lowest task id.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .simcore import Action, JobView, Snapshot, assign_cores
from .taskmodel import TaskSpec
from .urgency import QuantizerConfig, quantize


def default_quantizer(tasks: Sequence[TaskSpec], Q: int = 128, scheme: str = "uniform") -> QuantizerConfig:
    """Uniform bins over [0, max period)."""
    return QuantizerConfig.for_horizon(float(max(t.period for t in tasks)), Q=Q, scheme=scheme)


class RankPolicy:
    name = "rank"

    def key(self, job: JobView, snap: Snapshot):
        raise NotImplementedError

    def ranked(self, snap: Snapshot) -> list[int]:
        jobs = sorted(snap.jobs, key=lambda j: (self.key(j, snap), j.task_id))
        return [j.task_id for j in jobs]

    def __call__(self, snap: Snapshot) -> Action:
        return assign_cores(self.ranked(snap)[:snap.cores], snap)

    def __repr__(self) -> str:
        return self.name


class EDF(RankPolicy):
    name = "edf"

    def key(self, job, snap):
        return job.deadline


class RM(RankPolicy):
    name = "rm"

    def key(self, job, snap):
        return job.period


class SRPT(RankPolicy):
    name = "srpt"

    def key(self, job, snap):
        return job.remaining


class FCFS(RankPolicy):
    name = "fcfs"

    def key(self, job, snap):
        return job.release


class MinSlack(RankPolicy):
    """Least-laxity first on raw (unquantised) slack."""
    name = "minslack"

    def key(self, job, snap):
        return snap.slack(job)


@dataclass(repr=False)
class WeightedSlack(RankPolicy):
    """Priority alpha/(s+1) + beta/(c+1) on quantised slack s and remaining work c."""
    alpha: float = 0.73
    beta: float = 0.27
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)

    def __post_init__(self):
        total = self.alpha + self.beta
        if total <= 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("WeightedSlack weights must be non-negative and not both zero")
        self.alpha, self.beta = self.alpha / total, self.beta / total

    @property
    def name(self) -> str:
        return f"wslack:{self.alpha:g},{self.beta:g}"

    def priority(self, s_idx: int, remaining: int) -> float:
        return self.alpha / (s_idx + 1) + self.beta / (remaining + 1)

    def key(self, job, snap):
        return -self.priority(quantize(snap.slack(job), self.quantizer), job.remaining)


class RandomPolicy:
    """Uniform over the N+1 tokens (idle included), drawn without replacement per core."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.name = f"random:{seed}"

    def __call__(self, snap: Snapshot) -> Action:
        ids = [0] + [j.task_id for j in snap.jobs]
        picks = self.rng.permutation(len(ids))[:snap.cores]
        return assign_cores([ids[i] for i in picks if i != 0], snap)

    def __repr__(self) -> str:
        return self.name


class IdleAlways:
    name = "idle"

    def __call__(self, snap: Snapshot) -> Action:
        return (None,) * snap.cores

    def __repr__(self) -> str:
        return self.name


_SIMPLE = {"edf": EDF, "rm": RM, "srpt": SRPT, "fcfs": FCFS, "minslack": MinSlack, "llf": MinSlack,
           "idle": IdleAlways}


def make_policy(spec: str, tasks: Sequence[TaskSpec] | None = None,
                quantizer: QuantizerConfig | None = None):
    """Build a baseline from a CLI string such as ``edf`` or ``wslack:0.73,0.27``."""
    name, _, arg = spec.strip().lower().partition(":")
    if name in _SIMPLE and not arg:
        return _SIMPLE[name]()
    if name == "random":
        return RandomPolicy(int(arg) if arg else 0)
    if name == "wslack":
        try:
            a, b = (float(x) for x in arg.split(",")) if arg else (0.73, 0.27)
        except ValueError as exc:
            raise ValueError(f"bad WeightedSlack weights in {spec!r}") from exc
        if quantizer is None:
            if tasks is None:
                raise ValueError("wslack needs a task set or quantizer to fix its bins")
            quantizer = default_quantizer(tasks)
        return WeightedSlack(a, b, quantizer)
    raise ValueError(f"unknown policy {spec!r}")
