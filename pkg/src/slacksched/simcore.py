"""Discrete-time preemptive scheduling environment on m identical cores.

Tick ordering at time t: the policy sees the state (releases at t already
applied), chosen jobs run for one tick, the clock advances, completions are
credited, jobs at their deadline with work left are dropped as misses, and
finally the releases at t+1 are applied.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .taskmodel import JobInstance, TaskSpec, TraceRow, trace_to_csv

REWARD_SCHEMES = ("binary", "r1_lateness", "r2_early_bonus", "r3_slack_sensitive")
_SCHEME_ALIASES = {"binary": "binary", "r1": "r1_lateness", "r2": "r2_early_bonus",
                   "r3": "r3_slack_sensitive"}

Action = tuple  # per-core task id or None (idle)


class ActionError(ValueError):
    """The action is not valid for the current state."""


class EpisodeAborted(RuntimeError):
    pass


@dataclass
class RewardConfig:
    scheme: str = "binary"
    eta: float = 0.1
    lam: float = 0.1
    delta: int = 1
    lateness_coef: float = 0.01
    early_coef: float = 0.1

    def __post_init__(self):
        self.scheme = _SCHEME_ALIASES.get(self.scheme, self.scheme)
        if self.scheme not in REWARD_SCHEMES:
            raise ValueError(f"unknown reward scheme {self.scheme!r}")
        if self.eta < 0 or self.lam < 0 or self.delta < 0:
            raise ValueError("eta, lam and delta must be non-negative")


class JobView(NamedTuple):
    """Read-only view of an active job as seen by policies and the tokenizer."""
    task_id: int
    remaining: int
    wcet: int
    period: int
    deadline: int  # absolute, net of migration penalties
    rel_deadline: int
    last_core: int | None
    release: int = 0


class Snapshot(NamedTuple):
    t: int
    jobs: tuple[JobView, ...]
    cores: int

    def slack(self, job: JobView) -> int:
        return (job.deadline - self.t) - job.remaining


@dataclass
class SimState:
    t: int
    cores: int
    jobs: dict[int, JobInstance] = field(default_factory=dict)
    core_map: list[int | None] = field(default_factory=list)
    prev_assignment: dict[int, int] = field(default_factory=dict)

    def active_jobs(self) -> list[JobInstance]:
        return [self.jobs[k] for k in sorted(self.jobs)]

    def snapshot(self) -> Snapshot:
        views = tuple(
            JobView(j.task_id, j.remaining, j.wcet, j.period, j.effective_deadline,
                    j.abs_deadline - j.release, self.prev_assignment.get(j.task_id), j.release)
            for j in self.active_jobs())
        return Snapshot(self.t, views, self.cores)


def slack(job: JobInstance | JobView, t: int) -> int:
    """Laxity (d - t) - c; negative once the job can no longer make its deadline."""
    d = job.effective_deadline if isinstance(job, JobInstance) else job.deadline
    return (d - t) - job.remaining


@dataclass(frozen=True)
class BurstSpec:
    count: int
    interval: int
    deadline: int
    duration: int
    wcet: int = 1
    start: int = 0


@dataclass
class MetricsReport:
    compliance_rate: float = 0.0
    avg_response_time: float = 0.0
    pitmd: float = 1.0
    success_flag: bool = True
    lateness_p95: float = 0.0
    jobs_released: int = 0
    jobs_completed: int = 0
    misses: int = 0
    active_at_end: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


@dataclass
class Trace:
    tasks: list[TaskSpec]
    rows: list[TraceRow] = field(default_factory=list)
    horizon: int = 0
    rewards: list[float] = field(default_factory=list)
    decisions: list[tuple[Snapshot, Action]] = field(default_factory=list)

    def to_csv(self) -> str:
        return trace_to_csv(self.rows)


class Env:
    """Gym-style wrapper: ``reset()`` then ``step(action)`` until ``done``."""

    def __init__(self, tasks: Sequence[TaskSpec], horizon: int,
                 reward: RewardConfig | None = None, cores: int = 1):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        if cores < 1:
            raise ValueError("need at least one core")
        self.tasks = list(tasks)
        self.by_id = {t.id: t for t in self.tasks}
        if len(self.by_id) != len(self.tasks):
            raise ValueError("duplicate task ids")
        self.periodic = set(self.by_id)
        self.horizon = horizon
        self.reward_cfg = reward or RewardConfig()
        self.cores = cores
        self.extra_releases: dict[int, list[int]] = {}
        self.state: SimState | None = None
        self.trace: Trace | None = None
        self._job_index: dict[int, int] = {}

    @property
    def done(self) -> bool:
        return self.state is not None and self.state.t >= self.horizon

    def reset(self) -> SimState:
        self.state = SimState(t=0, cores=self.cores, core_map=[None] * self.cores)
        self.trace = Trace(tasks=list(self.tasks), horizon=self.horizon)
        self._job_index = {}
        self._release(0, self.trace.rows)
        return self.state

    def _release(self, t: int, events: list[TraceRow]) -> None:
        if t >= self.horizon:
            return
        ids = [tid for tid in sorted(self.periodic) if t % self.by_id[tid].period == 0]
        ids += self.extra_releases.get(t, [])
        for tid in ids:
            task = self.by_id[tid]
            if tid in self.state.jobs:
                raise RuntimeError(f"task {tid} released at {t} while its previous job is active")
            k = self._job_index.get(tid, 0)
            self._job_index[tid] = k + 1
            self.state.jobs[tid] = JobInstance(tid, k, t, t + task.deadline, task.wcet, task.wcet,
                                               task.period)
            events.append(TraceRow(t, tid, "release"))

    def validate(self, action: Action) -> Action:
        action = tuple(action)
        if len(action) != self.cores:
            raise ActionError(f"action has {len(action)} entries for {self.cores} cores")
        chosen = [a for a in action if a is not None]
        if len(set(chosen)) != len(chosen):
            raise ActionError(f"task dispatched on two cores: {action}")
        for a in chosen:
            if a not in self.state.jobs:
                raise ActionError(f"task {a} has no active job at t={self.state.t}")
        return action

    def step(self, action: Action) -> tuple[SimState, float, list[TraceRow]]:
        st = self.state
        if st is None:
            raise RuntimeError("call reset() first")
        if self.done:
            raise RuntimeError("episode already finished")
        action = self.validate(action)
        cfg = self.reward_cfg
        t = st.t
        events: list[TraceRow] = []
        reward = 0.0

        running = {a: core for core, a in enumerate(action) if a is not None}
        before = {a: core for core, a in enumerate(st.core_map) if a is not None}
        for tid, core in running.items():
            job = st.jobs[tid]
            last = st.prev_assignment.get(tid)
            if last is not None and last != core:
                reward -= cfg.lam
                job.penalty += cfg.delta
                events.append(TraceRow(t, tid, "migrate", core))
        for tid, core in running.items():
            if before.get(tid) != core:
                events.append(TraceRow(t, tid, "start", core))
        for tid, core in before.items():
            if tid not in running and tid in st.jobs:
                events.append(TraceRow(t, tid, "preempt", core))

        for job in st.jobs.values():
            job.assigned_core = running.get(job.task_id)
        for tid, core in running.items():
            st.jobs[tid].remaining -= 1
            st.prev_assignment[tid] = core

        t += 1
        st.t = t
        for tid in sorted(st.jobs):
            job = st.jobs[tid]
            if job.remaining == 0:
                reward += 1.0
                if cfg.scheme == "r2_early_bonus":
                    rel = job.abs_deadline - job.release
                    reward += cfg.early_coef * (job.abs_deadline - t) / rel
                events.append(TraceRow(t, tid, "complete", running.get(tid)))
                del st.jobs[tid]
                st.prev_assignment.pop(tid, None)
            elif t >= job.effective_deadline:
                reward -= 1.0
                if cfg.scheme == "r1_lateness":
                    reward -= cfg.lateness_coef * job.remaining
                events.append(TraceRow(t, tid, "miss", running.get(tid)))
                del st.jobs[tid]
                st.prev_assignment.pop(tid, None)
        if cfg.scheme == "r3_slack_sensitive":
            reward -= cfg.eta * sum(max(0, -slack(j, t)) for j in st.jobs.values())

        st.core_map = [a if a in st.jobs else None for a in action]
        self._release(t, events)
        self.trace.rows.extend(events)
        self.trace.rewards.append(reward)
        return st, reward, events


def inject_burst(env: Env, spec: BurstSpec) -> list[tuple[int, int]]:
    """Schedule one-shot jobs: ``count`` jobs every ``interval`` ticks for ``duration`` ticks.

    Injected jobs use dedicated slot tasks so at most one job per slot is live.
    Returns the (release tick, slot task id) pairs.
    """
    if spec.duration <= 0 or spec.count <= 0:
        return []
    if spec.interval <= 0 or spec.deadline <= 0 or spec.wcet <= 0:
        raise ValueError("burst interval, deadline and wcet must be positive")
    n_bursts = spec.duration // spec.interval
    generations = max(1, math.ceil(spec.deadline / spec.interval))
    base = max(env.by_id, default=0)
    slots = []
    for g in range(generations):
        row = []
        for c in range(spec.count):
            tid = base + 1 + g * spec.count + c
            task = TaskSpec(id=tid, period=max(spec.deadline, spec.interval * generations),
                            wcet=spec.wcet, deadline=spec.deadline)
            env.tasks.append(task)
            env.by_id[tid] = task
            row.append(tid)
        slots.append(row)
    scheduled = []
    for b in range(n_bursts):
        t = spec.start + b * spec.interval
        for tid in slots[b % generations]:
            env.extra_releases.setdefault(t, []).append(tid)
            scheduled.append((t, tid))
    return scheduled


def assign_cores(selected: Sequence[int], snap: Snapshot) -> Action:
    """Place selected task ids on cores, keeping each on its last core when free.

    Remaining tasks fill the lowest free cores in selection order; spare cores idle.
    """
    m = snap.cores
    if len(selected) > m:
        raise ActionError(f"{len(selected)} tasks selected for {m} cores")
    last = {j.task_id: j.last_core for j in snap.jobs}
    cores: list[int | None] = [None] * m
    pending = []
    for tid in selected:
        c = last.get(tid)
        if c is not None and c < m and cores[c] is None:
            cores[c] = tid
        else:
            pending.append(tid)
    free = (c for c in range(m) if cores[c] is None)
    for tid in pending:
        cores[next(free)] = tid
    return tuple(cores)


Policy = Callable[[Snapshot], Action]


def run_episode(tasks: Sequence[TaskSpec], policy: Policy, horizon: int,
                reward: RewardConfig | None = None, cores: int = 1,
                bursts: Sequence[BurstSpec] = (), record_decisions: bool = False,
                env: Env | None = None) -> tuple[MetricsReport, Trace]:
    if env is None:
        env = Env(tasks, horizon, reward, cores)
        for b in bursts:
            inject_burst(env, b)
    env.reset()
    while not env.done:
        snap = env.state.snapshot()
        action = policy(snap)
        try:
            env.validate(action)
        except ActionError as exc:
            raise EpisodeAborted(f"t={snap.t}: policy returned invalid action {action!r}: {exc}") from exc
        if record_decisions:
            env.trace.decisions.append((snap, tuple(action)))
        env.step(action)
    return compute_metrics(env.trace), env.trace


# ---------------------------------------------------------------------------
# metrics


@dataclass
class JobRecord:
    task_id: int
    release: int
    completion: int | None = None
    missed_at: int | None = None
    executed: int = 0


def replay_jobs(trace: Trace) -> list[JobRecord]:
    """Rebuild per-job outcomes (and executed ticks) from the event rows."""
    live: dict[int, JobRecord] = {}
    running_since: dict[int, int] = {}
    done: list[JobRecord] = []

    def stop(tid: int, t: int) -> None:
        s = running_since.pop(tid, None)
        if s is not None:
            live[tid].executed += t - s

    for row in trace.rows:
        tid, t = row.task_id, row.t
        if row.event == "release":
            live[tid] = JobRecord(tid, t)
        elif row.event == "start":
            running_since.setdefault(tid, t)
        elif row.event == "preempt":
            stop(tid, t)
        elif row.event in ("complete", "miss"):
            stop(tid, t)
            rec = live.pop(tid)
            if row.event == "complete":
                rec.completion = t
            else:
                rec.missed_at = t
            done.append(rec)
    for tid, rec in live.items():
        stop(tid, trace.horizon)
        done.append(rec)
    return done


def compute_metrics(trace: Trace) -> MetricsReport:
    jobs = replay_jobs(trace)
    if not jobs:
        return MetricsReport()
    wcet = {t.id: t.wcet for t in trace.tasks}
    completed = [j for j in jobs if j.completion is not None]
    missed = [j for j in jobs if j.missed_at is not None]
    released = len(jobs)
    lateness = [0.0] * len(completed) + [float(wcet[j.task_id] - j.executed) for j in missed]
    critical = [t.id for t in trace.tasks if t.critical]
    missed_tasks = {j.task_id for j in missed}
    if critical:
        ok = sum(1 for tid in critical if tid not in missed_tasks)
        pitmd = ok / len(critical)
    else:
        pitmd = 1.0
    return MetricsReport(
        compliance_rate=len(completed) / released,
        avg_response_time=(float(np.mean([j.completion - j.release for j in completed]))
                           if completed else 0.0),
        pitmd=pitmd,
        success_flag=not any(tid in missed_tasks for tid in critical),
        lateness_p95=float(np.percentile(lateness, 95)) if lateness else 0.0,
        jobs_released=released,
        jobs_completed=len(completed),
        misses=len(missed),
        active_at_end=released - len(completed) - len(missed),
    )


def edf_reference_missrate(u: float) -> float:
    """Utilisation-based EDF overload reference 1 - 1/U (0 when U <= 1)."""
    return 0.0 if u <= 1.0 else 1.0 - 1.0 / u


def approximation_ratio(miss_rate: float, reference_miss_rate: float) -> float:
    return miss_rate / reference_miss_rate


def success_rate(reports: Sequence[MetricsReport]) -> float:
    """Fraction of runs in which every critical task met all deadlines."""
    if not reports:
        return 0.0
    return sum(r.success_flag for r in reports) / len(reports)
