"""Periodic task model, synthetic task-set generation and file formats."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TRACE_EVENTS = ("release", "start", "preempt", "complete", "miss", "migrate")
TRACE_HEADER = ("t", "task_id", "event", "core")


class TaskSetError(ValueError):
    """Invalid task set contents or file."""


class GenerationError(RuntimeError):
    """The generator could not satisfy its configuration."""


@dataclass(frozen=True)
class TaskSpec:
    id: int
    period: int
    wcet: int
    deadline: int
    critical: bool = False

    def __post_init__(self):
        if self.period <= 0:
            raise TaskSetError(f"task {self.id}: period must be positive, got {self.period}")
        if self.wcet <= 0:
            raise TaskSetError(f"task {self.id}: wcet must be positive, got {self.wcet}")
        if not 0 < self.deadline <= self.period:
            raise TaskSetError(
                f"task {self.id}: deadline must satisfy 0 < D <= P, got D={self.deadline}, P={self.period}")

    @property
    def utilization(self) -> float:
        return self.wcet / self.period


@dataclass
class JobInstance:
    task_id: int
    index: int
    release: int
    abs_deadline: int
    remaining: int
    wcet: int
    period: int
    assigned_core: int | None = None
    # slack lost to migrations; the job is treated as due at abs_deadline - penalty
    penalty: int = 0

    @property
    def effective_deadline(self) -> int:
        return self.abs_deadline - self.penalty


@dataclass
class TaskSetConfig:
    n_tasks: int
    target_utilization: float
    period_min: int = 10
    period_max: int = 100
    period_choices: tuple[int, ...] | None = None
    deadline_mode: str = "implicit"  # implicit | pareto
    pareto_alpha: float = 2.0
    pareto_xmin: int = 10
    critical_fraction: float = 0.0
    seed: int = 0
    tolerance: float = 0.02
    max_tries: int = 1000

    def validate(self) -> None:
        if self.n_tasks < 1:
            raise GenerationError("n_tasks must be >= 1")
        if not 0 < self.target_utilization <= 1.5:
            raise GenerationError("target utilization must lie in (0, 1.5]")
        if self.period_choices is None and not 0 < self.period_min <= self.period_max:
            raise GenerationError("need 0 < period_min <= period_max")
        if self.deadline_mode not in ("implicit", "pareto"):
            raise GenerationError(f"unknown deadline mode {self.deadline_mode!r}")


def utilization(tasks: Sequence[TaskSpec]) -> Fraction:
    """Exact total utilisation sum(C/P)."""
    if not tasks:
        raise TaskSetError("utilization of an empty task set is undefined")
    return sum((Fraction(t.wcet, t.period) for t in tasks), Fraction(0))


def hyperperiod(tasks: Iterable[TaskSpec]) -> int:
    return reduce(math.lcm, (t.period for t in tasks), 1)


def uunifast(n: int, total: float, rng: np.random.Generator) -> np.ndarray:
    shares = np.empty(n)
    remaining = total
    for i in range(n - 1):
        nxt = remaining * rng.random() ** (1.0 / (n - 1 - i))
        shares[i] = remaining - nxt
        remaining = nxt
    shares[-1] = remaining
    return shares


def pareto_sample(alpha: float, x_min: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Classical Pareto(alpha, x_min) draws; mean alpha*x_min/(alpha-1) for alpha > 1."""
    return x_min * (1.0 + rng.pareto(alpha, size=size))


def generate_taskset(cfg: TaskSetConfig) -> list[TaskSpec]:
    """Random periodic task set whose utilisation is within ``cfg.tolerance`` of the target."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.period_choices is not None:
        choices = np.asarray(cfg.period_choices, dtype=np.int64)
        p_max = int(choices.max())
    else:
        choices = None
        p_max = cfg.period_max
    # every task needs at least one tick of work
    if cfg.n_tasks / p_max > cfg.target_utilization + cfg.tolerance:
        raise GenerationError(
            f"{cfg.n_tasks} tasks with period <= {p_max} cannot fit utilization {cfg.target_utilization}")
    if cfg.deadline_mode == "pareto":
        p_min = int(choices.min()) if choices is not None else cfg.period_min
        if p_min < cfg.pareto_xmin:
            raise GenerationError("pareto deadlines need every period >= x_min")

    for _ in range(cfg.max_tries):
        if choices is not None:
            periods = rng.choice(choices, size=cfg.n_tasks)
        else:
            periods = rng.integers(cfg.period_min, cfg.period_max + 1, size=cfg.n_tasks)
        shares = uunifast(cfg.n_tasks, cfg.target_utilization, rng)
        wcets = np.maximum(1, np.rint(shares * periods)).astype(np.int64)
        if np.any(wcets > periods):
            continue
        u = float(np.sum(wcets / periods))
        if abs(u - cfg.target_utilization) > cfg.tolerance:
            continue
        if cfg.deadline_mode == "pareto":
            raw = pareto_sample(cfg.pareto_alpha, cfg.pareto_xmin, cfg.n_tasks, rng)
            deadlines = np.clip(np.floor(raw), cfg.pareto_xmin, periods).astype(np.int64)
            # a deadline shorter than the wcet is hopeless; stretch it to the wcet
            deadlines = np.maximum(deadlines, wcets)
        else:
            deadlines = periods
        n_crit = int(round(cfg.critical_fraction * cfg.n_tasks))
        crit = np.zeros(cfg.n_tasks, dtype=bool)
        if n_crit:
            crit[rng.choice(cfg.n_tasks, size=n_crit, replace=False)] = True
        return [TaskSpec(id=i + 1, period=int(p), wcet=int(c), deadline=int(d), critical=bool(k))
                for i, (p, c, d, k) in enumerate(zip(periods, wcets, deadlines, crit))]
    raise GenerationError(
        f"no task set within ±{cfg.tolerance} of U={cfg.target_utilization} after {cfg.max_tries} tries")


# ---------------------------------------------------------------------------
# files


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def taskset_to_json(tasks: Sequence[TaskSpec]) -> str:
    return json.dumps({"tasks": [
        {"id": t.id, "period": t.period, "wcet": t.wcet, "deadline": t.deadline, "critical": t.critical}
        for t in tasks]}, indent=1)


def taskset_from_json(text: str, source: str = "<string>") -> list[TaskSpec]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TaskSetError(f"{source}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("tasks"), list):
        raise TaskSetError(f"{source}: expected an object with a 'tasks' list")
    tasks: list[TaskSpec] = []
    seen: set[int] = set()
    for n, entry in enumerate(doc["tasks"]):
        where = f"{source}: tasks[{n}]"
        try:
            fields = {k: entry[k] for k in ("id", "period", "wcet")}
        except (KeyError, TypeError) as exc:
            raise TaskSetError(f"{where}: missing field {exc}") from exc
        deadline = entry.get("deadline", fields["period"])
        for k, v in (*fields.items(), ("deadline", deadline)):
            if not isinstance(v, int) or isinstance(v, bool):
                raise TaskSetError(f"{where}: field {k!r} must be an integer, got {v!r}")
        try:
            task = TaskSpec(deadline=deadline, critical=bool(entry.get("critical", False)), **fields)
        except TaskSetError as exc:
            raise TaskSetError(f"{where}: {exc}") from exc
        if task.id in seen:
            raise TaskSetError(f"{where}: duplicate task id {task.id}")
        seen.add(task.id)
        tasks.append(task)
    if not tasks:
        raise TaskSetError(f"{source}: task set is empty")
    return tasks


def save_taskset(tasks: Sequence[TaskSpec], path: str | Path) -> None:
    atomic_write_text(path, taskset_to_json(tasks))


def load_taskset(path: str | Path) -> list[TaskSpec]:
    path = Path(path)
    return taskset_from_json(path.read_text(), source=str(path))


@dataclass(frozen=True)
class TraceRow:
    t: int
    task_id: int
    event: str
    core: int | None = None


def trace_to_csv(rows: Iterable[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow((r.t, r.task_id, r.event, "" if r.core is None else r.core))
    return buf.getvalue()


def trace_from_csv(text: str) -> list[TraceRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != TRACE_HEADER:
        raise TaskSetError(f"trace header must be {','.join(TRACE_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        try:
            t, tid, ev, core = rec
            if ev not in TRACE_EVENTS:
                raise ValueError(f"unknown event {ev!r}")
            rows.append(TraceRow(int(t), int(tid), ev, int(core) if core != "" else None))
        except ValueError as exc:
            raise TaskSetError(f"trace line {lineno}: {exc}") from exc
    return rows


def task_dict(t: TaskSpec) -> dict:
    return asdict(t)
