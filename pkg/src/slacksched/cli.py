"""Command-line experiment harness.

Every command writes its artifacts atomically. Exit codes: 0 success,
2 configuration error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import csv
import io
import json
import logging
import os
import sys
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import baselines, diagnostics, encoder, trainer
from .dispatch import MitigationState, QPolicy
from .numcore import ContractError, ParamStore
from .simcore import BurstSpec, EpisodeAborted, RewardConfig, run_episode
from .taskmodel import (GenerationError, TaskSetConfig, TaskSetError, atomic_write_text,
                        generate_taskset, load_taskset, save_taskset, utilization)
from .urgency import QuantizerConfig, fit_kmeans_bins

log = logging.getLogger("slacksched")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


def component_seed(root: int, name: str) -> int:
    """Independent stream per component, all derived from one root seed."""
    return int(np.random.SeedSequence([root, zlib.crc32(name.encode())]).generate_state(1)[0])


def worker_cap() -> int:
    raw = os.environ.get("TEMPONET_THREADS", "")
    try:
        return max(1, int(raw)) if raw else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError(f"TEMPONET_THREADS must be an integer, got {raw!r}") from exc


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    taskset: str | None = None
    generator: dict | None = None
    policy: str = "edf"
    cores: int = 1
    horizon: int = 500
    seed: int = 0
    out: str = "out"
    mitigate: bool = False
    reward: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=lambda: encoder.EncoderConfig.test_scale().to_dict())
    quantizer: dict = field(default_factory=lambda: {"Q": 16, "scheme": "uniform", "s_max": None})
    train: dict = field(default_factory=dict)
    exploration: dict = field(default_factory=dict)
    bc: dict = field(default_factory=dict)   # {"teacher": "edf", "epochs": 50, "lr": 1e-3}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    # typed views -------------------------------------------------------
    def reward_cfg(self) -> RewardConfig:
        return RewardConfig(**self.reward)

    def encoder_cfg(self) -> encoder.EncoderConfig:
        return encoder.EncoderConfig.from_dict(self.encoder)

    def train_cfg(self) -> trainer.TrainConfig:
        kw = {"horizon": self.horizon, "cores": self.cores, "seed": component_seed(self.seed, "train")}
        kw.update(self.train)
        return trainer.TrainConfig(**kw)

    def exploration_cfg(self) -> trainer.ExplorationConfig:
        return trainer.ExplorationConfig(**self.exploration)

    def tasks(self):
        if self.taskset:
            return load_taskset(self.taskset)
        if self.generator:
            g = dict(self.generator)
            g.setdefault("seed", component_seed(self.seed, "generator"))
            if "period_choices" in g and g["period_choices"] is not None:
                g["period_choices"] = tuple(g["period_choices"])
            return generate_taskset(TaskSetConfig(**g))
        raise ConfigError("no task set: pass --taskset or a generator section in --config")


def resolve_quantizer(spec: dict, tasks, seed: int = 0) -> QuantizerConfig:
    """Bins over [0, s_max); s_max defaults to the longest period. k-means bins are
    fitted to the slacks an EDF run produces on the task set."""
    Q = int(spec.get("Q", 16))
    scheme = spec.get("scheme", "uniform")
    s_max = spec.get("s_max") or float(max(t.period for t in tasks))
    reserve = bool(spec.get("reserve", False))
    if scheme != "kmeans":
        return QuantizerConfig.for_horizon(float(s_max), Q=Q, scheme=scheme, reserve_long_slack=reserve)
    horizon = max(10 * max(t.period for t in tasks), 200)
    _, trace = run_episode(tasks, baselines.EDF(), horizon, record_decisions=True)
    samples = [max(0.0, float(snap.slack(j))) for snap, _ in trace.decisions for j in snap.jobs]
    if len(samples) < Q:
        raise ConfigError(f"only {len(samples)} slack samples to fit {Q} k-means bins")
    centers = fit_kmeans_bins(samples, Q, seed=seed)
    return QuantizerConfig(Q=Q, delta=float(s_max) / Q, scheme="kmeans", centers=tuple(centers),
                           reserve_long_slack=reserve)


def parse_sparse(text: str):
    """``dense`` / ``auto`` / ``B,k,M`` -> (attention mode, sparse tuple or None)."""
    text = text.strip().lower()
    if text == "dense":
        return "dense", None
    if text == "auto":
        return "block_topk", None
    try:
        B, k, M = (int(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"--sparse expects dense, auto or B,k,M; got {text!r}") from exc
    if min(B, k, M) < 1:
        raise ConfigError("sparse B, k and M must be positive")
    return "block_topk", (B, k, M)


def build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if getattr(args, "config", None):
        try:
            cfg = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno}: {exc.msg}") from exc
    # flags override the file
    for name in ("taskset", "policy", "cores", "horizon", "seed", "out"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "mitigate", None) is not None:
        cfg.mitigate = args.mitigate == "on"
    if getattr(args, "reward", None):
        cfg.reward = {**cfg.reward, "scheme": args.reward}
    if getattr(args, "Q", None) is not None:
        cfg.quantizer = {**cfg.quantizer, "Q": args.Q}
    if getattr(args, "scheme", None):
        cfg.quantizer = {**cfg.quantizer, "scheme": args.scheme}
    if getattr(args, "sparse", None):
        mode, sp = parse_sparse(args.sparse)
        cfg.encoder = {**cfg.encoder, "attention": mode, "sparse": list(sp) if sp else None}
    if getattr(args, "episodes", None) is not None:
        cfg.train = {**cfg.train, "episodes": args.episodes}
    if cfg.cores < 1 or cfg.horizon < 1:
        raise ConfigError("cores and horizon must be positive")
    # surface bad sections as config errors before any work starts
    cfg.reward_cfg()
    cfg.encoder_cfg()
    cfg.train_cfg()
    cfg.exploration_cfg()
    return cfg


def write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_agent(path: str, mitigate: bool = False, record: bool = False, sparse: str | None = None) -> QPolicy:
    """Frozen greedy agent from a checkpoint; ``sparse`` swaps the attention mode
    (dense and sparse share parameter shapes)."""
    params, meta = ParamStore.load(path)
    if "encoder" not in meta or "quantizer" not in meta:
        raise ConfigError(f"{path}: checkpoint lacks encoder/quantizer metadata")
    enc_dict = dict(meta["encoder"])
    if sparse:
        mode, sp = parse_sparse(sparse)
        enc_dict.update(attention=mode, sparse=list(sp) if sp else None)
    return QPolicy(params, encoder.EncoderConfig.from_dict(enc_dict),
                   QuantizerConfig.from_dict(meta["quantizer"]),
                   mitigation=MitigationState() if mitigate else None, record=record)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = TaskSetConfig(n_tasks=args.n, target_utilization=args.util, period_min=args.period_min,
                        period_max=args.period_max, deadline_mode=args.deadline_mode,
                        critical_fraction=args.critical_fraction, seed=args.seed or 0)
    tasks = generate_taskset(cfg)
    save_taskset(tasks, args.out)
    print(f"{len(tasks)} tasks, U={float(utilization(tasks)):.4f} -> {args.out}")
    return EXIT_OK


def _bursts(args) -> list[BurstSpec]:
    out = []
    for text in getattr(args, "burst", None) or []:
        try:
            vals = [int(x) for x in text.split(",")]
            out.append(BurstSpec(*vals))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--burst expects count,interval,deadline,duration[,wcet[,start]]: {text!r}") from exc
    return out


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    tasks = cfg.tasks()
    quant = resolve_quantizer(cfg.quantizer, tasks, component_seed(cfg.seed, "quantizer"))
    spec = cfg.policy
    if spec.startswith("random") and ":" not in spec:
        spec = f"random:{component_seed(cfg.seed, 'policy') % 2**31}"
    policy = baselines.make_policy(spec, tasks, quant)
    report, trace = run_episode(tasks, policy, cfg.horizon, cfg.reward_cfg(), cfg.cores, _bursts(args))
    out = Path(cfg.out)
    atomic_write_text(out / "metrics.json", report.to_json() + "\n")
    atomic_write_text(out / "trace.csv", trace.to_csv())
    write_json(out / "config.json", cfg.to_dict())
    print(f"{policy!r}: compliance {report.compliance_rate:.4f} ({report.jobs_completed}/{report.jobs_released})")
    return EXIT_OK


def _warm_start(cfg: ExperimentConfig, tasks, quant, enc_cfg, tcfg):
    if not cfg.bc:
        return None
    teacher = baselines.make_policy(cfg.bc.get("teacher", "edf"), tasks, quant)
    _, trace = run_episode(tasks, teacher, cfg.horizon, cfg.reward_cfg(), cfg.cores, record_decisions=True)
    params = encoder.init_params(enc_cfg, quant.Q, seed=component_seed(cfg.seed, "bc"),
                                 reserve=quant.reserve_long_slack)
    params, losses = trainer.bc_pretrain(trainer.teacher_pairs(trace.decisions), params, enc_cfg, quant,
                                         epochs=int(cfg.bc.get("epochs", 50)), lr=float(cfg.bc.get("lr", 1e-3)))
    log.info("bc warm start: nll %.4f -> %.4f", losses[0] if losses else float("nan"),
             losses[-1] if losses else float("nan"))
    return params


def run_training(cfg: ExperimentConfig, tasks, out: Path | None):
    quant = resolve_quantizer(cfg.quantizer, tasks, component_seed(cfg.seed, "quantizer"))
    enc_cfg = cfg.encoder_cfg()
    tcfg = cfg.train_cfg()
    params = _warm_start(cfg, tasks, quant, enc_cfg, tcfg)
    res = trainer.train(tasks, tcfg, enc_cfg, quant, cfg.exploration_cfg(), cfg.reward_cfg(), params,
                        curve_path=out / "learning_curve.csv" if out else None,
                        checkpoint_path=out / "checkpoint.json" if out else None)
    return res, quant, enc_cfg


def cmd_train(args) -> int:
    cfg = build_config(args)
    tasks = cfg.tasks()
    out = Path(cfg.out)
    write_json(out / "config.json", cfg.to_dict())
    res, _, _ = run_training(cfg, tasks, out)
    last = res.curve[-1] if res.curve else None
    msg = f"final compliance {last[3]:.4f}" if last else "no episodes run"
    print(f"trained {len(res.curve)} episodes, {msg} -> {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    tasks = cfg.tasks()
    agent = load_agent(args.checkpoint, cfg.mitigate, record=True, sparse=args.sparse)
    report, trace = run_episode(tasks, agent, cfg.horizon, cfg.reward_cfg(), cfg.cores, _bursts(args),
                                record_decisions=True)
    out = Path(cfg.out)
    atomic_write_text(out / "metrics.json", report.to_json() + "\n")
    atomic_write_text(out / "trace.csv", trace.to_csv())
    diag = diagnostics.run_diagnostics(agent.decisions, k=max(2, cfg.cores))
    atomic_write_text(out / "diagnostics.csv", diag.to_csv(mitigation=cfg.mitigate))
    heat = diagnostics.policy_heatmap(trace.decisions, agent.quantizer)
    atomic_write_text(out / "heatmap.csv", heat.to_csv())
    if args.dump_attention:
        atomic_write_text(out / "attention.csv", diagnostics.attention_dump_csv(agent.decisions))
    print(f"agent: compliance {report.compliance_rate:.4f}, mean entropy {diag.mean_entropy:.4f}, "
          f"top-1 alignment {diag.mean_align_top1:.4f}")
    return EXIT_OK


def parse_sizes(text: str) -> list[int]:
    """``32..1024`` doubles from 32 to 1024; otherwise a comma list."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split(".."))
            sizes, n = [], lo
            while n <= hi:
                sizes.append(n)
                n *= 2
            return sizes
        return [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad size list {text!r}") from exc


def cmd_bench_attn(args) -> int:
    from .simcore import JobView, Snapshot
    from .urgency import tokenize

    mode, sp = parse_sparse(args.sparse or "auto")
    enc_cfg = encoder.EncoderConfig.test_scale(attention=mode, sparse=sp)
    quant = QuantizerConfig(Q=16, delta=1.0)
    params = encoder.init_params(enc_cfg, quant.Q, seed=component_seed(args.seed or 0, "bench"))
    rng = np.random.default_rng(component_seed(args.seed or 0, "bench-data"))
    rows = []
    for n in parse_sizes(args.sizes):
        jobs = tuple(JobView(i + 1, int(rng.integers(1, 5)), 5, 50, int(rng.integers(5, 50)), 50, None)
                     for i in range(n))
        batch = tokenize([Snapshot(0, jobs, 1)], quant)
        sparams = enc_cfg.sparse_params(n) if mode == "block_topk" else None
        nz = encoder.nonzero_count(n, sparams)
        encoder.forward(batch, params, enc_cfg)  # warm-up
        best = float("inf")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            encoder.forward(batch, params, enc_cfg)
            best = min(best, time.perf_counter() - t0)
        rows.append((n, nz, best * 1e3))
    out = Path(args.out or "bench")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("N", "nonzeros", "wall_ms"))
    for n, nz, ms in rows:
        w.writerow((n, nz, f"{ms:.4f}"))
    atomic_write_text(out / "bench_attn.csv", buf.getvalue())
    fit = {}
    if len(rows) >= 4:
        c, b, r2 = diagnostics.fit_power_law([r[0] for r in rows], [r[2] for r in rows])
        cn, bn, r2n = diagnostics.fit_power_law([r[0] for r in rows], [r[1] for r in rows])
        fit = {"wall_c": c, "wall_exponent": b, "wall_r2": r2,
               "nonzero_c": cn, "nonzero_exponent": bn, "nonzero_r2": r2n}
        print(f"wall-time exponent {b:.3f} (R^2 {r2:.3f}); nonzero exponent {bn:.3f}")
    write_json(out / "bench_fit.json", fit)
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = build_config(args)
    tasks = cfg.tasks()
    agent = load_agent(args.checkpoint, sparse=args.sparse)
    _, trace = run_episode(tasks, agent, cfg.horizon, cfg.reward_cfg(), cfg.cores, record_decisions=True)
    dist = diagnostics.distill_rule(trace.decisions, agent.quantizer)
    out = Path(cfg.out)
    rule = baselines.WeightedSlack(dist.alpha, dist.beta, agent.quantizer)
    result = {**dist.to_dict(),
              "agreement_edf": diagnostics.agreement(trace.decisions, baselines.EDF()),
              "agreement_minslack": diagnostics.agreement(trace.decisions, baselines.MinSlack()),
              "agreement_rule": diagnostics.agreement(trace.decisions, rule)}
    write_json(out / "distill.json", result)
    atomic_write_text(out / "heatmap.csv", diagnostics.policy_heatmap(trace.decisions, agent.quantizer).to_csv())
    print(f"WeightedSlack({dist.alpha:.2f}, {dist.beta:.2f}) agrees on {dist.agreement:.4f} of decisions")
    return EXIT_OK


def parse_grid(text: str) -> tuple[str, list]:
    key, _, vals = text.partition("=")
    key = key.strip()
    if key not in ("Q", "L", "H", "d", "scheme", "reward"):
        raise ConfigError(f"cannot sweep {key!r}; choose Q, L, H, d, scheme or reward")
    items = [v.strip() for v in vals.split(",") if v.strip()]
    if not items:
        raise ConfigError(f"empty grid for {key}")
    if key in ("Q", "L", "H", "d"):
        try:
            return key, [int(v) for v in items]
        except ValueError as exc:
            raise ConfigError(f"grid values for {key} must be integers") from exc
    return key, items


def _sweep_point(cfg: ExperimentConfig, key: str, value, sets: int) -> dict:
    point = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    if key in ("Q", "scheme"):
        point.quantizer = {**point.quantizer, key: value}
    elif key == "reward":
        point.reward = {**point.reward, "scheme": value}
    else:
        point.encoder = {**point.encoder, key: value}
        if key == "d":
            point.encoder["d_ff"] = None
    comps = []
    for s in range(sets):
        if point.taskset:
            tasks = point.tasks()
        else:
            gen = dict(point.generator or {"n_tasks": 3, "target_utilization": 1.1, "period_min": 5,
                                           "period_max": 20})
            gen["seed"] = component_seed(cfg.seed, f"sweep-set-{s}")
            tasks = generate_taskset(TaskSetConfig(**gen))
        res, quant, enc_cfg = run_training(point, tasks, None)
        agent = QPolicy(res.params, enc_cfg, quant)
        report, _ = run_episode(tasks, agent, point.horizon, point.reward_cfg(), point.cores)
        comps.append(report.compliance_rate)
    return {"param": key, "value": value, "sets": sets,
            "mean_compliance": float(np.mean(comps)), "std_compliance": float(np.std(comps))}


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    key, values = parse_grid(args.grid)
    workers = min(worker_cap(), len(values))
    if workers > 1:
        with cf.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda v: _sweep_point(cfg, key, v, args.sets), values))
    else:
        rows = [_sweep_point(cfg, key, v, args.sets) for v in values]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("param", "value", "sets", "mean_compliance", "std_compliance"))
    for r in rows:
        w.writerow((r["param"], r["value"], r["sets"], f"{r['mean_compliance']:.6f}", f"{r['std_compliance']:.6f}"))
        print(f"{key}={r['value']}: compliance {r['mean_compliance']:.4f} ± {r['std_compliance']:.4f}")
    out = Path(cfg.out)
    atomic_write_text(out / "sweep.csv", buf.getvalue())
    write_json(out / "config.json", cfg.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, policy: bool = False) -> None:
    p.add_argument("--config", help="experiment JSON; flags override its fields")
    p.add_argument("--taskset", help="task-set JSON file")
    p.add_argument("--cores", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--reward", choices=("binary", "r1", "r2", "r3"))
    p.add_argument("--Q", type=int, help="number of slack bins")
    p.add_argument("--scheme", choices=("uniform", "log_spaced", "kmeans"))
    p.add_argument("--sparse", help="dense, auto or B,k,M")
    p.add_argument("--mitigate", choices=("on", "off"))
    if policy:
        p.add_argument("--policy", help="edf, rm, srpt, fcfs, minslack, idle, random[:seed], wslack[:a,b]")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slacksched", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a random periodic task set")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--util", type=float, required=True)
    g.add_argument("--period-min", type=int, default=10)
    g.add_argument("--period-max", type=int, default=100)
    g.add_argument("--deadline-mode", choices=("implicit", "pareto"), default="implicit")
    g.add_argument("--critical-fraction", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="task-set JSON path")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", help="run a baseline policy")
    _common(s, policy=True)
    s.add_argument("--burst", action="append", help="count,interval,deadline,duration[,wcet[,start]]")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the Q-network agent")
    _common(t)
    t.add_argument("--episodes", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run a frozen checkpoint greedily")
    _common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--burst", action="append")
    e.add_argument("--dump-attention", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench-attn", help="attention cost versus task count")
    b.add_argument("--sizes", default="32..1024")
    b.add_argument("--sparse", default="auto")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_attn)

    d = sub.add_parser("distill", help="fit a WeightedSlack rule to an agent")
    _common(d)
    d.add_argument("--checkpoint", required=True)
    d.set_defaults(func=cmd_distill)

    w = sub.add_parser("sweep", help="train and evaluate over a parameter grid")
    _common(w)
    w.add_argument("--grid", required=True, help="e.g. Q=8,32,128")
    w.add_argument("--sets", type=int, default=1, help="task sets per grid point")
    w.add_argument("--episodes", type=int)
    w.set_defaults(func=cmd_sweep)
    for p in (g, s, t, e, b, d, w):
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TaskSetError, GenerationError, ContractError, FileNotFoundError,
            IsADirectoryError, PermissionError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeAborted, trainer.TrainingDiverged, FloatingPointError, RuntimeError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
