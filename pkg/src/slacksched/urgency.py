"""Slack quantisation and urgency-token assembly."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .simcore import Snapshot

log = logging.getLogger(__name__)

SCHEMES = ("uniform", "log_spaced", "kmeans")


@dataclass
class QuantizerConfig:
    Q: int = 128
    delta: float = 1.0
    scheme: str = "uniform"
    centers: tuple[float, ...] = ()
    reserve_long_slack: bool = False

    def __post_init__(self):
        if self.Q < 2:
            raise ValueError("need at least two quantisation bins")
        if self.delta <= 0:
            raise ValueError("bin width must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown binning scheme {self.scheme!r}")
        if self.scheme == "kmeans":
            if len(self.centers) != self.Q:
                raise ValueError("kmeans scheme needs Q centers")
            if list(self.centers) != sorted(self.centers):
                raise ValueError("kmeans centers must be sorted ascending")
        self.centers = tuple(float(c) for c in self.centers)

    @property
    def s_max(self) -> float:
        return self.delta * self.Q

    @classmethod
    def for_horizon(cls, s_max: float, Q: int = 128, scheme: str = "uniform",
                    **kw) -> "QuantizerConfig":
        """Bins covering [0, s_max): bin width s_max / Q."""
        return cls(Q=Q, delta=s_max / Q, scheme=scheme, **kw)

    def to_dict(self) -> dict:
        return {"Q": self.Q, "delta": self.delta, "scheme": self.scheme,
                "centers": list(self.centers), "reserve": self.reserve_long_slack}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizerConfig":
        return cls(Q=int(d["Q"]), delta=float(d.get("delta", 1.0)), scheme=d.get("scheme", "uniform"),
                   centers=tuple(d.get("centers", ())), reserve_long_slack=bool(d.get("reserve", False)))


def _log_edges(cfg: QuantizerConfig) -> np.ndarray:
    # bin 0 holds s < delta; bins 1..Q-1 split [delta, s_max) geometrically
    return np.geomspace(cfg.delta, cfg.s_max, cfg.Q)[:-1]


def quantize(s, cfg: QuantizerConfig):
    """Map slack to a bin index in [0, Q). Negative slack lands in bin 0."""
    arr = np.asarray(s, dtype=np.float64)
    if cfg.scheme == "uniform":
        idx = np.clip(np.floor(arr / cfg.delta), 0, cfg.Q - 1)
    elif cfg.scheme == "log_spaced":
        idx = np.searchsorted(_log_edges(cfg), arr, side="right")
    else:
        c = np.asarray(cfg.centers)
        mids = (c[1:] + c[:-1]) / 2.0
        idx = np.searchsorted(mids, arr, side="left")
    idx = idx.astype(np.int64)
    return int(idx) if idx.ndim == 0 else idx


def fit_kmeans_bins(samples: Sequence[float], Q: int, seed: int = 0, max_iter: int = 100,
                    tol: float = 1e-6, return_history: bool = False):
    """1-D Lloyd's algorithm; returns sorted centers (and the per-iteration inertia)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < Q:
        raise ValueError(f"need at least Q={Q} samples, got {x.size}")
    rng = np.random.default_rng(seed)
    distinct = np.unique(x)
    if distinct.size == 1:
        log.warning("all slack samples are equal; kmeans bins collapse to one effective bin")
        centers = np.full(Q, distinct[0])
        return (centers, [0.0]) if return_history else centers
    if distinct.size <= Q:
        init = np.concatenate([distinct, np.full(Q - distinct.size, distinct[-1])])
    else:
        # quantile seeding keeps the fit deterministic and spread out
        qs = (np.arange(Q) + 0.5) / Q
        init = np.quantile(x, qs)
        init += rng.normal(0.0, 1e-9, size=Q) * (distinct[-1] - distinct[0])
    centers = np.sort(init)
    history = []
    for _ in range(max_iter):
        assign = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
        history.append(float(((x - centers[assign]) ** 2).sum()))
        new = centers.copy()
        for j in range(Q):
            members = x[assign == j]
            if members.size:
                new[j] = members.mean()
        shift = float(np.abs(new - centers).max())
        centers = np.sort(new)
        if shift < tol:
            break
    assign = np.abs(x[:, None] - centers[None, :]).argmin(axis=1)
    history.append(float(((x - centers[assign]) ** 2).sum()))
    return (centers, history) if return_history else centers


def short_slack_fraction(snap: Snapshot, delta: float) -> float:
    """Fraction of active jobs whose slack is strictly below one bin width."""
    if not snap.jobs:
        return 0.0
    return sum(1 for j in snap.jobs if snap.slack(j) < delta) / len(snap.jobs)


@dataclass
class TokenBatch:
    """Padded batch of token features; row 0 of each sequence is the idle token.

    The learned embedding happens inside the encoder, so a batch is pure data:
    quantised slack indices, auxiliary features and the ordering metadata.
    """
    s_idx: np.ndarray        # (b, n) int, bin index per row (0 for idle / padding)
    feats: np.ndarray        # (b, n, 2): remaining/wcet and time-to-deadline/period
    valid: np.ndarray        # (b, n) bool
    task_ids: np.ndarray     # (b, n) int, 0 for idle and padding
    deadlines: np.ndarray    # (b, n) float, absolute deadline (-inf idle, +inf padding)
    reserved: np.ndarray = field(default=None)  # (b, n) bool, long-slack reserve rows

    @property
    def batch(self) -> int:
        return self.s_idx.shape[0]

    @property
    def n(self) -> int:
        return self.s_idx.shape[1]


def tokenize(snaps: Sequence[Snapshot], cfg: QuantizerConfig, pad_to: int | None = None) -> TokenBatch:
    """Assemble token rows for a batch of snapshots (row order = snapshot job order)."""
    n = max(len(s.jobs) for s in snaps) + 1 if snaps else 1
    if pad_to is not None:
        n = max(n, pad_to)
    b = len(snaps)
    s_idx = np.zeros((b, n), dtype=np.int64)
    feats = np.zeros((b, n, 2))
    valid = np.zeros((b, n), dtype=bool)
    task_ids = np.zeros((b, n), dtype=np.int64)
    deadlines = np.full((b, n), np.inf)
    reserved = np.zeros((b, n), dtype=bool)
    valid[:, 0] = True
    deadlines[:, 0] = -np.inf
    # flatten every job of every snapshot so quantisation runs once per batch
    flat = [(r, i + 1, snap.t, j) for r, snap in enumerate(snaps) for i, j in enumerate(snap.jobs)]
    if flat:
        rows = np.array([f[0] for f in flat])
        cols = np.array([f[1] for f in flat])
        now = np.array([f[2] for f in flat], dtype=np.float64)
        rem, wcet, period, dl, tid = (np.array(v, dtype=np.float64) for v in zip(
            *((j.remaining, j.wcet, j.period, j.deadline, j.task_id) for *_, j in flat)))
        s_idx[rows, cols] = quantize((dl - now) - rem, cfg)
        if cfg.reserve_long_slack:
            # the top bin doubles as the long-slack reserve
            reserved[rows, cols] = s_idx[rows, cols] == cfg.Q - 1
        feats[rows, cols, 0] = rem / wcet
        feats[rows, cols, 1] = (dl - now) / period
        valid[rows, cols] = True
        task_ids[rows, cols] = tid.astype(np.int64)
        deadlines[rows, cols] = dl
    return TokenBatch(s_idx, feats, valid, task_ids, deadlines, reserved)


def init_token_params(rng: np.random.Generator, Q: int, d: int, reserve: bool = False) -> nc.ParamStore:
    p = nc.ParamStore()
    p["tok.emb"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(Q, d))
    p["tok.idle"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(1, d))
    p["tok.feat"] = rng.normal(0.0, 1.0 / math.sqrt(2), size=(2, d)) * 0.5
    if reserve:
        p["tok.reserve_bias"] = np.full((1, d), 0.1)
    return p


def embed_tokens(batch: TokenBatch, leaves: dict[str, nc.Tensor]) -> nc.Tensor:
    """Token matrix X (b, n, d): E[s] + feats @ W_f on task rows, idle embedding on row 0."""
    if "tok.emb" not in leaves or "tok.feat" not in leaves or "tok.idle" not in leaves:
        raise nc.ContractError("token parameters missing (tok.emb, tok.feat, tok.idle)")
    task = nc.add(nc.embedding_lookup(leaves["tok.emb"], batch.s_idx),
                  nc.matmul(nc.Tensor(batch.feats), leaves["tok.feat"]))
    is_idle = np.zeros((batch.batch, batch.n, 1))
    is_idle[:, 0, 0] = 1.0
    x = nc.add(nc.mul(task, nc.Tensor(1.0 - is_idle)), nc.mul(leaves["tok.idle"], nc.Tensor(is_idle)))
    if batch.reserved is not None and batch.reserved.any() and "tok.reserve_bias" in leaves:
        x = nc.add(x, nc.mul(leaves["tok.reserve_bias"], nc.Tensor(batch.reserved[..., None] * 1.0)))
    return x


def token_matrix(snap: Snapshot, params: nc.ParamStore, cfg: QuantizerConfig) -> tuple[np.ndarray, TokenBatch]:
    """Embedded tokens X (N+1, d) for a single snapshot, plus the raw batch."""
    batch = tokenize([snap], cfg)
    with nc.no_grad():
        x = embed_tokens(batch, {k: nc.Tensor(v) for k, v in params.items()})
    return x.data[0], batch
