"""Permutation-equivariant transformer Q-network over urgency tokens.

No positional encodings are used, so a permutation of the task rows permutes
the per-token Q-scores. The sparse path first sorts tokens canonically (idle
first, then by absolute deadline, ties by task id) and applies block top-k
pruning inside deadline chunks plus one representative key per other chunk;
the idle token stays global (dense row and column). The pattern is applied
as an additive mask on the dense score matrix.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import numcore as nc
from .urgency import TokenBatch, embed_tokens, init_token_params

NEG = -1e9


@dataclass(frozen=True)
class SparseParams:
    B: int
    k: int
    M: int
    C: int


def auto_sparse_params(n_tasks: int) -> SparseParams:
    """Block size ceil(sqrt N); k = max(1, floor(0.1 B)) for N <= 100, else floor(log2 B) + 1;
    M = ceil(log2 N) chunks of size ceil(N / M)."""
    n = max(1, int(n_tasks))
    B = math.isqrt(n)
    if B * B < n:
        B += 1
    if n <= 100:
        k = max(1, int(math.floor(0.1 * B)))
    else:
        k = int(math.floor(math.log2(B))) + 1
    M = max(1, math.ceil(math.log2(n))) if n > 1 else 1
    C = math.ceil(n / M)
    return SparseParams(B=B, k=k, M=M, C=C)


@dataclass
class EncoderConfig:
    L: int = 2
    H: int = 4
    d: int = 128
    d_ff: int | None = None
    attention: str = "dense"          # dense | block_topk
    sparse: tuple[int, int, int] | None = None  # (B, k, M); None means auto from N

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.L < 1:
            raise ValueError("need at least one layer")
        if self.d % self.H:
            raise ValueError(f"width d={self.d} is not divisible by H={self.H}")
        if self.attention not in ("dense", "block_topk"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if self.sparse is not None:
            self.sparse = tuple(int(x) for x in self.sparse)

    @classmethod
    def test_scale(cls, **kw) -> "EncoderConfig":
        return cls(**{"L": 1, "H": 2, "d": 32, **kw})

    def sparse_params(self, n_tasks: int, k_override: int | None = None) -> SparseParams:
        if self.sparse is None:
            sp = auto_sparse_params(n_tasks)
        else:
            B, k, M = self.sparse
            sp = SparseParams(B, k, M, math.ceil(max(n_tasks, 1) / M))
        if k_override is not None:
            sp = SparseParams(sp.B, max(1, k_override), sp.M, sp.C)
        return sp

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparse"] = list(self.sparse) if self.sparse is not None else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        d = dict(d)
        if d.get("sparse") is not None:
            d["sparse"] = tuple(d["sparse"])
        return cls(**d)


def init_params(cfg: EncoderConfig, Q: int, seed: int = 0, reserve: bool = False) -> nc.ParamStore:
    rng = np.random.default_rng(seed)
    p = init_token_params(rng, Q, cfg.d, reserve)
    d, f = cfg.d, cfg.d_ff
    for l in range(cfg.L):
        pre = f"enc{l}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = nc.xavier(rng, d, d)
        # no key bias: it adds a per-query constant that softmax cancels
        for name in ("bq", "bv", "bo"):
            p[pre + name] = np.zeros((1, d))
        p[pre + "ln1_g"] = np.ones((1, d))
        p[pre + "ln1_b"] = np.zeros((1, d))
        p[pre + "ff_w1"] = nc.xavier(rng, d, f)
        p[pre + "ff_b1"] = np.zeros((1, f))
        p[pre + "ff_w2"] = nc.xavier(rng, f, d)
        p[pre + "ff_b2"] = np.zeros((1, d))
        p[pre + "ln2_g"] = np.ones((1, d))
        p[pre + "ln2_b"] = np.zeros((1, d))
    p["head.w"] = nc.xavier(rng, d, 1)
    p["head.b"] = np.zeros((1, 1))
    return p


# ---------------------------------------------------------------------------
# sparse pattern


def chunk_layout(n_tasks: int, sp: SparseParams) -> list[tuple[int, int]]:
    """Contiguous chunk ranges over the sorted task tokens (idle excluded)."""
    if n_tasks <= 0:
        return []
    m = max(1, min(sp.M, n_tasks))
    size = math.ceil(n_tasks / m)
    return [(s, min(s + size, n_tasks)) for s in range(0, n_tasks, size)]


def sparse_keep_mask(scores: np.ndarray, n_valid: int, sp: SparseParams) -> np.ndarray:
    """Retained (query, key) pairs for scores of shape (..., n, n) in sorted order.

    Position 0 is the idle token, which is global: it attends to and is
    attended by every valid token. Task tokens 1..n_valid-1 are split into
    chunks; inside a chunk each query keeps its top-k keys of every B-wide key
    block (blocks start at the chunk boundary), and toward every other chunk it
    keeps the single highest-scoring key. Ties go to the lower key index.
    """
    keep = np.zeros(scores.shape, dtype=bool)
    keep[..., 0, :n_valid] = True
    keep[..., :n_valid, 0] = True
    chunks = [(a + 1, b + 1) for a, b in chunk_layout(n_valid - 1, sp)]
    for q0, q1 in chunks:
        rows = scores[..., q0:q1, :]
        for b0 in range(q0, q1, sp.B):
            b1 = min(b0 + sp.B, q1)
            view = keep[..., q0:q1, b0:b1]
            if sp.k >= b1 - b0:
                view[...] = True
            else:
                top = np.argsort(-rows[..., b0:b1], axis=-1, kind="stable")[..., :sp.k]
                np.put_along_axis(view, top, True, axis=-1)
        for k0, k1 in chunks:
            if k0 == q0:
                continue
            best = rows[..., k0:k1].argmax(axis=-1)
            np.put_along_axis(keep[..., q0:q1, k0:k1], best[..., None], True, axis=-1)
    return keep


def nonzero_count(n_tasks: int, sp: SparseParams | None = None, seed: int = 0,
                  include_idle: bool = True) -> int:
    """Retained score entries for one head over n_tasks task tokens plus idle.

    ``sp=None`` is dense attention. With ``include_idle=False`` only the
    task-to-task pattern is counted (the idle row and column add 2N+1).
    """
    n = n_tasks + 1
    if sp is None:
        total = n * n
    else:
        scores = np.random.default_rng(seed).normal(size=(n, n))
        total = int(sparse_keep_mask(scores, n, sp).sum())
    return total if include_idle else total - (2 * n_tasks + 1)


def nonzero_bound(n_tasks: int, sp: SparseParams) -> int:
    """Counting-model bound M*C*k*ceil(C/B) + N*(M-1) on the task-to-task pattern."""
    M = max(1, min(sp.M, n_tasks))
    C = math.ceil(n_tasks / M)
    return M * C * sp.k * math.ceil(C / sp.B) + n_tasks * (M - 1)


# ---------------------------------------------------------------------------
# forward


@dataclass
class AttentionRecord:
    mean: np.ndarray        # (b, n, n) final layer, averaged over heads, original row order
    per_head: np.ndarray    # (b, H, n, n)


@dataclass
class EncoderOutput:
    q: np.ndarray           # (b, n) with -inf on invalid rows
    q_t: nc.Tensor          # (b, n) graph node (finite everywhere)
    attention: AttentionRecord


def canonical_order(batch: TokenBatch) -> np.ndarray:
    """Per-row permutation: idle, then tasks by (deadline, id), then padding."""
    perm = np.empty((batch.batch, batch.n), dtype=np.int64)
    for r in range(batch.batch):
        perm[r] = np.lexsort((batch.task_ids[r], batch.deadlines[r]))
    return perm


def _attention_block(x: nc.Tensor, lv: Mapping[str, nc.Tensor], pre: str, cfg: EncoderConfig,
                     key_valid: np.ndarray, sparse: list[SparseParams] | None,
                     n_valid: np.ndarray) -> tuple[nc.Tensor, np.ndarray]:
    b, n, d = x.shape
    H, dk = cfg.H, d // cfg.H

    def heads(t: nc.Tensor) -> nc.Tensor:
        return nc.swapaxes(nc.reshape(t, (b, n, H, dk)), 1, 2)

    qh = heads(nc.add(nc.matmul(x, lv[pre + "wq"]), lv[pre + "bq"]))
    kh = heads(nc.matmul(x, lv[pre + "wk"]))
    vh = heads(nc.add(nc.matmul(x, lv[pre + "wv"]), lv[pre + "bv"]))
    scores = nc.mul_scalar(nc.matmul(qh, nc.transpose(kh)), 1.0 / math.sqrt(dk))
    bias = np.where(key_valid[:, None, None, :], 0.0, NEG)
    if sparse is not None:
        keep = np.zeros(scores.shape, dtype=bool)
        for r in range(b):
            nv = int(n_valid[r])
            keep[r, :, :nv, :nv] = sparse_keep_mask(scores.data[r, :, :nv, :nv], nv, sparse[r])
            keep[r, :, nv:, :nv] = True
        bias = np.where(keep, bias, NEG)
    attn = nc.softmax_rows(nc.add(scores, nc.Tensor(bias)))
    ctx = nc.reshape(nc.swapaxes(nc.matmul(attn, vh), 1, 2), (b, n, d))
    out = nc.add(nc.matmul(ctx, lv[pre + "wo"]), lv[pre + "bo"])
    return out, attn.data


def forward(batch: TokenBatch, params: Mapping[str, np.ndarray], cfg: EncoderConfig,
            leaves: Mapping[str, nc.Tensor] | None = None,
            k_override: int | None = None) -> EncoderOutput:
    """Per-token Q-scores for a token batch.

    Pass ``leaves`` (from ``ParamStore.leaves()``) to record a differentiable
    graph; otherwise the pass runs without recording.
    """
    if leaves is None:
        with nc.no_grad():
            return forward(batch, params, cfg, {k: nc.Tensor(v) for k, v in params.items()}, k_override)
    lv = leaves
    x = embed_tokens(batch, lv)
    if x.shape[-1] != cfg.d:
        raise nc.ContractError(f"token width {x.shape[-1]} does not match encoder width {cfg.d}")
    valid = batch.valid
    n_valid = valid.sum(axis=1)
    sparse = None
    perm = None
    if cfg.attention == "block_topk":
        perm = canonical_order(batch)
        x = nc.gather_rows(x, perm)
        valid = np.take_along_axis(valid, perm, axis=1)
        sparse = [cfg.sparse_params(int(nv) - 1, k_override) for nv in n_valid]

    attn = None
    for l in range(cfg.L):
        pre = f"enc{l}."
        a, attn = _attention_block(x, lv, pre, cfg, valid, sparse, n_valid)
        z = nc.layer_norm(nc.add(x, a), lv[pre + "ln1_g"], lv[pre + "ln1_b"])
        f = nc.add(nc.matmul(nc.relu(nc.add(nc.matmul(z, lv[pre + "ff_w1"]), lv[pre + "ff_b1"])),
                             lv[pre + "ff_w2"]), lv[pre + "ff_b2"])
        x = nc.layer_norm(nc.add(z, f), lv[pre + "ln2_g"], lv[pre + "ln2_b"])
        if not np.all(np.isfinite(x.data[valid])):
            raise FloatingPointError(f"non-finite activations after encoder layer {l}")

    q3 = nc.add(nc.matmul(x, lv["head.w"]), lv["head.b"])  # (b, n, 1)
    if perm is not None:
        inv = np.argsort(perm, axis=1)
        q3 = nc.gather_rows(q3, inv)
        attn = np.take_along_axis(attn, inv[:, None, :, None], axis=2)
        attn = np.take_along_axis(attn, inv[:, None, None, :], axis=3)
    q_t = nc.reshape(q3, q3.shape[:2])
    q = np.where(batch.valid, q_t.data, -np.inf)
    return EncoderOutput(q=q, q_t=q_t, attention=AttentionRecord(attn.mean(axis=1), attn))
