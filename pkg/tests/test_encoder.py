import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slacksched import encoder as E
from slacksched import numcore as nc
from slacksched.simcore import JobView, Snapshot
from slacksched.urgency import QuantizerConfig, tokenize

QC = QuantizerConfig(Q=16, delta=4.0)


def snap_of(n, seed=0):
    rng = np.random.default_rng(seed)
    jobs = tuple(JobView(i + 1, int(rng.integers(1, 5)), 5, 40, int(rng.integers(1, 60)), 40, None)
                 for i in range(n))
    return Snapshot(0, jobs, 1)


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        E.EncoderConfig(d=30, H=4)
    with pytest.raises(ValueError):
        E.EncoderConfig(attention="weird")
    cfg = E.EncoderConfig(L=3, H=2, d=16, attention="block_topk", sparse=(4, 2, 3))
    assert cfg.d_ff == 64 and E.EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.sparse_params(10) == E.SparseParams(4, 2, 3, 4)
    assert cfg.sparse_params(10, k_override=1).k == 1


@pytest.mark.parametrize("n,expect", [(1, (1, 1, 1, 1)), (16, (4, 1, 4, 4)), (100, (10, 1, 7, 15)),
                                      (101, (11, 4, 7, 15)), (600, (25, 5, 10, 60))])
def test_auto_sparse_params(n, expect):
    sp = E.auto_sparse_params(n)
    assert (sp.B, sp.k, sp.M, sp.C) == expect


def test_output_shapes_and_masking():
    cfg = E.EncoderConfig.test_scale()
    params = E.init_params(cfg, QC.Q, seed=0)
    batch = tokenize([snap_of(3), snap_of(1)], QC)
    out = E.forward(batch, params, cfg)
    assert out.q.shape == (2, 4)
    assert np.isneginf(out.q[1, 2:]).all() and np.isfinite(out.q[0]).all()
    att = out.attention.mean
    assert np.allclose(att[0].sum(-1), 1.0)
    assert np.allclose(att[1, :2, 2:], 0.0)
    assert out.attention.per_head.shape == (2, cfg.H, 4, 4)


def test_sparse_rows_are_distributions_over_kept_keys():
    n = 40
    cfg = E.EncoderConfig.test_scale(attention="block_topk", sparse=(4, 1, 4))
    params = E.init_params(cfg, QC.Q, seed=2)
    out = E.forward(tokenize([snap_of(n, 3)], QC), params, cfg)
    att = out.attention.mean[0]
    assert np.allclose(att.sum(-1), 1.0)
    nz_per_row = (out.attention.per_head[0, 0] > 0).sum(-1)
    assert nz_per_row[1:].max() < n // 2 and nz_per_row[0] == n + 1


def test_chunk_layout_covers_tasks():
    sp = E.SparseParams(3, 1, 4, 3)
    assert E.chunk_layout(10, sp) == [(0, 3), (3, 6), (6, 9), (9, 10)]
    assert E.chunk_layout(2, sp) == [(0, 1), (1, 2)]
    assert E.chunk_layout(0, sp) == []


@settings(max_examples=40)
@given(st.integers(2, 120), st.integers(0, 1000))
def test_nonzero_count_within_bound(n, seed):
    sp = E.auto_sparse_params(n)
    assert E.nonzero_count(n, sp, seed=seed, include_idle=False) <= E.nonzero_bound(n, sp)


def test_dense_count():
    assert E.nonzero_count(10) == 121 and E.nonzero_count(10, include_idle=False) == 100


def test_canonical_order_sorts_by_deadline_then_id():
    jobs = (JobView(5, 1, 1, 9, 7, 9, None), JobView(2, 1, 1, 9, 7, 9, None), JobView(9, 1, 1, 9, 3, 9, None))
    order = E.canonical_order(tokenize([Snapshot(0, jobs, 1)], QC))
    assert list(order[0]) == [0, 3, 2, 1]


def test_gradients_flow_to_every_parameter():
    cfg = E.EncoderConfig(L=2, H=2, d=8)
    params = E.init_params(cfg, QC.Q, seed=1)
    leaves = params.leaves()
    out = E.forward(tokenize([snap_of(5)], QC), params, cfg, leaves=leaves)
    nc.sum_all(nc.square(nc.pick(out.q_t, np.array([0, 0]), np.array([1, 3])))).backward()
    grads = nc.collect_grads(leaves)
    silent = [k for k, g in grads.items() if not np.any(g) and k != "tok.idle"]
    assert silent == [] or all(k.startswith("tok.emb") for k in silent)


def test_non_finite_parameters_are_reported():
    cfg = E.EncoderConfig.test_scale()
    params = E.init_params(cfg, QC.Q, seed=0)
    params["enc0.wv"][0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="layer 0"):
        E.forward(tokenize([snap_of(3)], QC), params, cfg)
