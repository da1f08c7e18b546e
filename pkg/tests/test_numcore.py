import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from slacksched import numcore as nc

finite = st.floats(-50, 50, allow_nan=False)


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = nc.softmax_rows(nc.Tensor(x)).data
    assert np.allclose(p.sum(-1), 1.0) and np.all(p >= 0)
    assert np.allclose(np.exp(nc.log_softmax_rows(nc.Tensor(x)).data), p)


def test_softmax_handles_masked_entries():
    x = np.array([[0.0, -1e9, 1.0]])
    p = nc.softmax_rows(nc.Tensor(x)).data
    assert p[0, 1] == 0.0 and np.isclose(p.sum(), 1.0)


def test_broadcast_gradients_reduce_to_parameter_shape():
    a = nc.Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = nc.Tensor(np.ones((1, 4)), requires_grad=True)
    nc.sum_all(nc.add(a, b)).backward()
    assert b.grad.shape == (1, 4) and np.all(b.grad == 6)


def test_gradients_accumulate_over_reuse():
    x = nc.Tensor(np.array([2.0]), requires_grad=True)
    nc.sum_all(nc.add(nc.mul(x, x), x)).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_no_grad_builds_no_graph():
    x = nc.Tensor(np.ones(3), requires_grad=True)
    with nc.no_grad():
        y = nc.sum_all(nc.square(x))
    assert not y.requires_grad


def test_layer_norm_normalises():
    x = np.random.default_rng(0).normal(3, 5, size=(4, 8))
    y = nc.layer_norm(nc.Tensor(x), nc.Tensor(np.ones((1, 8))), nc.Tensor(np.zeros((1, 8)))).data
    assert np.allclose(y.mean(-1), 0, atol=1e-12) and np.allclose(y.std(-1), 1, atol=1e-3)


def test_gather_and_pick():
    x = np.arange(12.0).reshape(1, 3, 4)
    g = nc.gather_rows(nc.Tensor(x), np.array([[2, 0, 1]])).data
    assert np.array_equal(g[0, 0], x[0, 2])
    p = nc.pick(nc.Tensor(np.arange(6.0).reshape(2, 3)), np.array([0, 1]), np.array([2, 0])).data
    assert list(p) == [2.0, 3.0]


def test_grad_check_detects_wrong_gradient():
    # a deliberately broken op: forward squares, backward pretends the derivative is 1
    def broken(t):
        return nc._node(t.data ** 2, (t,), lambda g: (g,))

    err = nc.grad_check(lambda l: nc.sum_all(broken(l["x"])), {"x": np.array([1.5, -2.0])})
    assert err > 0.1


def test_paramstore_roundtrip(tmp_path):
    p = nc.ParamStore({"w": np.random.default_rng(1).normal(size=(3, 2)), "b": np.zeros(2)})
    p.save(tmp_path / "p.json", {"meta": {"x": 1}})
    q, extra = nc.ParamStore.load(tmp_path / "p.json")
    assert extra == {"meta": {"x": 1}}
    assert all(np.array_equal(p[k], q[k]) for k in p)
    p["w"][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        p.check_finite()


def test_adam_minimises_quadratic():
    p = nc.ParamStore({"x": np.array([5.0, -3.0])})
    opt = nc.Adam(lr=0.1)
    for _ in range(500):
        leaves = p.leaves()
        nc.sum_all(nc.square(leaves["x"])).backward()
        opt.step(p, nc.collect_grads(leaves))
    assert np.abs(p["x"]).max() < 1e-2
    with pytest.raises(nc.ContractError):
        opt.step(p, {"x": np.zeros(3)})


def test_no_grad_is_per_thread():
    # A enters, B enters, A leaves, B leaves: with a shared flag B would restore "disabled"
    import threading

    a_in, b_in, a_out = threading.Event(), threading.Event(), threading.Event()

    def first():
        with nc.no_grad():
            a_in.set()
            b_in.wait()
        a_out.set()

    def second():
        a_in.wait()
        with nc.no_grad():
            b_in.set()
            a_out.wait()

    threads = [threading.Thread(target=first), threading.Thread(target=second)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert nc.grad_enabled()
    x = nc.Tensor(np.ones(2), requires_grad=True)
    nc.sum_all(x).backward()
    assert x.grad is not None
