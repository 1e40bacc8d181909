import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from outadapt.exceptions import ConfigurationError
from outadapt.networks import Params
from outadapt.optim import D_BASE_LR, G_BASE_LR, SGD, Adam, PolySchedule, poly_lr
from outadapt.tensor import Tensor


def params(**arrays):
    return Params((k.replace("_", "."), Tensor(np.asarray(v, np.float32), requires_grad=True))
                  for k, v in arrays.items())


def test_poly_endpoints():
    s = PolySchedule(G_BASE_LR, 1000)
    assert poly_lr(s, 0) == 2.5e-4
    assert poly_lr(s, 1000) == 0.0
    assert poly_lr(s, 500) == pytest.approx(1.3397e-4, rel=1e-4)
    assert PolySchedule(D_BASE_LR, 10)(0) == 1e-4


def test_poly_range():
    s = PolySchedule(1.0, 10)
    with pytest.raises(ConfigurationError):
        poly_lr(s, 11)
    with pytest.raises(ConfigurationError):
        poly_lr(s, -1)
    with pytest.raises(ConfigurationError):
        PolySchedule(1.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10 ** 6), st.floats(0.1, 3.0), st.data())
def test_poly_nonincreasing(total, power, data):
    s = PolySchedule(1.0, total, power)
    a = data.draw(st.integers(0, total))
    b = data.draw(st.integers(a, total))
    assert s(b) <= s(a)


def test_sgd_hand_value():
    p = params(w_weight=[1.0])
    p["w.weight"].grad = np.array([1.0], np.float32)
    SGD(p, momentum=0.9, weight_decay=0.0).step(0.1)
    assert p["w.weight"].data[0] == pytest.approx(0.81, rel=1e-6)


def test_sgd_zero_grad_fixed_point():
    p = params(w_weight=[1.0, -2.0], w_bias=[0.5])
    opt = SGD(p, weight_decay=0.0)
    for _ in range(3):
        for t in p:
            t.grad = np.zeros_like(t.data)
        opt.step(0.1)
    assert np.array_equal(p["w.weight"].data, [1.0, -2.0])


def test_sgd_decay_weights_only():
    p = params(w_weight=[2.0], w_bias=[2.0])
    for t in p:
        t.grad = np.zeros(1, np.float32)
    SGD(p, momentum=0.9, weight_decay=1e-4).step(0.1)
    # g' = wd * p, v = g', p -= lr * (1 + m) * g'
    assert p["w.weight"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 1.9 * 1e-4), rel=1e-7)
    assert p["w.bias"].data[0] == 2.0


def test_sgd_matches_reference_loop():
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal(5)
    p = params(w_weight=p0)
    opt = SGD(p, momentum=0.9, weight_decay=1e-4)
    ref, v = p0.copy(), np.zeros(5)
    for k in range(10):
        g = rng.standard_normal(5)
        p["w.weight"].grad = g.astype(np.float32)
        opt.step(0.01 * (k + 1))
        g2 = g + 1e-4 * ref
        v = 0.9 * v + g2
        ref = ref - 0.01 * (k + 1) * (g2 + 0.9 * v)
    np.testing.assert_allclose(p["w.weight"].data, ref, rtol=1e-5)
    assert opt.state()["v.w.weight"].shape == (5,)


def test_sgd_descent():
    rng = np.random.default_rng(1)
    p = params(x_weight=rng.standard_normal(20))
    f0 = 0.5 * np.sum(p["x.weight"].data ** 2)
    opt = SGD(p, weight_decay=0.0)
    for _ in range(50):
        p["x.weight"].grad = p["x.weight"].data.copy()
        opt.step(0.05)
    assert 0.5 * np.sum(p["x.weight"].data ** 2) <= 0.1 * f0


def test_missing_gradient():
    for cls in (SGD, Adam):
        p = params(w_weight=[1.0])
        with pytest.raises(ConfigurationError, match="no gradient"):
            cls(p).step(0.1)


def test_adam_first_step_is_lr():
    p = params(w_weight=[1.0])
    p["w.weight"].grad = np.array([4.0], np.float32)
    Adam(p, betas=(0.9, 0.99)).step(1e-3)
    assert p["w.weight"].data[0] == pytest.approx(1.0 - 1e-3, rel=1e-6)


def test_adam_zero_grad_unchanged():
    p = params(w_weight=[1.0, 2.0])
    p["w.weight"].grad = np.zeros(2, np.float32)
    Adam(p).step(1e-3)
    assert np.array_equal(p["w.weight"].data, [1.0, 2.0])


def test_adam_monotone_and_counter():
    p = params(w_weight=[1.0])
    opt = Adam(p)
    seen = [1.0]
    for k in range(1, 4):
        p["w.weight"].grad = np.array([0.3], np.float32)
        opt.step(1e-2)
        assert opt.t == k
        seen.append(float(p["w.weight"].data[0]))
    assert all(b < a for a, b in zip(seen, seen[1:]))


def test_adam_matches_reference():
    rng = np.random.default_rng(2)
    p0 = rng.standard_normal(6)
    p = params(w_weight=p0)
    opt = Adam(p, betas=(0.9, 0.99), eps=1e-8)
    ref, m, v = p0.copy(), np.zeros(6), np.zeros(6)
    for t in range(1, 8):
        g = rng.standard_normal(6)
        p["w.weight"].grad = g.astype(np.float32)
        opt.step(1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w.weight"].data, ref, rtol=1e-5, atol=1e-6)


def test_state_shapes_and_isolation():
    g = params(a_weight=np.ones((2, 3)), a_bias=np.ones(2))
    d = params(a_weight=np.ones((2, 3)), a_bias=np.ones(2))
    sgd, adam = SGD(g), Adam(d)
    for name, t in g.items():
        assert sgd.velocity[name].shape == t.shape
    for name, t in d.items():
        assert adam.m[name].shape == adam.v[name].shape == t.shape
    buffers = list(sgd.velocity.values()) + list(adam.m.values()) + list(adam.v.values())
    for i, a in enumerate(buffers):
        for b in buffers[i + 1:]:
            assert not np.shares_memory(a, b)


def test_state_round_trip():
    p = params(w_weight=[1.0, 2.0])
    opt = Adam(p)
    p["w.weight"].grad = np.array([0.5, -0.5], np.float32)
    opt.step(1e-3)
    other = Adam(params(w_weight=[0.0, 0.0]))
    other.load_state(opt.state())
    assert other.t == 1 and np.array_equal(other.m["w.weight"], opt.m["w.weight"])
