import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from milkstream import numerics as nx
from milkstream.errors import InvalidArgument, NumericFailure


def vals(t):
    return t.detach().numpy().tolist()


@pytest.mark.parametrize("v, want", [((1, 2, 3), (1, 3, 6)), ((0, 0, 0), (0, 0, 0)),
                                     ((0.5, 0.5), (0.5, 1.0))])
def test_cumulative_sum(v, want):
    assert vals(nx.cumulative_sum(v)) == list(want)


@pytest.mark.parametrize("v, want", [((1, 1, 1), (1, 1, 1)), ((0.5, 0.5), (0.5, 0.25)),
                                     ((2, 0, 3), (2, 0, 0))])
def test_cumulative_product(v, want):
    assert vals(nx.cumulative_product(v)) == list(want)


@pytest.mark.parametrize("v, want", [((1, 2, 3), (6, 5, 3)), ((7.25,), (7.25,)),
                                     ((0.25, 0.25, 0.5), (1.0, 0.75, 0.5))])
def test_reversed_cumulative_sum(v, want):
    assert vals(nx.reversed_cumulative_sum(v)) == list(want)


@pytest.mark.parametrize("op", [nx.cumulative_sum, nx.cumulative_product, nx.reversed_cumulative_sum])
def test_scans_reject_empty(op):
    with pytest.raises(InvalidArgument):
        op([])


def test_clamped_divide():
    assert vals(nx.clamped_divide([1.0], [2.0], 1e-10)) == [0.5]
    assert vals(nx.clamped_divide([1.0], [0.0], 1e-10)) == pytest.approx([1e10])
    assert vals(nx.clamped_divide([0.0], [0.0], 1e-10)) == [0.0]
    with pytest.raises(InvalidArgument):
        nx.clamped_divide([1.0], [1.0], 0.0)


def test_logistic():
    assert nx.logistic(0.0) == 0.5
    assert abs(nx.logistic(1e3) - 1.0) < 1e-12
    assert abs(nx.logistic(-1e3)) < 1e-12
    t = nx.logistic(torch.tensor([-1e3, 0.0, 1e3]))
    assert torch.isfinite(t).all()


def test_masked_softmax_examples():
    assert vals(nx.masked_softmax([0.0, 0.0], 2)) == [0.5, 0.5]
    assert vals(nx.masked_softmax([5.0, 5.0, 5.0], 1)) == [1.0, 0.0, 0.0]
    np.testing.assert_allclose(vals(nx.masked_softmax([0.0, math.log(3)], 2)), [0.25, 0.75], atol=1e-15)
    with pytest.raises(InvalidArgument):
        nx.masked_softmax([0.0, 1.0], 3)
    with pytest.raises(InvalidArgument):
        nx.masked_softmax([0.0, 1.0], 0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)), st.data())
def test_masked_softmax_is_distribution(e, data):
    n = data.draw(st.integers(1, len(e)))
    out = nx.masked_softmax(e, n).numpy()
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-12
    assert (out[n:] == 0).all()


def test_gaussian_noise():
    rng = nx.SeededRng(7)
    assert nx.gaussian_noise(rng, 0.0) == 0.0
    with pytest.raises(InvalidArgument):
        nx.gaussian_noise(rng, -1.0)
    x = nx.gaussian_noise(rng, 4.0, 10 ** 5)
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 4.0) < 0.05


def test_rng_streams_are_reproducible():
    a = nx.SeededRng(123).standard_normal(1001)
    b = nx.SeededRng(123).standard_normal(1001)
    assert a.tobytes() == b.tobytes()
    assert nx.SeededRng(124).standard_normal(5).tobytes() != a[:5].tobytes()


def test_box_muller_pins_the_stream():
    # cos/sin branches of one (u1, u2) pair from PCG64(0)
    u = np.random.Generator(np.random.PCG64(0)).random(2)
    r = math.sqrt(-2 * math.log(1 - u[0]))
    z = nx.SeededRng(0).standard_normal(2)
    assert z[0] == pytest.approx(r * math.cos(2 * math.pi * u[1]), abs=1e-15)
    assert z[1] == pytest.approx(r * math.sin(2 * math.pi * u[1]), abs=1e-15)


def test_finite_difference_gradient():
    g = nx.finite_difference_gradient(lambda x: float(x[0] ** 2), [3.0], 1e-5)
    assert abs(g[0] - 6.0) < 1e-6
    assert np.all(nx.finite_difference_gradient(lambda x: 4.0, np.ones(5)) == 0)
    with pytest.raises(NumericFailure):
        nx.finite_difference_gradient(lambda x: float("nan"), [1.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-3, 3)),
       arrays(np.float64, 8, elements=st.floats(-3, 3)))
def test_cumsum_backward_is_reversed_cumsum(v, upstream):
    upstream = upstream[:len(v)]
    t = torch.tensor(v, requires_grad=True)
    (nx.cumulative_sum(t) * torch.tensor(upstream)).sum().backward()
    np.testing.assert_allclose(t.grad.numpy(), nx.reversed_cumulative_sum(upstream).numpy(), atol=1e-12)
    fd = nx.finite_difference_gradient(
        lambda x: float((nx.cumulative_sum(x) * torch.tensor(upstream)).sum()), v)
    assert nx.gradients_close(t.grad.numpy(), fd, rtol=1e-6, atol=1e-8)


def test_cumprod_gradient_matches_finite_differences():
    v = np.array([0.7, 1.3, 0.4, 2.0])
    w = torch.tensor([0.5, -1.0, 2.0, 0.25])
    t = torch.tensor(v, requires_grad=True)
    (nx.cumulative_product(t) * w).sum().backward()
    fd = nx.finite_difference_gradient(lambda x: float((nx.cumulative_product(x) * w).sum()), v)
    assert nx.gradients_close(t.grad.numpy(), fd, rtol=1e-6)
