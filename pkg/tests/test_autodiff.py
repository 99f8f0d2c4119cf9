import math
from decimal import Decimal, getcontext

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from lgsc import autodiff as ad
from lgsc.autodiff import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


# ---- forward values --------------------------------------------------------

def test_matmul_shape():
    assert ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((3, 4)))).shape == (2, 4)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 4\)"):
        ad.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 4))))


def test_add_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        leaf(np.ones(3)) + leaf(np.ones(4))


def test_add_zeros_is_bitwise_identity():
    x = np.random.default_rng(0).normal(size=(5, 7))
    assert np.array_equal((leaf(x) + Tensor(np.zeros((5, 7)))).data, x)


def test_identity_matmul():
    a = np.random.default_rng(1).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), leaf(a)).data, a)


def test_gelu_values():
    # oracle: x * Phi(x) with Phi from math.erf, independent of scipy
    assert ad.gelu(leaf(0.0)).item() == 0.0
    assert ad.gelu(leaf(1.0)).item() == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)
    assert ad.gelu(leaf(1.0)).item() == pytest.approx(0.8413447460685429, abs=1e-12)
    assert abs(ad.gelu(leaf(-10.0)).item()) < 1e-8


def test_softmax_uniform_and_shift():
    np.testing.assert_allclose(ad.softmax(leaf([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    s = ad.softmax(leaf([1000.0, 0.0])).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s, [1.0, 0.0], atol=1e-12)


def test_softmax_matches_extended_precision():
    getcontext().prec = 50
    e = [Decimal(v).exp() for v in (1, 2, 3)]
    ref = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(ad.softmax(leaf([1.0, 2.0, 3.0])).data, ref, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-300, 300)))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(leaf(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_cosine_values():
    assert ad.cosine_similarity(leaf([1.0, 0.0]), leaf([0.0, 1.0])).item() == 0.0
    ref = 32 / math.sqrt(14 * 77)
    assert ad.cosine_similarity(leaf([1.0, 2, 3]), leaf([4.0, 5, 6])).item() == pytest.approx(ref, abs=1e-15)
    assert ref == pytest.approx(0.97463, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=finite))
def test_cosine_self_is_one_and_stationary(v):
    if np.linalg.norm(v) < 1e-3:
        return
    a = leaf(v)
    c = ad.cosine_similarity(a, Tensor(v.copy()))
    assert c.item() == pytest.approx(1.0, abs=1e-12)
    c.backward()
    np.testing.assert_allclose(a.grad, 0.0, atol=1e-12)


def test_cosine_zero_norm_guard(caplog):
    a = leaf(np.zeros(3))
    c = ad.cosine_similarity(a, leaf([1.0, 2.0, 3.0]))
    assert c.item() == 0.0
    c.backward()
    assert np.array_equal(a.grad, np.zeros(3))
    assert "zero-norm" in caplog.text


# ---- backward -------------------------------------------------------------

def test_square_derivative():
    x = leaf(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (leaf(np.ones(3)) * 2.0).backward()


def test_second_backward_rejected():
    x = leaf(2.0)
    y = x * x
    y.backward()
    with pytest.raises(RuntimeError):
        y.backward()


def test_reachable_leaves_get_grads():
    a, b = leaf(np.ones(3)), leaf(np.ones(3))
    unused = leaf(np.ones(3))
    ad.tsum(a * b).backward()
    assert a.grad is not None and b.grad is not None and unused.grad is None
    assert a.grad.shape == a.shape


def test_tape_is_topological():
    a = leaf(np.ones((2, 2)))
    out = ad.tsum(ad.gelu(ad.matmul(a, a) + a) * a)
    tape = ad.Tape.from_output(out)
    assert tape.is_topological()
    assert tape.nodes[-1] is out


def test_no_grad_records_nothing():
    a = leaf(np.ones(2))
    with ad.no_grad():
        y = a * 3.0
    assert not y.requires_grad


def test_deterministic_forward_backward():
    rng = np.random.default_rng(3)
    x0, w0 = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))

    def run():
        x, w = leaf(x0), leaf(w0)
        y = ad.tsum(ad.softmax(ad.matmul(x, w)) * ad.gelu(ad.matmul(x, w)))
        y.backward()
        return y.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---- finite differences -----------------------------------------------------

def test_grad_check_linear_is_exact():
    # dyadic entries and step keep every perturbed value representable
    w = leaf(np.random.default_rng(0).integers(-4, 5, size=(3, 4)).astype(float))
    x = np.random.default_rng(1).integers(-4, 5, size=(4, 1)).astype(float)
    assert ad.grad_check(lambda: ad.tsum(ad.matmul(w, Tensor(x))), [w], eps=2.0 ** -20) < 1e-10
    w = leaf(np.random.default_rng(2).normal(size=(3, 4)))
    assert ad.grad_check(lambda: ad.tsum(ad.matmul(w, Tensor(x))), [w]) < 1e-8


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
    "slice": lambda a, b: a[1:, ::2] * b[:-1, ::2],
    "take": lambda a, b: ad.take(a, [2, 0, 2]) + b[0],
    "sum": lambda a, b: ad.tsum(a, axis=0) * ad.mean(b, axis=1)[0],
    "exp": lambda a, b: ad.exp(a * 0.3) + b,
    "log": lambda a, b: ad.log(a * a + 1.0) * b,
    "sqrt": lambda a, b: ad.sqrt(a * a + 1.0) - b,
    "power": lambda a, b: ad.power(a * a + 1.0, 1.5) * b,
    "gelu": lambda a, b: ad.gelu(a) * b,
    "softmax": lambda a, b: ad.softmax(a, axis=-1) * b,
    "log_softmax": lambda a, b: ad.log_softmax(a, axis=0) * b,
    "layer_norm": lambda a, b: ad.layer_norm(a, b[0], b[1]),
    "cosine": lambda a, b: ad.cosine_similarity(a, b),
    "reshape": lambda a, b: ad.reshape(a, (4, 3)) * ad.reshape(b, (4, 3)),
    "transpose": lambda a, b: ad.matmul(ad.transpose(a), b),
    "swapaxes": lambda a, b: ad.swapaxes(ad.reshape(a, (2, 3, 2)), 0, 2) * 2.0 + ad.reshape(b, (2, 3, 2))[0, 0, 0],
    "broadcast": lambda a, b: a + b[0],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(sorted(OPS).index(name))
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    r = rng.normal(size=OPS[name](a, b).shape)
    assert ad.grad_check(lambda: ad.tsum(OPS[name](a, b) * Tensor(r)), [a, b]) < 1e-6


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), arrays(np.float64, (5, 3), elements=finite))
def test_matmul_softmax_gradient_property(x, w):
    a, b = leaf(x), leaf(w)
    err = ad.grad_check(lambda: ad.tsum(ad.softmax(ad.matmul(a, b)) * Tensor(np.arange(6.0).reshape(2, 3))), [a, b])
    assert err < 1e-4


def test_joint_scale_uses_whole_vector():
    # a tiny gradient next to a large one: judged against the large one
    a, b = leaf([1.0]), leaf([1.0])
    f = lambda: a * 1e3 + b * 1e-9  # noqa: E731
    assert ad.grad_check(lambda: ad.tsum(f()), [a, b], joint=True) < 1e-6
