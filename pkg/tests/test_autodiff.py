import zlib

import numpy as np
import pytest

from promptxfer import autodiff as ad
from promptxfer.autodiff import Tape, Tensor, grad_check

TOL = 1e-4
N_POINTS = 10


def weighted(y: Tensor, seed: int = 99) -> Tensor:
    """Fixed random projection of any tensor onto a scalar."""
    w = np.random.default_rng(seed).normal(size=y.shape)
    return ad.sum_(ad.mul(y, Tensor(w)))


def const(rng, *shape):
    return Tensor(rng.normal(size=shape))


# op name -> (input shape, builder(rng) -> fn(x) -> Tensor, point sampler)
def _cases():
    c = {}
    c["add"] = ((3, 4), lambda r: (lambda b: lambda x: ad.add(x, b))(const(r, 3, 4)))
    c["add_rhs"] = ((3, 4), lambda r: (lambda a: lambda x: ad.add(a, x))(const(r, 3, 4)))
    c["sub_rhs"] = ((3, 4), lambda r: (lambda a: lambda x: ad.sub(a, x))(const(r, 3, 4)))
    c["mul"] = ((3, 4), lambda r: (lambda b: lambda x: ad.mul(x, b))(const(r, 3, 4)))
    c["mul_self"] = ((5,), lambda r: lambda x: ad.mul(x, x))
    c["scale"] = ((6,), lambda r: lambda x: ad.scale(x, -2.5))
    c["neg"] = ((6,), lambda r: lambda x: ad.neg(x))
    c["exp"] = ((2, 3), lambda r: lambda x: ad.exp(x))
    c["log"] = ((2, 3), lambda r: lambda x: ad.log(ad.add(ad.mul(x, x), Tensor(np.ones((2, 3))))))
    c["tanh"] = ((7,), lambda r: lambda x: ad.tanh(x))
    c["gelu"] = ((7,), lambda r: lambda x: ad.gelu(x))
    c["matmul_lhs"] = ((3, 4), lambda r: (lambda b: lambda x: ad.matmul(x, b))(const(r, 4, 2)))
    c["matmul_rhs"] = ((4, 2), lambda r: (lambda a: lambda x: ad.matmul(a, x))(const(r, 3, 4)))
    c["linear_x"] = ((2, 3, 4), lambda r: (lambda w, b: lambda x: ad.linear(x, w, b))(const(r, 4, 5), const(r, 5)))
    c["linear_w"] = ((4, 5), lambda r: (lambda a, b: lambda x: ad.linear(a, x, b))(const(r, 2, 3, 4), const(r, 5)))
    c["linear_b"] = ((5,), lambda r: (lambda a, w: lambda x: ad.linear(a, w, x))(const(r, 2, 3, 4), const(r, 4, 5)))
    c["bmm_lhs"] = ((2, 3, 4), lambda r: (lambda b: lambda x: ad.bmm(x, b))(const(r, 2, 4, 2)))
    c["bmm_rhs"] = ((2, 4, 2), lambda r: (lambda a: lambda x: ad.bmm(a, x))(const(r, 2, 3, 4)))
    c["reshape"] = ((2, 6), lambda r: lambda x: ad.reshape(x, (3, 4)))
    c["transpose"] = ((2, 3, 4), lambda r: lambda x: ad.transpose(x, (2, 0, 1)))
    c["expand"] = ((3, 2), lambda r: lambda x: ad.expand(x, (4,)))
    c["concat"] = ((2, 3), lambda r: (lambda b: lambda x: ad.concat([x, b, x], axis=1))(const(r, 2, 2)))
    c["index"] = ((5, 3), lambda r: lambda x: ad.index(x, (np.array([0, 2, 2, 4]), np.array([1, 1, 1, 0]))))
    c["pad2d"] = ((2, 3, 3), lambda r: lambda x: ad.pad2d(x, 1, 2, 0, 3))
    c["masked_add_delta"] = ((4, 4), lambda r: (lambda base, m: lambda x: ad.masked_add(base, x, m))(
        const(r, 3, 4, 4), (r.random((4, 4)) > 0.5).astype(float)))
    c["masked_add_base"] = ((3, 4, 4), lambda r: (lambda d, m: lambda x: ad.masked_add(x, d, m))(
        const(r, 4, 4), (r.random((4, 4)) > 0.5).astype(float)))
    c["embedding"] = ((6, 3), lambda r: lambda x: ad.embedding(x, np.array([[0, 5, 5], [2, 0, 1]])))
    c["sum_all"] = ((3, 4), lambda r: lambda x: ad.mul(ad.sum_(x), ad.sum_(x)))
    c["sum_axis"] = ((3, 4), lambda r: lambda x: ad.sum_(x, axis=1))
    c["mean_axis"] = ((3, 4), lambda r: lambda x: ad.mean(x, axis=0))
    c["square_sum"] = ((3, 4), lambda r: lambda x: ad.square_sum(x))
    c["softmax"] = ((3, 5), lambda r: lambda x: ad.softmax(x))
    c["log_softmax"] = ((3, 5), lambda r: lambda x: ad.log_softmax(x))
    c["layer_norm_x"] = ((2, 3, 6), lambda r: (lambda g, b: lambda x: ad.layer_norm(x, g, b))(const(r, 6), const(r, 6)))
    c["layer_norm_gamma"] = ((6,), lambda r: (lambda a, b: lambda x: ad.layer_norm(a, x, b))(const(r, 2, 6), const(r, 6)))
    c["layer_norm_beta"] = ((6,), lambda r: (lambda a, g: lambda x: ad.layer_norm(a, g, x))(const(r, 2, 6), const(r, 6)))
    c["token_nll"] = ((4, 7), lambda r: lambda x: ad.token_nll(x, [0, 6, 3, 3]))
    c["softmax_cross_entropy"] = ((7,), lambda r: lambda x: ad.softmax_cross_entropy(x, 2))
    c["l2_norm"] = ((3, 4), lambda r: lambda x: ad.l2_norm(x))
    c["cosine_lhs"] = ((3, 5), lambda r: (lambda v: lambda x: ad.cosine_similarity(x, v))(const(r, 3, 5)))
    c["cosine_rhs"] = ((5,), lambda r: (lambda u: lambda x: ad.cosine_similarity(u, x))(const(r, 5)))
    return c


CASES = _cases()


@pytest.mark.criterion("1")
@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_central_differences(name):
    shape, build = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = build(rng)
    for k in range(N_POINTS):
        x = rng.normal(size=shape)
        err = grad_check(lambda t: weighted(fn(t)), x)
        assert err < TOL, f"{name} point {k}: relative error {err:.3e}"


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    want = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("fn", [
    lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
    lambda: ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2)))),
    lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3))),
    lambda: ad.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((2, 3)))),
    lambda: ad.reshape(Tensor(np.ones(6)), (4, 2)),
    lambda: ad.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))),
    lambda: ad.bmm(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 2)))),
    lambda: ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))], axis=0),
    lambda: ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.ones(3))),
])
def test_shape_mismatch_raises_shape_error(fn):
    with pytest.raises(ad.ShapeError):
        fn()


def test_no_implicit_broadcasting_for_scalars():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 2))), Tensor(1.0))


def test_cosine_of_zero_vector_is_degenerate():
    with pytest.raises(ad.DegenerateInputError):
        ad.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))


def test_l2_norm_gradient_at_zero_is_zero():
    x = Tensor(np.zeros(4), requires_grad=True)
    with Tape() as t:
        y = ad.l2_norm(x)
    assert t.gradient(y, [x])[0].data.tolist() == [0.0] * 4


def test_untracked_parameters_receive_no_gradient():
    w = Tensor(np.ones((3, 2)))  # frozen: requires_grad False
    x = Tensor(np.arange(3.0).reshape(1, 3), requires_grad=True)
    with Tape() as t:
        y = ad.sum_(ad.matmul(x, w))
    assert t.node_id(w) is None
    gx, gw = t.gradient(y, [x, w])
    np.testing.assert_array_equal(gx.data, [[2.0, 2.0, 2.0]])
    np.testing.assert_array_equal(gw.data, np.zeros((3, 2)))


def test_ops_outside_a_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.exp(x)
    assert not y.requires_grad


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with Tape() as t:
        y = ad.sum_(ad.add(ad.mul(x, x), ad.scale(x, 3.0)))
    np.testing.assert_allclose(t.gradient(y, [x])[0].data, 2 * x.data + 3.0, rtol=1e-15)


def test_tensor_is_immutable_and_values_are_row_major():
    t = Tensor([[1, 2], [3, 4]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 9.0
    assert t.values == [1.0, 2.0, 3.0, 4.0]
    assert t.data.dtype == np.float64


def test_backward_needs_scalar_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as t:
        y = ad.exp(x)
    with pytest.raises(ad.ShapeError):
        t.gradient(y, [x])


def test_log_softmax_is_stable_for_large_logits():
    y = ad.log_softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]])))
    assert np.isfinite(y.data).all()
    assert y.data[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_token_nll_matches_direct_formula():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 9))
    tgt = rng.integers(0, 9, size=5)
    want = -np.log(np.exp(z) / np.exp(z).sum(axis=1, keepdims=True))[np.arange(5), tgt]
    np.testing.assert_allclose(ad.token_nll(Tensor(z), tgt).data, want, rtol=1e-12)


def test_grad_check_detects_a_wrong_gradient():
    def bad(x):
        # value of x^2 with the gradient of x
        return ad._record(np.asarray(np.sum(x.data ** 2)), (x,), lambda g, n: (g * np.ones_like(x.data),))
    assert grad_check(bad, np.array([2.0, 3.0])) > 0.5
