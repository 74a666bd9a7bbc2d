import numpy as np
import pytest

from promptxfer import autodiff as ad
from promptxfer.autodiff import Tape, Tensor
from promptxfer.imaging import bilinear_resize, make_border_mask
from promptxfer.prompt import VisualPrompt, apply_prompt, clamp_for_display, identity_prompt, init_prompt


def random_prompt(h, w, p, seed):
    pr = init_prompt(h, w, p, "uniform", rng_seed=seed, amplitude=0.5)
    return pr


@pytest.mark.criterion("2")
@pytest.mark.parametrize("h,w,p", [(64, 64, 8), (64, 64, 2), (32, 48, 5), (224, 224, 30)])
def test_region_decomposition(h, w, p):
    rng = np.random.default_rng(p)
    x = rng.random((2, 3, 40, 40))
    pr = random_prompt(h, w, p, seed=p)
    out = apply_prompt(x, pr).data
    inner = np.stack([bilinear_resize(img, h - 2 * p, w - 2 * p).data for img in x])
    np.testing.assert_allclose(out[:, :, p:h - p, p:w - p], inner, rtol=0, atol=1e-12)
    border = make_border_mask(h, w, p).astype(bool)
    for b in range(2):
        np.testing.assert_allclose(out[b][border], pr.delta[border], rtol=0, atol=1e-12)


def test_identity_prompt_returns_the_image():
    x = np.random.default_rng(0).random((3, 64, 64))
    np.testing.assert_array_equal(apply_prompt(x, identity_prompt(64, 64)).data, x)


def test_prompt_is_model_independent():
    pr = random_prompt(64, 64, 8, 3)
    x = np.random.default_rng(1).random((3, 64, 64))
    np.testing.assert_array_equal(apply_prompt(x, pr).data, apply_prompt(x, pr).data)
    assert "model" not in pr.metadata


def test_delta_is_always_zero_in_the_interior():
    pr = init_prompt(64, 64, 8, "uniform", rng_seed=2)
    assert not pr.delta[:, 8:56, 8:56].any()
    moved = pr.with_delta(np.ones((3, 64, 64)), steps=3)
    assert not moved.delta[:, 8:56, 8:56].any()
    assert moved.delta[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
    assert moved.metadata["steps"] == 3


def test_gradient_reaches_border_only():
    pr = init_prompt(16, 16, 3)
    d = Tensor(pr.delta, requires_grad=True)
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    w = Tensor(np.random.default_rng(1).normal(size=(2, 3, 16, 16)))
    with Tape() as t:
        y = ad.sum_(ad.mul(apply_prompt(x, pr, d), w))
    g = t.gradient(y, [d])[0].data
    np.testing.assert_allclose(g, w.data.sum(axis=0) * pr.mask, atol=1e-13)


def test_zeros_init_and_metadata():
    pr = init_prompt(64, 64, 8)
    assert pr.delta.shape == (3, 64, 64) and not pr.delta.any()
    assert pr.metadata["init"] == "zeros"
    assert pr.checksum() == init_prompt(64, 64, 8).checksum()


@pytest.mark.parametrize("p", [-1, 32, 40])
def test_invalid_widths_are_rejected(p):
    with pytest.raises(ad.ShapeError):
        init_prompt(64, 64, p)


def test_delta_shape_must_match_canvas():
    with pytest.raises(ad.ShapeError):
        VisualPrompt(np.zeros((3, 8, 8)), 2, 8, 9)
    with pytest.raises(ad.ShapeError):
        apply_prompt(np.zeros((1, 8, 8)), init_prompt(8, 8, 2))


def test_prompt_delta_is_read_only():
    pr = init_prompt(8, 8, 2)
    with pytest.raises(ValueError):
        pr.delta[0, 0, 0] = 1.0


def test_clamp_for_display():
    out = clamp_for_display(Tensor(np.array([-0.5, 0.5, 1.5])))
    assert out.tolist() == [0.0, 0.5, 1.0]
