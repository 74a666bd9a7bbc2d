import numpy as np
import pytest

from promptxfer import autodiff as ad
from promptxfer.autodiff import Tape, Tensor, grad_check
from promptxfer.imaging import (CORRUPTIONS, SEVERITY_TABLE, SceneObject, SceneSpec, bilinear_resize, corrupt,
                                generate_dataset, interpolation_matrix, make_border_mask, render_scene)
from promptxfer.tasks import COUNTING, PRESENCE, RECOGNITION, RECOGNITION_ALT, TOKENIZER


def resize_oracle(img, out_h, out_w):
    """Pixel loop: half-pixel centres, coordinates clamped to the source grid."""
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, h - 1); fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, w - 1); fx = sx - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
                            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])
    return out


@pytest.mark.parametrize("h,w,oh,ow", [(64, 64, 48, 48), (10, 7, 23, 5), (5, 5, 1, 1), (8, 12, 8, 3)])
def test_resize_matches_pixel_loop_oracle(h, w, oh, ow):
    img = np.random.default_rng(h * w).random((3, h, w))
    np.testing.assert_allclose(bilinear_resize(img, oh, ow).data, resize_oracle(img, oh, ow), atol=1e-12)


def test_resize_identity_and_constant_images():
    img = np.random.default_rng(0).random((3, 9, 9))
    np.testing.assert_array_equal(bilinear_resize(img, 9, 9).data, img)
    const = np.full((3, 13, 17), 0.37)
    np.testing.assert_allclose(bilinear_resize(const, 6, 29).data, 0.37, atol=1e-15)


def test_interpolation_matrix_is_row_stochastic():
    for n_in, n_out in [(64, 48), (3, 11), (48, 64)]:
        m = interpolation_matrix(n_in, n_out)
        assert m.shape == (n_out, n_in)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)
        assert (m >= 0).all()


def test_resize_is_differentiable():
    rng = np.random.default_rng(1)
    w = Tensor(rng.normal(size=(3, 5, 4)))
    assert grad_check(lambda t: ad.sum_(ad.mul(bilinear_resize(t, 5, 4), w)), rng.random((3, 7, 6))) < 1e-6


def test_resize_rejects_empty_target():
    with pytest.raises(ad.ShapeError):
        bilinear_resize(np.zeros((3, 4, 4)), 0, 3)


@pytest.mark.criterion("3")
def test_mask_count_at_224_p30_is_69840():
    m = make_border_mask(224, 224, 30)
    assert int(m.sum()) == 69840
    assert int(make_border_mask(64, 64, 8).sum()) == 5376


@pytest.mark.parametrize("h,w,p", [(64, 64, 8), (10, 14, 3), (64, 64, 0), (8, 8, 4)])
def test_mask_count_formula(h, w, p):
    m = make_border_mask(h, w, p)
    assert m.shape == (3, h, w)
    assert set(np.unique(m)) <= {0.0, 1.0}
    assert int(m.sum()) == 3 * (h * w - max(h - 2 * p, 0) * max(w - 2 * p, 0))


def test_mask_rejects_oversized_width():
    with pytest.raises(ad.ShapeError):
        make_border_mask(8, 8, 5)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corruptions_are_deterministic_and_bounded(kind):
    img = np.random.default_rng(2).random((3, 16, 16))
    a, b = corrupt(img, kind, 3, rng_seed=5), corrupt(img, kind, 3, rng_seed=5)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, img)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corruption_strength_grows_with_severity(kind):
    img = np.random.default_rng(3).uniform(0.2, 0.6, (3, 16, 16))
    dist = [np.abs(corrupt(img, kind, s, rng_seed=1) - img).mean() for s in range(1, 6)]
    assert all(x < y for x, y in zip(dist, dist[1:]))
    assert len(SEVERITY_TABLE[kind]) == 6


def test_corrupt_validates_arguments():
    img = np.zeros((3, 4, 4))
    with pytest.raises(ValueError):
        corrupt(img, "fog", 1)
    with pytest.raises(ValueError):
        corrupt(img, "brightness", 0)


def test_render_scene_draws_the_object_colour():
    scene = SceneSpec((SceneObject("square", "red", (32.0, 32.0), 10.0),), (0.0, 0.0, 0.0), (64, 64))
    img = render_scene(scene)
    np.testing.assert_allclose(img[:, 32, 32], (0.90, 0.10, 0.10))
    np.testing.assert_array_equal(img[:, 2, 2], 0.0)


def test_scene_validation_rejects_overlap_and_escape():
    obj = SceneObject("circle", "red", (10.0, 10.0), 6.0)
    with pytest.raises(ValueError):
        SceneSpec((obj, SceneObject("circle", "blue", (14.0, 10.0), 6.0)), (0, 0, 0), (64, 64)).validate()
    with pytest.raises(ValueError):
        SceneSpec((SceneObject("circle", "red", (3.0, 30.0), 6.0),), (0, 0, 0), (64, 64)).validate()


@pytest.mark.parametrize("task", [RECOGNITION, RECOGNITION_ALT, COUNTING, PRESENCE])
def test_datasets_are_deterministic_and_balanced(task):
    a = generate_dataset(task, 40, 11, "val")
    b = generate_dataset(task, 40, 11, "val")
    assert [s.sample_id for s in a] == [s.sample_id for s in b]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert x.target_text == y.target_text and x.description_text == y.description_text
    labels = [s.label_index for s in a]
    counts = np.bincount(labels)
    present = counts[counts > 0]
    assert present.max() - present.min() <= 1
    for s in a:
        assert s.image.shape == (3, 64, 64)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        s.scene.validate()


def test_splits_and_seeds_give_different_samples():
    a = generate_dataset(RECOGNITION, 5, 0, "train")
    assert not np.array_equal(a[0].image, generate_dataset(RECOGNITION, 5, 0, "test")[0].image)
    assert not np.array_equal(a[0].image, generate_dataset(RECOGNITION, 5, 1, "train")[0].image)


def test_labels_agree_with_scene_content():
    for s in generate_dataset(COUNTING, 20, 3):
        assert len(s.scene.objects) == s.label_index
        assert TOKENIZER.detokenize(s.target_text[:1]) == ("one", "two", "three", "four", "five")[s.label_index - 1]
    for s in generate_dataset(PRESENCE, 20, 3):
        has_red = any(o.color == "red" for o in s.scene.objects)
        assert has_red == (s.label_index == 0)
    for s in generate_dataset(RECOGNITION, 8, 3):
        assert s.scene.objects[0].shape == RECOGNITION.candidates[s.label_index]
        assert s.description_text == TOKENIZER.tokenize(f"this is a photo of a {s.scene.objects[0].shape}")


def test_generate_dataset_rejects_bad_arguments():
    with pytest.raises(ValueError):
        generate_dataset(RECOGNITION, 0, 0)
    with pytest.raises(ValueError):
        generate_dataset(RECOGNITION, 3, 0, "dev")
