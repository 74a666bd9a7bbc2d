import math

import numpy as np
import pytest

from promptxfer import autodiff as ad
from promptxfer.autodiff import Tape, Tensor, grad_check
from promptxfer.evaluation import stack_images
from promptxfer.losses import (ZERO_WEIGHTS, CacheMissError, CleanFeatureCache, ConfigurationError, LossWeights,
                               combine, compute_losses, loss_fca, loss_llm, loss_tse, loss_total)
from promptxfer.models import DualEncoder
from promptxfer.prompt import apply_prompt, identity_prompt, init_prompt
from promptxfer.tasks import TOKENIZER

W = LossWeights()


@pytest.fixture(scope="module")
def cache(toy_models, shapes_small):
    c = CleanFeatureCache()
    for m in toy_models:
        c.build(m, shapes_small)
    return c


def random_prompt(seed, p=8):
    return init_prompt(64, 64, p, "uniform", rng_seed=seed, amplitude=0.3)


def forced_dual(image_vec, text_vec, d=32):
    """Dual encoder whose towers ignore their input and emit fixed vectors."""
    base = DualEncoder.initialize(0, d_clip=d)
    params = dict(base.params)
    params["img.out"] = Tensor(np.zeros(params["img.out"].shape))
    params["img.outb"] = Tensor(image_vec)
    params["txt.out"] = Tensor(np.zeros(params["txt.out"].shape))
    params["txt.outb"] = Tensor(text_vec)
    return DualEncoder(params, 0, d_clip=d)


def test_forced_identical_embeddings_give_exp_tau(shapes_small):
    v = np.linspace(1, 2, 32)
    e = forced_dual(v, 3 * v)
    assert loss_tse(e, shapes_small[:3], random_prompt(0), W).item() == pytest.approx(7.389056, abs=1e-6)


def test_orthogonal_embeddings_give_one(shapes_small):
    u = np.zeros(32); u[0] = 1.0
    v = np.zeros(32); v[1] = 2.0
    assert loss_tse(forced_dual(u, v), shapes_small[:3], random_prompt(0), W).item() == pytest.approx(1.0, abs=1e-12)


def test_tse_matches_per_sample_oracle(toy_dual, shapes_small):
    pr = random_prompt(1)
    batch = shapes_small[:5]
    want = []
    for s in batch:
        zi = toy_dual.encode_image(apply_prompt(s.image, pr)).data
        zt = toy_dual.encode_text(s.description_text).data
        cos = zi @ zt / (np.linalg.norm(zi) * np.linalg.norm(zt))
        want.append(math.exp(2.0 * cos))
    got = loss_tse(toy_dual, batch, pr, W).item()
    assert got == pytest.approx(np.mean(want), abs=1e-10)
    assert math.exp(-2) <= got <= math.exp(2)


def test_tse_requires_descriptions(toy_dual, shapes_small):
    s = shapes_small[0]
    bad = type(s)(s.image, s.prompt_text, s.target_text, [], s.label_index, s.scene, s.sample_id)
    with pytest.raises(ConfigurationError):
        loss_tse(toy_dual, [bad], random_prompt(0), W)


def test_llm_with_uniform_head_is_log_vocab(toy_models, shapes_small):
    m = toy_models[0]
    params = dict(m.params)
    params["lm.head.w"] = Tensor(np.zeros(params["lm.head.w"].shape))
    params["lm.head.b"] = Tensor(np.zeros(params["lm.head.b"].shape))
    flat = type(m)(m.arch, params, m.seed).freeze()
    got = loss_llm(flat, shapes_small[:4], random_prompt(2)).item()
    assert got == pytest.approx(math.log(len(TOKENIZER)), abs=1e-12)


def test_llm_equals_mean_negative_log_likelihood(toy_models, shapes_small):
    pr = random_prompt(3)
    batch = shapes_small[:4]
    for m in toy_models:
        lls = [m.sequence_log_likelihood(apply_prompt(s.image, pr), s.prompt_text, s.target_text).item()
               for s in batch]
        assert loss_llm(m, batch, pr).item() == pytest.approx(-np.mean(lls), abs=1e-12)


def test_llm_rejects_empty_batch(toy_models):
    with pytest.raises(ConfigurationError):
        loss_llm(toy_models[0], [], random_prompt(0))


def test_fca_is_zero_for_identity_transform(toy_models, shapes_small, cache):
    for m in toy_models:
        assert loss_fca(m, shapes_small[:4], identity_prompt(64, 64), cache).item() == pytest.approx(0.0, abs=1e-20)


def test_fca_matches_loop_oracle(toy_models, shapes_small, cache):
    pr = random_prompt(4)
    batch = shapes_small[:3]
    m = toy_models[1]
    total = 0.0
    for s in batch:
        a = m.vision_encode(apply_prompt(s.image, pr)).data
        b = m.vision_encode(s.image).data
        for x, y in zip(a.ravel(), b.ravel()):
            total += 0.5 * (x - y) ** 2
    assert loss_fca(m, batch, pr, cache).item() == pytest.approx(total / len(batch), rel=1e-10)


def test_fca_arithmetic_example():
    a, b = np.array([1.0, 2.0]), np.array([1.0, 0.0])
    assert ad.scale(ad.square_sum(ad.sub(Tensor(a), Tensor(b))), 0.5).item() == 2.0


def test_cache_miss_names_model_and_sample(toy_models, shapes_small):
    with pytest.raises(CacheMissError) as err:
        loss_fca(toy_models[0], shapes_small[:1], random_prompt(0), CleanFeatureCache())
    assert toy_models[0].model_id in str(err.value) and shapes_small[0].sample_id in str(err.value)


def test_cache_computes_each_entry_once(toy_models, shapes_small):
    c = CleanFeatureCache()
    c.build(toy_models[0], shapes_small[:5])
    c.build(toy_models[0], shapes_small[:8])
    assert c.n_computed == 8 and len(c) == 8


def test_total_composition_example():
    assert combine(1.0, 2.0, 4.0, LossWeights(0.003, 0.0005)) == pytest.approx(1.004, abs=1e-15)


@pytest.mark.parametrize("method", ["VP", "EVP"])
def test_task_only_methods_refuse_auxiliary_weights(toy_models, toy_dual, shapes_small, method):
    with pytest.raises(ConfigurationError):
        loss_total(toy_models, toy_dual, shapes_small[:2], random_prompt(0), W, method)


def test_unknown_method_and_bad_weights():
    with pytest.raises(ConfigurationError):
        LossWeights(-1.0, 0.0)
    with pytest.raises(ConfigurationError):
        LossWeights(0.0, 0.0, tau=0.0)
    with pytest.raises(ConfigurationError):
        compute_losses([], None, [], random_prompt(0), ZERO_WEIGHTS, "XVP")


def test_zero_weights_reduce_to_mean_task_loss(toy_models, toy_dual, shapes_small, cache):
    pr = random_prompt(5)
    batch = shapes_small[:4]
    want = np.mean([loss_llm(m, batch, pr).item() for m in toy_models])
    for method in ("VP", "EVP", "TVP"):
        got = loss_total(toy_models, toy_dual, batch, pr, ZERO_WEIGHTS, method, cache).item()
        assert got == pytest.approx(want, abs=1e-12)


def test_total_increases_with_lambda1(toy_models, toy_dual, shapes_small, cache):
    pr = random_prompt(6)
    lo = loss_total(toy_models, toy_dual, shapes_small[:3], pr, LossWeights(0.003, 0.0005), "TVP", cache).item()
    hi = loss_total(toy_models, toy_dual, shapes_small[:3], pr, LossWeights(0.008, 0.0005), "TVP", cache).item()
    assert hi > lo


def test_higher_semantic_similarity_lowers_the_total(toy_models, shapes_small, cache):
    v = np.linspace(1, 2, 32)
    u = np.zeros(32); u[0] = 1.0
    w = np.zeros(32); w[1] = 1.0
    pr = random_prompt(7)
    aligned = loss_total(toy_models[:1], forced_dual(v, v), shapes_small[:2], pr, W, "TVP", cache).item()
    ortho = loss_total(toy_models[:1], forced_dual(u, w), shapes_small[:2], pr, W, "TVP", cache).item()
    assert aligned < ortho


def _grad(models, dual, batch, pr, weights, method, cache):
    d = Tensor(pr.delta, requires_grad=True)
    with Tape() as t:
        y = loss_total(models, dual, batch, pr, weights, method, cache, delta=d)
    return y.item(), t.gradient(y, [d])[0].data


@pytest.mark.criterion("6")
def test_ensemble_equals_mean_of_members_with_tse_once(toy_models, toy_dual, shapes_small, cache):
    batch = shapes_small[:3]
    no_tse = LossWeights(W.lambda1, 0.0, W.tau)
    for seed in range(3):
        pr = random_prompt(10 + seed)
        ens_val, ens_grad = _grad(toy_models, toy_dual, batch, pr, W, "TVP", cache)
        members = [_grad([m], None, batch, pr, no_tse, "TVP", cache) for m in toy_models]
        d = Tensor(pr.delta, requires_grad=True)
        with Tape() as t:
            tse = loss_tse(toy_dual, batch, pr, W, delta=d)
        tse_grad = t.gradient(tse, [d])[0].data
        want_val = np.mean([v for v, _ in members]) - W.lambda2 * tse.item()
        want_grad = np.mean([g for _, g in members], axis=0) - W.lambda2 * tse_grad
        assert abs(ens_val - want_val) <= 1e-12
        np.testing.assert_allclose(ens_grad, want_grad, rtol=0, atol=1e-12)
        # task-only ensemble is the plain member mean
        ev, eg = _grad(toy_models, None, batch, pr, ZERO_WEIGHTS, "EVP", cache)
        mv = [_grad([m], None, batch, pr, ZERO_WEIGHTS, "EVP", cache) for m in toy_models]
        assert abs(ev - np.mean([v for v, _ in mv])) <= 1e-12
        np.testing.assert_allclose(eg, np.mean([g for _, g in mv], axis=0), rtol=0, atol=1e-12)


@pytest.mark.criterion("1")
@pytest.mark.parametrize("method", ["VP", "EVP", "TVP"])
def test_objective_gradient_matches_finite_differences(toy_models, toy_dual, shapes_small, cache, method):
    weights = W if method == "TVP" else ZERO_WEIGHTS
    rng = np.random.default_rng({"VP": 1, "EVP": 2, "TVP": 3}[method])
    base = init_prompt(64, 64, 8)
    border = np.flatnonzero(base.mask.ravel())
    interior = np.flatnonzero(base.mask.ravel() == 0)
    models = toy_models if method != "VP" else toy_models[:1]
    for k in range(10):
        sample = shapes_small[k:k + 1]
        delta = rng.uniform(-0.3, 0.3, size=base.delta.shape) * base.mask
        coords = np.concatenate([rng.choice(border, 6, replace=False), rng.choice(interior, 1)])
        err = grad_check(lambda d: loss_total(models, toy_dual, sample, base, weights, method, cache, delta=d),
                         delta, coords=coords)
        assert err < 1e-4, f"{method} point {k}: {err:.3e}"
