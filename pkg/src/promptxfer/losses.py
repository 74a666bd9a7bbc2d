"""Task, feature-consistency and task-semantics losses for prompt training."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import stack_images
from .imaging import LabeledSample
from .models import DualEncoder, SurrogateModel
from .prompt import VisualPrompt, apply_prompt

METHODS = ("VP", "EVP", "TVP")


class ConfigurationError(ValueError):
    pass


class CacheMissError(KeyError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.003   # feature consistency
    lambda2: float = 0.0005  # task semantics
    tau: float = 2.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError(f"loss weights must be nonnegative: {self}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")


ZERO_WEIGHTS = LossWeights(0.0, 0.0)


class CleanFeatureCache:
    """Vision features of unprompted original images, computed once per (model, sample)."""

    def __init__(self):
        self._store: dict[tuple[str, str], np.ndarray] = {}
        self.n_computed = 0

    def __contains__(self, key) -> bool:
        return key in self._store

    def __len__(self) -> int:
        return len(self._store)

    def build(self, model: SurrogateModel, samples: Sequence[LabeledSample], batch_size: int = 64) -> None:
        todo = [s for s in samples if (model.model_id, s.sample_id) not in self._store]
        for i in range(0, len(todo), batch_size):
            chunk = todo[i:i + batch_size]
            feats = model.vision_encode(stack_images(chunk)).data
            for s, f in zip(chunk, feats):
                f = f.copy()
                f.setflags(write=False)
                self._store[(model.model_id, s.sample_id)] = f
            self.n_computed += len(chunk)

    def get(self, model_id: str, sample_id: str) -> np.ndarray:
        try:
            return self._store[(model_id, sample_id)]
        except KeyError:
            raise CacheMissError(f"no clean features for model {model_id!r}, sample {sample_id!r}") from None

    def batch(self, model_id: str, samples: Sequence[LabeledSample]) -> np.ndarray:
        return np.stack([self.get(model_id, s.sample_id) for s in samples])


def _prompted(batch, prompt, delta, images) -> ad.Tensor:
    if not batch:
        raise ConfigurationError("empty batch")
    imgs = stack_images(batch) if images is None else images
    return apply_prompt(imgs, prompt, delta)


def _llm_from_feats(m: SurrogateModel, feats: ad.Tensor, batch) -> ad.Tensor:
    lp = m.target_logprob(feats, [s.prompt_text for s in batch], [s.target_text for s in batch])
    return ad.scale(ad.sum_(lp), -1.0 / len(batch))


def _fca_from_feats(m: SurrogateModel, feats: ad.Tensor, batch, cache: CleanFeatureCache) -> ad.Tensor:
    clean = ad.Tensor._wrap(cache.batch(m.model_id, batch))
    return ad.scale(ad.square_sum(ad.sub(feats, clean)), 0.5 / len(batch))


def _tse_from_inputs(e: DualEncoder, x: ad.Tensor, batch, tau: float) -> ad.Tensor:
    if any(not s.description_text for s in batch):
        raise ConfigurationError("every sample needs a description for the semantics loss")
    zi = e.encode_image(x)
    zt = ad.Tensor._wrap(e.encode_text([s.description_text for s in batch]).data)
    sim = ad.cosine_similarity(zi, zt)
    return ad.mean(ad.exp(ad.scale(sim, tau)))


def loss_llm(m: SurrogateModel, batch: Sequence[LabeledSample], prompt: VisualPrompt,
             delta: Optional[ad.Tensor] = None, images: Optional[np.ndarray] = None) -> ad.Tensor:
    """Mean over the batch of the target negative log-likelihood on prompted images."""
    x = _prompted(batch, prompt, delta, images)
    return _llm_from_feats(m, m.vision_encode(x), batch)


def loss_fca(m: SurrogateModel, batch: Sequence[LabeledSample], prompt: VisualPrompt,
             cache: CleanFeatureCache, delta: Optional[ad.Tensor] = None,
             images: Optional[np.ndarray] = None) -> ad.Tensor:
    """Batch mean of ``0.5 * ||f(prompted) - f(original)||^2`` over the full feature map."""
    for s in batch:
        cache.get(m.model_id, s.sample_id)
    x = _prompted(batch, prompt, delta, images)
    return _fca_from_feats(m, m.vision_encode(x), batch, cache)


def loss_tse(e: DualEncoder, batch: Sequence[LabeledSample], prompt: VisualPrompt,
             weights: LossWeights = LossWeights(), delta: Optional[ad.Tensor] = None,
             images: Optional[np.ndarray] = None) -> ad.Tensor:
    """Batch mean of ``exp(tau * cos(g_image(prompted), g_text(description)))``."""
    return _tse_from_inputs(e, _prompted(batch, prompt, delta, images), batch, weights.tau)


@dataclass
class LossBreakdown:
    total: ad.Tensor
    llm: float
    fca: float
    tse: float
    per_model: dict[str, float]


def check_method(method: str, weights: LossWeights) -> None:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
    if method in ("VP", "EVP") and (weights.lambda1 or weights.lambda2):
        raise ConfigurationError(f"{method} trains on the task loss only; got {weights}")


def compute_losses(models: Sequence[SurrogateModel], e: Optional[DualEncoder], batch: Sequence[LabeledSample],
                   prompt: VisualPrompt, weights: LossWeights, method: str,
                   cache: Optional[CleanFeatureCache] = None, delta: Optional[ad.Tensor] = None,
                   images: Optional[np.ndarray] = None) -> LossBreakdown:
    """Ensemble objective: mean over models of (task + lambda1 * FCA) minus lambda2 * TSE once."""
    check_method(method, weights)
    if not models:
        raise ConfigurationError("need at least one model")
    x = _prompted(batch, prompt, delta, images)
    use_fca = method == "TVP" and weights.lambda1 > 0
    use_tse = method == "TVP" and weights.lambda2 > 0
    if use_fca and cache is None:
        raise ConfigurationError("feature consistency needs a CleanFeatureCache")
    if use_tse and e is None:
        raise ConfigurationError("task semantics needs a dual encoder")
    terms, llms, fcas, per = [], [], [], {}
    for m in models:
        feats = m.vision_encode(x)
        llm = _llm_from_feats(m, feats, batch)
        term = llm
        llms.append(llm.item())
        if use_fca:
            fca = _fca_from_feats(m, feats, batch, cache)
            fcas.append(fca.item())
            term = ad.add(llm, ad.scale(fca, weights.lambda1))
        per[m.model_id] = term.item()
        terms.append(term)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    total = ad.scale(total, 1.0 / len(terms))
    tse_val = 0.0
    if use_tse:
        tse = _tse_from_inputs(e, x, batch, weights.tau)
        tse_val = tse.item()
        total = ad.sub(total, ad.scale(tse, weights.lambda2))
    return LossBreakdown(total, float(np.mean(llms)), float(np.mean(fcas)) if fcas else 0.0, tse_val, per)


def loss_total(models: Sequence[SurrogateModel], e: Optional[DualEncoder], batch: Sequence[LabeledSample],
               prompt: VisualPrompt, weights: LossWeights, method: str,
               cache: Optional[CleanFeatureCache] = None, delta: Optional[ad.Tensor] = None,
               images: Optional[np.ndarray] = None) -> ad.Tensor:
    return compute_losses(models, e, batch, prompt, weights, method, cache, delta, images).total


def combine(llm: float, fca: float, tse: float, weights: LossWeights) -> float:
    """Scalar composition of precomputed components."""
    return llm + weights.lambda1 * fca - weights.lambda2 * tse
