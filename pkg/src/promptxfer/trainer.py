"""Prompt optimisation: plain (VP), normalised-gradient (EVP) and TVP updates."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import evaluate, stack_images
from .imaging import LabeledSample, interpolation_matrix, make_border_mask
from .losses import (ZERO_WEIGHTS, CleanFeatureCache, ConfigurationError, LossWeights,
                     check_method, compute_losses)
from .models import DualEncoder, SurrogateModel
from .prompt import VisualPrompt, init_prompt
from .tasks import TaskSpec

log = logging.getLogger(__name__)

LAMBDA1_GRID = (0.0005, 0.001, 0.003, 0.005, 0.008)
LAMBDA2_GRID = (0.0001, 0.0005, 0.001)


class SkipStep(Exception):
    """Raised by :func:`normalized_step` when the gradient is exactly zero."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "TVP"
    gamma0: float = 10.0
    epochs: int = 10
    batch_size: int = 16
    weights: LossWeights = LossWeights()
    input_diversity: Optional[bool] = None  # None: on for EVP/TVP
    normalize: Optional[bool] = None        # None: on for EVP/TVP
    model_ids: tuple[str, ...] = ()
    rng_seed: int = 0
    width: int = 8
    init: str = "zeros"
    canvas: int = 64

    def __post_init__(self):
        if self.method not in ("VP", "EVP", "TVP"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        if self.gamma0 <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(f"invalid optimisation settings in {self}")

    @property
    def use_diversity(self) -> bool:
        return self.method != "VP" if self.input_diversity is None else self.input_diversity

    @property
    def use_normalization(self) -> bool:
        return self.method != "VP" if self.normalize is None else self.normalize

    @property
    def effective_weights(self) -> LossWeights:
        return self.weights if self.method == "TVP" else replace(ZERO_WEIGHTS, tau=self.weights.tau)

    def mechanics(self) -> tuple:
        """Everything that determines the optimisation trajectory."""
        w = self.effective_weights
        return (self.gamma0, self.epochs, self.batch_size, w.lambda1, w.lambda2, w.tau,
                self.use_diversity, self.use_normalization, tuple(self.model_ids),
                self.rng_seed, self.width, self.init, self.canvas)


@dataclass
class StepRecord:
    step: int
    lr: float
    total: float
    llm: float
    fca: float
    tse: float
    grad_norm: float
    skipped: bool = False


@dataclass
class TrainHistory:
    records: list[StepRecord] = field(default_factory=list)
    final_checksum: str = ""
    error: Optional[str] = None


REFERENCE_GEOMETRY = (224, 224, 30)


def scaled_gamma(gamma0: float, h: int, w: int, p: int,
                 reference: tuple[int, int, int] = REFERENCE_GEOMETRY) -> float:
    """Step size with the same per-element RMS move as ``gamma0`` on ``reference``.

    A normalised step of length gamma spreads over every border element, so
    matching per-element moves scales gamma by sqrt(n_border / n_reference).
    """
    n = make_border_mask(h, w, p).sum()
    n_ref = make_border_mask(*reference).sum()
    return float(gamma0 * np.sqrt(n / n_ref))


def cosine_lr(gamma0: float, t: int, total_steps: int) -> float:
    """``gamma0 * (1 + cos(pi * t / T)) / 2`` without warmup."""
    if total_steps < 1 or not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return gamma0 * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


def normalized_step(delta: np.ndarray, grad: np.ndarray, gamma_t: float) -> np.ndarray:
    """Move exactly ``gamma_t`` (in L2) against the gradient."""
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm == 0.0:
        raise SkipStep("zero gradient")
    return delta - gamma_t * (grad / norm)


def plain_step(delta: np.ndarray, grad: np.ndarray, gamma_t: float) -> np.ndarray:
    return delta - gamma_t * grad


def input_diversity(x: np.ndarray, rng: np.random.Generator, enabled: bool = True,
                    scale: Optional[float] = None) -> np.ndarray:
    """Random resized crop (area side fraction in [0.8, 1]) back to the input size.

    Works on one ``(3, H, W)`` image or a ``(B, 3, H, W)`` batch; each image
    draws its own crop. ``scale`` pins the side fraction.
    """
    if not enabled:
        return x
    batch = x if x.ndim == 4 else x[None]
    h, w = batch.shape[-2:]
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        s = rng.uniform(0.8, 1.0) if scale is None else scale
        ch, cw = max(1, int(round(s * h))), max(1, int(round(s * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = img[:, top:top + ch, left:left + cw]
        if (ch, cw) == (h, w):
            out[i] = crop
        else:
            out[i] = interpolation_matrix(ch, h) @ crop @ interpolation_matrix(cw, w).T
    return out if x.ndim == 4 else out[0]


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 31337]))


def train_prompt(models: Sequence[SurrogateModel], dual: Optional[DualEncoder],
                 data: Sequence[LabeledSample], cfg: TrainConfig,
                 cache: Optional[CleanFeatureCache] = None,
                 on_step: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None,
                 ) -> tuple[VisualPrompt, TrainHistory]:
    """Optimise a border prompt on ``models`` (loss-averaged when several).

    ``on_step(step, before, after)`` sees the prompt parameters around every update.
    """
    if not data:
        raise ConfigurationError("training data is empty")
    if not all(m.frozen for m in models):
        raise ConfigurationError("prompt training requires frozen models")
    weights = cfg.effective_weights
    check_method(cfg.method, weights)
    if cfg.model_ids and tuple(m.model_id for m in models) != tuple(cfg.model_ids):
        raise ConfigurationError(f"config names models {cfg.model_ids}, got "
                                 f"{tuple(m.model_id for m in models)}")
    if cfg.method == "TVP" and weights.lambda1 > 0:
        cache = cache if cache is not None else CleanFeatureCache()
        for m in models:
            cache.build(m, data)

    prompt = init_prompt(cfg.canvas, cfg.canvas, cfg.width, cfg.init, cfg.rng_seed)
    prompt = replace(prompt, metadata={**prompt.metadata, "method": cfg.method,
                                       "sources": [m.model_id for m in models]})
    mask = prompt.mask
    images = stack_images(data)
    n = len(data)
    per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    div_rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 8128]))
    hist = TrainHistory()
    delta = prompt.delta.copy()
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_rng(cfg.rng_seed, epoch).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = [data[j] for j in idx]
            x = input_diversity(images[idx], div_rng, cfg.use_diversity)
            lr = cosine_lr(cfg.gamma0, step, total_steps)
            d = ad.Tensor(delta, requires_grad=True)
            with ad.Tape() as tape:
                parts = compute_losses(models, dual, batch, prompt, weights, cfg.method,
                                       cache, delta=d, images=x)
            total = parts.total.item()
            if not math.isfinite(total):
                hist.error = f"non-finite loss at step {step}"
                log.warning("%s; returning last finite prompt", hist.error)
                break
            grad = tape.gradient(parts.total, [d])[0].data * mask
            gnorm = float(np.sqrt(np.sum(grad * grad)))
            skipped = False
            if cfg.use_normalization:
                try:
                    new = normalized_step(delta, grad, lr)
                except SkipStep:
                    new, skipped = delta, True
            else:
                new = plain_step(delta, grad, lr)
            if not np.isfinite(new).all():
                hist.error = f"non-finite prompt at step {step}"
                log.warning("%s; returning last finite prompt", hist.error)
                break
            new = new * mask
            if on_step is not None:
                on_step(step, delta, new)
            delta = new
            hist.records.append(StepRecord(step, lr, total, parts.llm, parts.fca, parts.tse, gnorm, skipped))
            step += 1
        else:
            continue
        break
    prompt = prompt.with_delta(delta, steps=step)
    hist.final_checksum = prompt.checksum()
    return prompt, hist


@dataclass
class GridSearchResult:
    best: LossWeights
    table: dict[tuple[float, float], float]
    prompts: dict[tuple[float, float], VisualPrompt] = field(default_factory=dict, repr=False)

    @property
    def runs(self) -> int:
        return len(self.table)


def grid_search(models: Sequence[SurrogateModel], dual: Optional[DualEncoder],
                train: Sequence[LabeledSample], val: Sequence[LabeledSample], task: TaskSpec,
                base: TrainConfig, grid1: Sequence[float] = LAMBDA1_GRID,
                grid2: Sequence[float] = LAMBDA2_GRID,
                cache: Optional[CleanFeatureCache] = None) -> GridSearchResult:
    """Pick (lambda1, lambda2) by the first (training) model's validation metric.

    Ties go to the lexicographically smaller pair. Singleton grids skip training.
    """
    train_ids = {s.sample_id for s in train}
    if any(s.sample_id in train_ids for s in val):
        raise ConfigurationError("validation split overlaps the training split")
    if len(grid1) == 1 and len(grid2) == 1:
        w = replace(base.weights, lambda1=grid1[0], lambda2=grid2[0])
        return GridSearchResult(w, {})
    cache = cache if cache is not None else CleanFeatureCache()
    table, prompts = {}, {}
    for l1, l2 in itertools.product(sorted(grid1), sorted(grid2)):
        cfg = replace(base, method="TVP", weights=replace(base.weights, lambda1=l1, lambda2=l2))
        pr, _ = train_prompt(models, dual, train, cfg, cache)
        table[(l1, l2)] = evaluate(models[0], val, pr, task)
        prompts[(l1, l2)] = pr
    best = max(table.items(), key=lambda kv: (kv[1], [-v for v in kv[0]]))[0]
    return GridSearchResult(replace(base.weights, lambda1=best[0], lambda2=best[1]), table, prompts)
