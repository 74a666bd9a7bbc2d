"""Supervised pre-training that gives surrogates partial zero-shot competence."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import evaluate, stack_images
from .imaging import LabeledSample, interpolation_matrix
from .models import DualEncoder, SurrogateModel, get_arch
from .tasks import TaskSpec

log = logging.getLogger(__name__)


class TrainingFailure(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr: float = 3e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            # parameters are immutable tensors; swap in a fresh one
            self.params[k] = ad.Tensor(self.params[k].data - upd, requires_grad=True, name=k)


def _grads(params: dict[str, ad.Tensor], loss_fn) -> tuple[float, dict[str, np.ndarray]]:
    names = list(params)
    with ad.Tape() as tape:
        loss = loss_fn()
    gs = tape.gradient(loss, [params[k] for k in names])
    return loss.item(), {k: g.data for k, g in zip(names, gs)}


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1.5e-3
    eval_every: int = 50
    band: tuple[float, float] = (0.60, 0.90)
    margin: float = 0.05  # other tasks must beat chance by this much
    letterbox_prob: float = 1.0
    letterbox_max: int = 12
    subsample_seed: int | None = None
    subsample_frac: float = 1.0


def pretrain_surrogate(arch_variant: str, tasks: TaskSpec | Sequence[TaskSpec],
                       train_data: dict[str, list[LabeledSample]], seed: int,
                       epochs: int | None = None, val_data: dict[str, list[LabeledSample]] | None = None,
                       cfg: PretrainConfig | None = None, canvas: int = 64) -> SurrogateModel:
    """Train a surrogate on raw images of all ``tasks`` and freeze it.

    Training stops early once the first accuracy-ranked task's validation
    accuracy enters ``cfg.band`` while every other task beats chance by
    ``cfg.margin``, which
    leaves headroom for prompts. Raises :class:`TrainingFailure` if the
    first task never exceeds chance.
    """
    cfg = cfg or PretrainConfig()
    epochs = cfg.epochs if epochs is None else epochs
    tasks = [tasks] if isinstance(tasks, TaskSpec) else list(tasks)
    for t in tasks:
        if any(s.sample_id.split("/")[1] != "train" for s in train_data[t.name]):
            raise ValueError("pretraining data must come from the train split")
    model = SurrogateModel.initialize(get_arch(arch_variant, canvas), seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))

    pool: list[LabeledSample] = [s for t in tasks for s in train_data[t.name]]
    if cfg.subsample_frac < 1.0:
        srng = np.random.default_rng(cfg.subsample_seed if cfg.subsample_seed is not None else seed)
        keep = np.sort(srng.permutation(len(pool))[: int(round(cfg.subsample_frac * len(pool)))])
        pool = [pool[i] for i in keep]
    images = stack_images(pool)

    monitor = tasks[0]
    chance = {t.name: _chance(t) for t in tasks}
    opt = Adam(model.params, lr=cfg.lr)
    step = 0
    best = 0.0
    for epoch in range(epochs):
        order = rng.permutation(len(pool))
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            batch = [pool[j] for j in idx]
            x = letterbox(images[idx], rng, cfg.letterbox_prob, cfg.letterbox_max)

            def loss_fn():
                feats = model.vision_encode(x)
                lp = model.target_logprob(feats, [s.prompt_text for s in batch],
                                          [s.target_text for s in batch])
                return ad.scale(ad.sum_(lp), -1.0 / len(batch))

            loss, grads = _grads(model.params, loss_fn)
            opt.step(grads)
            step += 1
            if val_data is not None and step % cfg.eval_every == 0:
                accs = {t.name: evaluate(model, val_data[t.name], None, t) for t in tasks}
                best = max(best, accs[monitor.name])
                log.info("%s step %d loss %.4f val %s", model.model_id, step, loss, accs)
                in_band = cfg.band[0] <= accs[monitor.name] <= cfg.band[1]
                others_ok = all(accs[t.name] > chance[t.name] + cfg.margin for t in tasks[1:])
                if in_band and others_ok:
                    return model.freeze()
    if val_data is not None:
        acc = evaluate(model, val_data[monitor.name], None, monitor)
        if max(best, acc) <= chance[monitor.name]:
            raise TrainingFailure(f"{model.model_id}: validation accuracy {acc:.3f} never exceeded "
                                  f"chance {chance[monitor.name]:.3f} after {step} steps")
    return model.freeze()


def letterbox(x: np.ndarray, rng: np.random.Generator, prob: float, max_pad: int) -> np.ndarray:
    """Shrink a random subset of images into a zero border of width 0..max_pad.

    Surrogates see this during pretraining so that the prompting transform
    (resize into the interior, border outside) is in-distribution.
    """
    if prob <= 0 or max_pad < 1:
        return x
    out = x.copy()
    h, w = x.shape[-2:]
    for i in range(len(x)):
        if rng.random() >= prob:
            continue
        p = int(rng.integers(0, max_pad + 1))
        if p == 0:
            continue
        inner = interpolation_matrix(h, h - 2 * p) @ x[i] @ interpolation_matrix(w, w - 2 * p).T
        out[i] = np.pad(inner, ((0, 0), (p, p), (p, p)))
    return out


def _chance(task: TaskSpec) -> float:
    if task.metric == "auc":
        return 0.5
    return 1.0 / task.n_classes


def pretrain_dual_encoder(tasks: Sequence[TaskSpec], train_data: dict[str, list[LabeledSample]],
                          seed: int, epochs: int = 8, batch_size: int = 48, lr: float = 5e-3,
                          canvas: int = 64) -> DualEncoder:
    """Symmetric contrastive training on (image, description) pairs.

    Samples sharing a description are treated as joint positives, so
    duplicate captions in a batch are not pushed apart.
    """
    enc = DualEncoder.initialize(seed, canvas=canvas)
    pool = [s for t in tasks for s in train_data[t.name]]
    images = stack_images(pool)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5151]))
    opt = Adam(enc.params, lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(pool))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            texts = [tuple(pool[j].description_text) for j in idx]
            uniq = sorted(set(texts))
            col = np.array([uniq.index(t) for t in texts])

            def loss_fn():
                zi = enc.encode_image(images[idx])
                zt = enc.encode_text([list(t) for t in uniq])
                zi = _normalize_rows(zi)
                zt = _normalize_rows(zt)
                logits = ad.scale(ad.matmul(zi, ad.transpose(zt, (1, 0))), enc.temperature)
                i2t = ad.mean(ad.token_nll(logits, col))
                # text -> image: soft target spread over all images with that caption
                lsm = ad.log_softmax(ad.transpose(logits, (1, 0)))
                tgt = np.zeros((len(uniq), len(idx)))
                tgt[col, np.arange(len(idx))] = 1.0
                tgt /= tgt.sum(axis=1, keepdims=True)
                t2i = ad.scale(ad.sum_(ad.mul(lsm, ad.Tensor._wrap(tgt))), -1.0 / len(uniq))
                return ad.scale(ad.add(i2t, t2i), 0.5)

            _, grads = _grads(enc.params, loss_fn)
            opt.step(grads)
    return enc.freeze()


def _normalize_rows(z: ad.Tensor) -> ad.Tensor:
    """Scale each row of a (B, d) Tensor to unit L2 norm."""
    sq = ad.reshape(ad.sum_(ad.mul(z, z), axis=1), (-1, 1))
    inv = ad.exp(ad.scale(ad.log(sq), -0.5))
    return ad.mul(z, ad.linear(inv, ad.Tensor._wrap(np.ones((1, z.shape[1])))))


def matched_triplet_rate(enc: DualEncoder, samples: Sequence[LabeledSample], n_triplets: int = 500,
                         seed: int = 0) -> tuple[float, float]:
    """Fraction of (image, own caption, other caption) triplets ranked correctly, and mean margin."""
    rng = np.random.default_rng(seed)
    zi = enc.encode_image(stack_images(samples)).data
    zt = enc.encode_text([s.description_text for s in samples]).data
    zi = zi / np.linalg.norm(zi, axis=1, keepdims=True)
    zt = zt / np.linalg.norm(zt, axis=1, keepdims=True)
    wins, margins = 0, []
    done = 0
    while done < n_triplets:
        a, b = rng.integers(len(samples), size=2)
        if samples[a].description_text == samples[b].description_text:
            continue
        m = float(zi[a] @ zt[a] - zi[a] @ zt[b])
        margins.append(m)
        wins += m > 0
        done += 1
    return wins / n_triplets, float(np.mean(margins))
