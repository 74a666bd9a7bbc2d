"""Task protocols, metrics, transfer reports and feature-corruption diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .imaging import LabeledSample
from .models import SurrogateModel
from .prompt import VisualPrompt, apply_prompt
from .tasks import TOKENIZER, TaskSpec


class MetricUndefinedError(ValueError):
    pass


def stack_images(samples: Sequence[LabeledSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def prepare_inputs(images: np.ndarray, prompt: Optional[VisualPrompt]) -> np.ndarray:
    """Raw images for zero-shot, prompted canvases otherwise."""
    if prompt is None:
        return images
    return apply_prompt(images, prompt).data


def candidate_token_lists(task: TaskSpec) -> list[list[int]]:
    return [TOKENIZER.tokenize(c) for c in task.candidates]


def candidate_scores(m: SurrogateModel, x, task: TaskSpec, normalize: bool = False) -> np.ndarray:
    """(B, C) log-likelihoods of every candidate completion after the task prompt."""
    if task.eval_mode != "ranked":
        raise ValueError(f"task {task.name} is not a ranking task")
    feats = m.vision_encode(x)
    if feats.ndim == 2:
        feats = ad.reshape(feats, (1,) + feats.shape)
    b = feats.shape[0]
    prompt = task.prompt_tokens
    cols = [m.target_logprob(feats, [prompt] * b, [c] * b, normalize=normalize).data
            for c in candidate_token_lists(task)]
    return np.stack(cols, axis=1)


def rank_predict(m: SurrogateModel, x, task: TaskSpec) -> int | np.ndarray:
    """Candidate index with maximal log-likelihood (ties resolve to the lowest index)."""
    scores = candidate_scores(m, x, task)
    pred = np.argmax(scores, axis=1)
    return int(pred[0]) if np.ndim(x) == 3 or (isinstance(x, ad.Tensor) and x.ndim == 3) else pred


def contains_answer(response: Sequence, answer: Sequence) -> bool:
    """True iff ``answer`` is a contiguous token subsequence of ``response``.

    Strings are split on whitespace so that ``"thirteen"`` never matches ``"three"``.
    """
    if isinstance(response, str):
        response = response.split()
    if isinstance(answer, str):
        answer = answer.split()
    response, answer = list(response), list(answer)
    if not answer:
        raise ValueError("answer must be non-empty")
    k = len(answer)
    return any(response[i:i + k] == answer for i in range(len(response) - k + 1))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(pos == neg), via average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("auc needs both positive and negative samples")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def predictions(m: SurrogateModel, samples: Sequence[LabeledSample], task: TaskSpec,
                prompt: Optional[VisualPrompt] = None, batch_size: int = 64,
                images: Optional[np.ndarray] = None):
    """Per-sample outputs: candidate scores (ranked) or generated token lists."""
    imgs = stack_images(samples) if images is None else images
    outs = []
    for sl in _batches(len(imgs), batch_size):
        x = prepare_inputs(imgs[sl], prompt)
        if task.eval_mode == "ranked":
            outs.append(candidate_scores(m, x, task))
        else:
            outs.extend(m.generate_greedy(x, task.prompt_tokens, max_len=3))
    return np.concatenate(outs) if task.eval_mode == "ranked" else outs


def score_predictions(task: TaskSpec, samples: Sequence[LabeledSample], preds) -> float:
    if task.eval_mode == "ranked":
        labels = np.array([s.label_index for s in samples])
        if task.metric == "auc":
            # positive class is candidate 0
            return auc(preds[:, 0], (labels == 0).astype(int))
        return float(np.mean(np.argmax(preds, axis=1) == labels))
    hits = [contains_answer(resp, s.target_text[:1]) for resp, s in zip(preds, samples)]
    return float(np.mean(hits))


def evaluate(m: SurrogateModel, samples: Sequence[LabeledSample], prompt: Optional[VisualPrompt] = None,
             task: Optional[TaskSpec] = None, batch_size: int = 64,
             images: Optional[np.ndarray] = None) -> float:
    """Task metric in [0, 1]; ``prompt=None`` is zero-shot inference."""
    if not samples:
        raise ValueError("evaluation split is empty")
    if task is None:
        from .tasks import get_task
        task = get_task(samples[0].sample_id.split("/")[0])
    preds = predictions(m, samples, task, prompt, batch_size, images)
    return score_predictions(task, samples, preds)


# --------------------------------------------------------------------------
# transfer reports
# --------------------------------------------------------------------------

@dataclass
class ReportRow:
    method: str
    source: str
    metrics: dict[str, float]
    avg_delta: float
    is_source: dict[str, bool] = field(default_factory=dict)


@dataclass
class TransferReport:
    dataset: str
    metric: str
    models: list[str]
    zero_shot: dict[str, float]
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    avg_models: Optional[list[str]] = None  # Avg.Delta columns; all models when None

    @property
    def delta_models(self) -> list[str]:
        return list(self.models if self.avg_models is None else self.avg_models)

    def add_row(self, method: str, source: str, metrics: dict[str, float]) -> ReportRow:
        sources = set(source.split(",")) if source else set()
        row = ReportRow(method, source, dict(metrics),
                        avg_delta(metrics, self.zero_shot, self.delta_models),
                        {mid: mid in sources for mid in self.models})
        self.rows.append(row)
        return row

    def row(self, method: str, source: Optional[str] = None) -> ReportRow:
        for r in self.rows:
            if r.method == method and (source is None or r.source == source):
                return r
        raise KeyError((method, source))


def avg_delta(metrics: dict[str, float], zero_shot: dict[str, float],
              models: Optional[Sequence[str]] = None) -> float:
    """Mean over models of (prompted - zero-shot)."""
    models = list(zero_shot) if models is None else list(models)
    return float(np.mean([metrics[m] - zero_shot[m] for m in models]))


def transfer_matrix(prompts: dict[tuple[str, str], VisualPrompt], zoo: Sequence[SurrogateModel],
                    samples: Sequence[LabeledSample], task: TaskSpec,
                    avg_models: Optional[Sequence[str]] = None,
                    images: Optional[np.ndarray] = None) -> TransferReport:
    """Zero-shot row plus one row per ``(method, source)`` prompt, metrics in percent.

    Every zoo model gets a column; ``avg_models`` restricts the Avg.Delta
    average (e.g. to held-out models).
    """
    if len(zoo) < 2:
        raise ValueError("transfer_matrix needs at least two models")
    ids = [m.model_id for m in zoo]
    if avg_models is not None and not set(avg_models) <= set(ids):
        raise ValueError(f"avg_models {list(avg_models)} not all in zoo {ids}")
    by_id = {m.model_id: m for m in zoo}
    zs = {mid: 100.0 * evaluate(by_id[mid], samples, None, task, images=images) for mid in ids}
    rep = TransferReport(task.name, task.metric, ids, zs,
                         avg_models=None if avg_models is None else list(avg_models))
    for (method, source), pr in prompts.items():
        vals = {mid: 100.0 * evaluate(by_id[mid], samples, pr, task, images=images) for mid in ids}
        rep.add_row(method, source, vals)
    return rep


# --------------------------------------------------------------------------
# feature diagnostics
# --------------------------------------------------------------------------

def feature_drift(m: SurrogateModel, samples: Sequence[LabeledSample], prompt: VisualPrompt,
                  batch_size: int = 64) -> tuple[float, float]:
    """Mean and std of per-sample ``||f(T_p(X, delta)) - f(X)||_2`` on model ``m``."""
    imgs = stack_images(samples)
    dists = []
    for sl in _batches(len(imgs), batch_size):
        clean = m.vision_encode(imgs[sl]).data
        prompted = m.vision_encode(prepare_inputs(imgs[sl], prompt)).data
        diff = (prompted - clean).reshape(len(clean), -1)
        dists.append(np.sqrt((diff * diff).sum(axis=1)))
    d = np.concatenate(dists)
    return float(d.mean()), float(d.std())


def prompted_text_cosine(e, samples: Sequence[LabeledSample], prompt: Optional[VisualPrompt] = None,
                         batch_size: int = 64) -> float:
    """Mean cosine between dual-encoder embeddings of (prompted) images and their descriptions."""
    imgs = stack_images(samples)
    zi = np.concatenate([e.encode_image(prepare_inputs(imgs[sl], prompt)).data
                         for sl in _batches(len(imgs), batch_size)])
    zt = e.encode_text([s.description_text for s in samples]).data
    cos = (zi * zt).sum(axis=1) / (np.linalg.norm(zi, axis=1) * np.linalg.norm(zt, axis=1))
    return float(cos.mean())


def pooled_features(m: SurrogateModel, samples: Sequence[LabeledSample],
                    prompt: Optional[VisualPrompt] = None, batch_size: int = 64) -> np.ndarray:
    imgs = stack_images(samples)
    return np.concatenate([m.vision_encode(prepare_inputs(imgs[sl], prompt)).data.mean(axis=1)
                           for sl in _batches(len(imgs), batch_size)])


def loo_centroid_accuracy(feats: np.ndarray, labels: Sequence[int]) -> float:
    """Nearest-centroid accuracy where each sample is left out of its own centroid."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    sums = {c: feats[labels == c].sum(axis=0) for c in classes}
    counts = {c: int((labels == c).sum()) for c in classes}
    correct = 0
    for x, y in zip(feats, labels):
        best, best_d = None, np.inf
        for c in classes:
            n = counts[c] - (c == y)
            if n == 0:
                continue
            cen = (sums[c] - (x if c == y else 0.0)) / n
            d = float(((x - cen) ** 2).sum())
            if d < best_d:
                best, best_d = c, d
        correct += int(best == y)
    return correct / len(labels)


def centroid_separability(m: SurrogateModel, samples: Sequence[LabeledSample],
                          prompt: Optional[VisualPrompt] = None, task: Optional[TaskSpec] = None) -> float:
    """Leave-one-out nearest-class-centroid accuracy of mean-pooled vision features."""
    feats = pooled_features(m, samples, prompt)
    return loo_centroid_accuracy(feats, [s.label_index for s in samples])
