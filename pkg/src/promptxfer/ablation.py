"""Ablation harness: loss-term toggles, prompt width, data scale, cross-dataset and corruption arms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .evaluation import TransferReport, stack_images, transfer_matrix
from .imaging import corrupt
from .losses import LossWeights
from .prompt import VisualPrompt
from .reference import Suite
from .trainer import train_prompt

log = logging.getLogger(__name__)

SUITES = ("fca-tse", "width", "data-scale", "cross-dataset", "corruption")


@dataclass
class Arm:
    label: str
    report: TransferReport
    prompts: dict[str, VisualPrompt] = field(default_factory=dict, repr=False)


@dataclass
class AblationResult:
    suite: str
    arms: list[Arm]

    def arm(self, label: str) -> Arm:
        for a in self.arms:
            if a.label == label:
                return a
        raise KeyError(label)

    def avg_deltas(self, method: Optional[str] = None) -> dict[str, float]:
        """Arm label -> Avg.Delta of its first row (or of the ``method`` row)."""
        return {a.label: (a.report.row(method) if method else a.report.rows[0]).avg_delta for a in self.arms}


def arm_count(suite: str, suite_obj: Suite) -> int:
    cfg = suite_obj.config
    counts = {
        "fca-tse": 4,
        "width": len(cfg.int_list("widths")),
        "data-scale": len(cfg.int_list("fractions")),
        "cross-dataset": 4,
        "corruption": len(cfg.corruptions.split(",")) * len(cfg.int_list("severities")),
    }
    if suite not in counts:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    return counts[suite]


def subsample(data: list, fraction_pct: int, seed: int) -> list:
    """Seeded subset keeping original order; 100% returns ``data`` unchanged."""
    if not 0 < fraction_pct <= 100:
        raise ValueError(f"fraction {fraction_pct}% outside (0, 100]")
    if fraction_pct == 100:
        return list(data)
    k = max(1, int(round(len(data) * fraction_pct / 100)))
    rng = np.random.default_rng(np.random.SeedSequence([seed, fraction_pct, 6271]))
    keep = np.sort(rng.permutation(len(data))[:k])
    return [data[i] for i in keep]


def _report(s: Suite, prompts: dict[str, VisualPrompt], task: str, images=None, samples=None) -> TransferReport:
    samples = s.data(task, "test") if samples is None else samples
    keyed = {(label, s.config.source): pr for label, pr in prompts.items()}
    rep = transfer_matrix(keyed, s.models, samples, s.task(task), avg_models=s.held_out, images=images)
    rep.metadata = {"config_hash": s.config.hash().hex(), "seed": s.config.seed}
    return rep


def _train(s: Suite, method: str, task: str, data=None, **overrides) -> VisualPrompt:
    data = s.data(task, "train") if data is None else data
    pr, hist = train_prompt(s.sources, s.dual, data, s.config.train_config(method, **overrides), s.cache)
    if hist.error:
        log.warning("%s run stopped early: %s", method, hist.error)
    return pr


def fca_tse_suite(s: Suite) -> AblationResult:
    """The four {FCA, TSE} on/off arms under TVP mechanics; FCA-/TSE- is EVP."""
    w = s.config.weights()
    arms = []
    for fca in (False, True):
        for tse in (False, True):
            label = f"FCA{'+' if fca else '-'}/TSE{'+' if tse else '-'}"
            weights = LossWeights(w.lambda1 if fca else 0.0, w.lambda2 if tse else 0.0, w.tau)
            pr = _train(s, "TVP", s.config.task, weights=weights)
            arms.append(Arm(label, _report(s, {label: pr}, s.config.task), {label: pr}))
    return AblationResult("fca-tse", arms)


def width_suite(s: Suite) -> AblationResult:
    arms = []
    method = s.config.method.upper()
    for p in s.config.int_list("widths"):
        pr = _train(s, method, s.config.task, width=p)
        label = f"p={p}"
        arms.append(Arm(label, _report(s, {method: pr}, s.config.task), {method: pr}))
    return AblationResult("width", arms)


def data_scale_suite(s: Suite) -> AblationResult:
    arms = []
    method = s.config.method.upper()
    full = s.data(s.config.task, "train")
    for pct in s.config.int_list("fractions"):
        pr = _train(s, method, s.config.task, data=subsample(full, pct, s.config.seed))
        arms.append(Arm(f"{pct}%", _report(s, {method: pr}, s.config.task), {method: pr}))
    return AblationResult("data-scale", arms)


def cross_dataset_suite(s: Suite) -> AblationResult:
    """Train on each of the two recognition variants and evaluate on both."""
    method = s.config.method.upper()
    pair = (s.config.task, s.config.cross_task)
    prompts = {t: _train(s, method, t) for t in pair}
    arms = []
    for tr in pair:
        for ev in pair:
            arms.append(Arm(f"{tr}->{ev}", _report(s, {method: prompts[tr]}, ev), {method: prompts[tr]}))
    return AblationResult("cross-dataset", arms)


def corruption_suite(s: Suite) -> AblationResult:
    """EVP and TVP prompts evaluated on corrupted test images."""
    task = s.config.task
    prompts = {m: _train(s, m, task) for m in ("EVP", "TVP")}
    test = s.data(task, "test")
    clean = stack_images(test)
    arms = []
    for kind in s.config.corruptions.split(","):
        for sev in s.config.int_list("severities"):
            imgs = np.stack([corrupt(x, kind, sev, rng_seed=s.config.seed + i) for i, x in enumerate(clean)])
            arms.append(Arm(f"{kind}@{sev}", _report(s, prompts, task, images=imgs, samples=test), prompts))
    return AblationResult("corruption", arms)


_RUNNERS = {
    "fca-tse": fca_tse_suite,
    "width": width_suite,
    "data-scale": data_scale_suite,
    "cross-dataset": cross_dataset_suite,
    "corruption": corruption_suite,
}


def run_ablation_suite(suite: str, s: Suite) -> AblationResult:
    if suite not in _RUNNERS:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    res = _RUNNERS[suite](s)
    assert len(res.arms) == arm_count(suite, s)
    return res


def interior_maximum(values: dict[str, float]) -> bool:
    """True when some non-extreme entry beats both the first and the last entry."""
    v = list(values.values())
    return len(v) >= 3 and max(v[1:-1]) > max(v[0], v[-1])
