"""Experiment suites: datasets, a pretrained model zoo and the dual encoder from one RunConfig."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .evaluation import (TransferReport, centroid_separability, feature_drift, prompted_text_cosine,
                         transfer_matrix)
from .imaging import LabeledSample, generate_dataset
from .losses import CleanFeatureCache
from .models import DualEncoder, SurrogateModel
from .prompt import VisualPrompt
from .persistence import RunConfig, load_zoo, save_zoo
from .pretrain import PretrainConfig, pretrain_dual_encoder, pretrain_surrogate
from .tasks import TaskSpec, get_task
from .trainer import scaled_gamma, train_prompt

log = logging.getLogger(__name__)

# gamma0 = 10 carried over to the 64x64, p=8 canvas at equal per-element step
REFERENCE_CONFIG = RunConfig(experiment="reference", gamma0=round(scaled_gamma(10.0, 64, 64, 8), 4))
N_PRETRAIN_VAL = 200


def pretrain_data(cfg: RunConfig, split: str = "train") -> dict[str, list[LabeledSample]]:
    n = cfg.n_pretrain if split == "train" else N_PRETRAIN_VAL
    canvas = (cfg.canvas, cfg.canvas)
    return {t: generate_dataset(get_task(t), n, cfg.seed, split, canvas)
            for t in cfg.pretrain_tasks.split(",")}


def prompt_data(cfg: RunConfig, task: str, split: str, n: Optional[int] = None) -> list[LabeledSample]:
    """Prompt-training and evaluation data; a separate stream from pretraining data."""
    if n is None:
        n = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}[split]
    return generate_dataset(get_task(task), n, cfg.seed + 1, split, (cfg.canvas, cfg.canvas))


def build_zoo(cfg: RunConfig) -> tuple[list[SurrogateModel], DualEncoder]:
    tasks = [get_task(t) for t in cfg.pretrain_tasks.split(",")]
    tr, va = pretrain_data(cfg, "train"), pretrain_data(cfg, "val")
    pcfg = PretrainConfig(epochs=cfg.pretrain_epochs)
    models = []
    for variant, seed in cfg.zoo_spec():
        m = pretrain_surrogate(variant, tasks, tr, seed, val_data=va, cfg=pcfg, canvas=cfg.canvas)
        log.info("pretrained %s", m.model_id)
        models.append(m)
    dual = pretrain_dual_encoder(tasks, tr, cfg.seed, canvas=cfg.canvas)
    return models, dual


@dataclass
class Suite:
    config: RunConfig
    models: list[SurrogateModel]
    dual: DualEncoder
    cache: CleanFeatureCache = field(default_factory=CleanFeatureCache)
    _data: dict = field(default_factory=dict, repr=False)

    def model(self, model_id: str) -> SurrogateModel:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(f"model {model_id!r} not in zoo {[m.model_id for m in self.models]}")

    @property
    def sources(self) -> list[SurrogateModel]:
        return [self.model(mid) for mid in self.config.sources]

    @property
    def held_out(self) -> list[str]:
        return [m.model_id for m in self.models if m.model_id not in self.config.sources]

    def data(self, task: str, split: str) -> list[LabeledSample]:
        key = (task, split)
        if key not in self._data:
            self._data[key] = prompt_data(self.config, task, split)
        return self._data[key]

    def task(self, name: Optional[str] = None) -> TaskSpec:
        return get_task(name or self.config.task)


def build_suite(cfg: RunConfig = REFERENCE_CONFIG, zoo_dir=None) -> Suite:
    """Load the zoo from ``zoo_dir`` when it holds one, otherwise pretrain (and save there)."""
    if zoo_dir is not None and (Path(zoo_dir) / "zoo.txt").is_file():
        models, dual = load_zoo(zoo_dir)
        want = cfg.model_ids
        if [m.model_id for m in models] != want or dual is None:
            raise ValueError(f"zoo at {zoo_dir} holds {[m.model_id for m in models]}, config wants {want}")
    else:
        models, dual = build_zoo(cfg)
        if zoo_dir is not None:
            save_zoo(models, dual, zoo_dir, cfg.hash())
    return Suite(cfg, models, dual)


# --------------------------------------------------------------------------
# pinned reference outcomes
# --------------------------------------------------------------------------

REFERENCE_TASKS = ("shapes", "counting", "presence")
NO_TSE = "TVP-noTSE"


@dataclass
class TaskOutcome:
    task: str
    report: TransferReport
    prompts: dict[str, VisualPrompt]
    drift: dict[str, dict[str, float]]          # method -> model id -> mean drift
    cosine: dict[str, float]                    # TVP with / without the semantics term
    separability: dict[tuple[str, str], tuple[float, float]] = field(default_factory=dict)

    def source_gain(self, method: str, source: str) -> float:
        return self.report.row(method).metrics[source] - self.report.zero_shot[source]

    def drops(self) -> list[tuple[str, str]]:
        """(method, model) pairs whose prompted metric fell below zero-shot."""
        return [(r.method, mid) for r in self.report.rows for mid in self.report.models
                if r.metrics[mid] < self.report.zero_shot[mid]]


def task_outcome(s: Suite, task_name: str) -> TaskOutcome:
    """VP, EVP and TVP from the source model(s), plus a TVP run without the semantics term."""
    cfg = s.config
    task = s.task(task_name)
    train, test = s.data(task_name, "train"), s.data(task_name, "test")
    prompts = {}
    for method in ("VP", "EVP", "TVP"):
        prompts[method], _ = train_prompt(s.sources, s.dual, train, cfg.train_config(method), s.cache)
    no_tse = replace(cfg.weights(), lambda2=0.0)
    prompts[NO_TSE], _ = train_prompt(s.sources, s.dual, train, cfg.train_config("TVP", weights=no_tse), s.cache)
    keyed = {(m, cfg.source): prompts[m] for m in ("VP", "EVP", "TVP")}
    rep = transfer_matrix(keyed, s.models, test, task, avg_models=s.held_out)
    rep.metadata = {"config_hash": cfg.hash().hex(), "seed": cfg.seed}
    drift = {m: {mid: feature_drift(s.model(mid), test, prompts[m])[0] for mid in s.held_out}
             for m in ("EVP", "TVP")}
    cosine = {m: prompted_text_cosine(s.dual, test, prompts[m]) for m in ("TVP", NO_TSE)}
    out = TaskOutcome(task_name, rep, prompts, drift, cosine)
    if task.eval_mode == "ranked":
        for method, mid in out.drops():
            m = s.model(mid)
            out.separability[(method, mid)] = (centroid_separability(m, test, prompts[method]),
                                               centroid_separability(m, test, None))
    return out


def reference_outcomes(s: Suite, tasks=REFERENCE_TASKS) -> dict[str, TaskOutcome]:
    return {t: task_outcome(s, t) for t in tasks}
