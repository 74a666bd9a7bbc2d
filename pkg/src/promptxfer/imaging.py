"""Differentiable resize, border masks, corruptions and synthetic scenes.

Images are float64 arrays of shape ``(3, H, W)`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .tasks import COLORS, NUMBER_WORDS, SHAPES, TOKENIZER, EOS, TaskSpec

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.85, 0.15, 0.80),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.55, 0.10),
}

SPLITS = ("train", "val", "test")
PIXEL_NOISE = 0.05


# --------------------------------------------------------------------------
# resize and masks
# --------------------------------------------------------------------------

@lru_cache(maxsize=256)
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) matrix for 1-D linear interpolation.

    Half-pixel-centre convention: output sample ``i`` reads the source at
    ``(i + 0.5) * n_in / n_out - 0.5``, clamped to the valid range.
    """
    m = np.zeros((n_out, n_in))
    s = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * s - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[i, i0] += 1.0 - f
        m[i, i1] += f
    m.setflags(write=False)
    return m


def bilinear_resize(img, out_h: int, out_w: int) -> ad.Tensor:
    """Bilinear resize of the last two axes; differentiable w.r.t. the input.

    Accepts ``(..., H, W)`` arrays or Tensors. The output is not clamped.
    """
    if out_h < 1 or out_w < 1:
        raise ad.ShapeError(f"bilinear_resize: target size {out_h}x{out_w} must be positive")
    x = ad.as_tensor(img)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    nd = x.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    rx = ad.Tensor._wrap(interpolation_matrix(w, out_w).T)
    ry = ad.Tensor._wrap(interpolation_matrix(h, out_h).T)
    y = ad.linear(x, rx)                  # (..., H, W')
    y = ad.linear(ad.transpose(y, swap), ry)   # (..., W', H')
    return ad.transpose(y, swap)


def make_border_mask(h: int, w: int, p: int) -> np.ndarray:
    """(3, h, w) indicator of the frame of width ``p``."""
    if p < 0 or 2 * p > min(h, w):
        raise ad.ShapeError(f"border width {p} does not fit a {h}x{w} canvas")
    m = np.ones((h, w))
    m[p:h - p, p:w - p] = 0.0
    return np.repeat(m[None], 3, axis=0)


# --------------------------------------------------------------------------
# corruptions
# --------------------------------------------------------------------------

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "gaussian_blur", "brightness", "contrast")

# index = severity; level 0 is the identity
SEVERITY_TABLE = {
    "gaussian_noise": (0.0, 0.04, 0.08, 0.12, 0.18, 0.26),   # noise std
    "impulse_noise": (0.0, 0.01, 0.03, 0.05, 0.09, 0.17),    # corrupted fraction
    "gaussian_blur": (0.0, 0.5, 0.75, 1.0, 1.5, 2.0),        # kernel std (pixels)
    "brightness": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),            # additive shift
    "contrast": (1.0, 0.75, 0.5, 0.4, 0.3, 0.2),             # gain about the mean
}


def _corrupt_level(img: np.ndarray, kind: str, level: int, rng: np.random.Generator) -> np.ndarray:
    if kind not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    x = np.array(img, dtype=np.float64)
    c = SEVERITY_TABLE[kind][level]
    if level == 0:
        return x
    if kind == "gaussian_noise":
        x = x + rng.normal(0.0, c, size=x.shape)
    elif kind == "impulse_noise":
        hit = rng.random(x.shape) < c
        x = np.where(hit, rng.integers(0, 2, size=x.shape).astype(float), x)
    elif kind == "gaussian_blur":
        x = np.stack([gaussian_filter(ch, sigma=c, mode="reflect") for ch in x])
    elif kind == "brightness":
        x = x + c
    elif kind == "contrast":
        mu = x.mean(axis=(1, 2), keepdims=True)
        x = (x - mu) * c + mu
    return np.clip(x, 0.0, 1.0)


def corrupt(img: np.ndarray, kind: str, severity: int, rng_seed: int = 0) -> np.ndarray:
    """Apply one of :data:`CORRUPTIONS` at severity 1..5, clamped to [0, 1]."""
    if kind not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return _corrupt_level(img, kind, severity, np.random.default_rng(rng_seed))


# --------------------------------------------------------------------------
# synthetic scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    center: tuple[float, float]  # (row, col)
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background: tuple[float, float, float]
    canvas: tuple[int, int]

    def validate(self) -> None:
        h, w = self.canvas
        if not 1 <= len(self.objects) <= 5:
            raise ValueError("a scene holds 1-5 objects")
        for o in self.objects:
            r, c = o.center
            if r - o.radius < 0 or c - o.radius < 0 or r + o.radius > h or c + o.radius > w:
                raise ValueError(f"object {o} leaves the canvas")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                if np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) < a.radius + b.radius:
                    raise ValueError("objects overlap")


@dataclass
class LabeledSample:
    image: np.ndarray
    prompt_text: list[int]
    target_text: list[int]
    description_text: list[int]
    label_index: int
    scene: SceneSpec
    sample_id: str


def _shape_mask(shape: str, rr: np.ndarray, cc: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return rr ** 2 + cc ** 2 <= r ** 2
    if shape == "square":
        s = 0.8 * r
        return (np.abs(rr) <= s) & (np.abs(cc) <= s)
    if shape == "triangle":
        # upward triangle inscribed in the circle of radius r
        top, base = -r, 0.5 * r
        half = (rr - top) / (base - top) * (r * np.sqrt(3) / 2)
        return (rr >= top) & (rr <= base) & (np.abs(cc) <= half)
    if shape == "cross":
        t = r / 3.0
        return ((np.abs(rr) <= t) & (np.abs(cc) <= r)) | ((np.abs(cc) <= t) & (np.abs(rr) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(scene: SceneSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterise a scene at pixel centres; optional additive pixel noise."""
    h, w = scene.canvas
    img = np.empty((3, h, w))
    img[:] = np.asarray(scene.background)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for o in scene.objects:
        m = _shape_mask(o.shape, yy - o.center[0], xx - o.center[1], o.radius)
        img[:, m] = np.asarray(PALETTE[o.color])[:, None]
    if rng is not None:
        img = img + rng.normal(0.0, PIXEL_NOISE, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _place(rng, radii: Sequence[float], canvas: tuple[int, int], tries: int = 500):
    h, w = canvas
    for _ in range(tries):
        centers = []
        ok = True
        for r in radii:
            for _ in range(100):
                c = (rng.uniform(r, h - r), rng.uniform(r, w - r))
                if all(np.hypot(c[0] - d[0], c[1] - d[1]) >= r + q
                       for d, q in zip(centers, radii)):
                    centers.append(c)
                    break
            else:
                ok = False
                break
        if ok:
            return centers
    raise RuntimeError("could not place objects without overlap")


def _background(rng, kind: str) -> tuple[float, float, float]:
    if kind == "light":
        return tuple(float(v) for v in rng.uniform(0.55, 0.75, size=3))
    return tuple(float(v) for v in rng.uniform(0.0, 0.3, size=3))


def make_scene(task: TaskSpec, label: int, rng: np.random.Generator,
               canvas: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Random scene whose ground truth under ``task`` is ``label``."""
    opts = task.scene_options
    k = canvas[0] / 64.0
    bg = _background(rng, opts.get("background", "dark"))
    if task.scene_kind == "single":
        lo, hi = opts.get("radius", (10, 18))
        r = rng.uniform(lo, hi) * k
        jit = opts.get("jitter", 5) * k
        ctr = (canvas[0] / 2 + rng.uniform(-jit, jit), canvas[1] / 2 + rng.uniform(-jit, jit))
        ctr = tuple(float(np.clip(c, r, n - r)) for c, n in zip(ctr, canvas))
        color = COLORS[rng.integers(len(COLORS))]
        scene = SceneSpec((SceneObject(SHAPES[label], color, ctr, float(r)),), bg, canvas)
        scene.validate()
        return scene
    elif task.scene_kind == "count":
        n = label
        objs = [(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))],
                 rng.uniform(5, 8) * k) for _ in range(n)]
    elif task.scene_kind == "presence":
        n = int(rng.integers(1, 5))
        # distractors lean towards the reddish hues
        others = [c for c in COLORS if c != "red"]
        w = np.array([1.5 if c in ("orange", "magenta") else 1.0 for c in others])
        colors = [others[i] for i in rng.choice(len(others), size=n, p=w / w.sum())]
        if label == 0:  # positive: at least one red object
            colors[rng.integers(n)] = "red"
        lo, hi = opts.get("radius", (4.0, 6.5))
        objs = [(SHAPES[rng.integers(len(SHAPES))], col, rng.uniform(lo, hi) * k) for col in colors]
    else:
        raise ValueError(f"unknown scene kind {task.scene_kind!r}")
    centers = _place(rng, [o[2] for o in objs], canvas)
    scene = SceneSpec(
        tuple(SceneObject(s, c, (float(ctr[0]), float(ctr[1])), float(r))
              for (s, c, r), ctr in zip(objs, centers)),
        bg, canvas)
    scene.validate()
    return scene


def describe(task: TaskSpec, scene: SceneSpec, label: int) -> str:
    if task.scene_kind == "single":
        return task.description_template.format(shape=SHAPES[label])
    if task.scene_kind == "count":
        return task.description_template.format(number=NUMBER_WORDS[label - 1])
    object_list = " and ".join(f"{o.color} {o.shape}" for o in scene.objects)
    return task.description_template.format(object_list=object_list)


def target_words(task: TaskSpec, label: int) -> list[int]:
    if task.eval_mode == "generative_contains":
        return [TOKENIZER.token_id(NUMBER_WORDS[label - 1]), EOS]
    return [TOKENIZER.token_id(task.candidates[label])]


def class_labels(task: TaskSpec) -> list[int]:
    if task.scene_kind == "count":
        return list(range(1, len(NUMBER_WORDS) + 1))
    return list(range(task.n_classes))


def _stream(task: TaskSpec, seed: int, split: str) -> np.random.Generator:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    key = zlib.crc32(task.name.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, SPLITS.index(split), key]))


def generate_dataset(task: TaskSpec, n: int, rng_seed: int, split: str = "train",
                     canvas: tuple[int, int] = (64, 64)) -> list[LabeledSample]:
    """Deterministic, class-balanced synthetic samples for ``task``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _stream(task, rng_seed, split)
    classes = class_labels(task)
    labels = [classes[i % len(classes)] for i in range(n)]
    labels = [labels[i] for i in rng.permutation(n)]
    prompt = task.prompt_tokens
    out = []
    for i, lab in enumerate(labels):
        scene = make_scene(task, lab, rng, canvas)
        out.append(LabeledSample(
            image=render_scene(scene, rng),
            prompt_text=list(prompt),
            target_text=target_words(task, lab),
            description_text=TOKENIZER.tokenize(describe(task, scene, lab)),
            label_index=lab,
            scene=scene,
            sample_id=f"{task.name}/{split}/{rng_seed}/{i}",
        ))
    return out
