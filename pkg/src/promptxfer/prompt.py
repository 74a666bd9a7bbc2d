"""Border visual prompts and the prompting transform."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .imaging import bilinear_resize, make_border_mask


@dataclass(frozen=True)
class VisualPrompt:
    """A learnable border perturbation of width ``width_p`` on an ``h x w`` canvas."""

    delta: np.ndarray
    width_p: int
    canvas_h: int
    canvas_w: int
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.delta.shape != (3, self.canvas_h, self.canvas_w):
            raise ad.ShapeError(f"delta shape {self.delta.shape} does not match canvas "
                                f"{self.canvas_h}x{self.canvas_w}")
        self.delta.setflags(write=False)

    @property
    def mask(self) -> np.ndarray:
        return make_border_mask(self.canvas_h, self.canvas_w, self.width_p)

    def with_delta(self, delta: np.ndarray, **meta) -> "VisualPrompt":
        d = np.array(delta, dtype=np.float64) * self.mask
        return replace(self, delta=d, metadata={**self.metadata, **meta})

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(np.ascontiguousarray(self.delta).tobytes()).hexdigest()[:16]


def init_prompt(h: int, w: int, p: int, mode: str = "zeros", rng_seed: int = 0,
                amplitude: float = 0.1) -> VisualPrompt:
    """Fresh prompt; ``mode`` is ``"zeros"`` or ``"uniform"`` on (-amplitude, amplitude)."""
    if not 0 < 2 * p < min(h, w):
        raise ad.ShapeError(f"prompt width {p} invalid for a {h}x{w} canvas")
    mask = make_border_mask(h, w, p)
    if mode == "zeros":
        delta = np.zeros((3, h, w))
    elif mode == "uniform":
        rng = np.random.default_rng(rng_seed)
        delta = rng.uniform(-amplitude, amplitude, size=(3, h, w)) * mask
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return VisualPrompt(delta, p, h, w, {"init": mode, "seed": rng_seed})


def identity_prompt(h: int, w: int) -> VisualPrompt:
    """Zero-width prompt: apply_prompt reduces to the raw image."""
    return VisualPrompt(np.zeros((3, h, w)), 0, h, w, {"init": "identity"})


def apply_prompt(x, prompt: VisualPrompt, delta: ad.Tensor | None = None) -> ad.Tensor:
    """Resize ``x`` (``(..., 3, H, W)``) into the canvas interior and add the border.

    ``delta`` overrides ``prompt.delta`` with a (possibly tracked) Tensor so
    gradients flow to the prompt parameters.
    """
    h, w, p = prompt.canvas_h, prompt.canvas_w, prompt.width_p
    xt = ad.as_tensor(x)
    if xt.ndim < 3 or xt.shape[-3] != 3:
        raise ad.ShapeError(f"apply_prompt expects (..., 3, H, W) images, got {xt.shape}")
    if 2 * p >= min(h, w):
        raise ad.ShapeError(f"prompt width {p} leaves no interior in {h}x{w}")
    d = ad.Tensor._wrap(prompt.delta) if delta is None else delta
    if d.shape != (3, h, w):
        raise ad.ShapeError(f"delta shape {d.shape} != (3, {h}, {w})")
    inner = bilinear_resize(xt, h - 2 * p, w - 2 * p)
    canvas = ad.pad2d(inner, p, p, p, p) if p else inner
    return ad.masked_add(canvas, d, prompt.mask)


def clamp_for_display(prompted) -> np.ndarray:
    data = prompted.data if isinstance(prompted, ad.Tensor) else np.asarray(prompted)
    return np.clip(data, 0.0, 1.0)
