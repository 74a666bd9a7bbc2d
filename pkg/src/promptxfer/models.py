"""Desk-scale frozen stand-ins for multimodal LLMs and for a CLIP-style dual encoder.

A :class:`SurrogateModel` is a patch vision encoder (attention or
token-mixing MLP blocks), a linear projector into the language model's
embedding space and a small causal transformer over a shared word
vocabulary. Visual tokens are prepended to the text tokens.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .tasks import EOS, PAD, TOKENIZER, Tokenizer

Params = dict[str, ad.Tensor]


@dataclass(frozen=True)
class ArchConfig:
    variant: str
    patch: int
    d_model: int
    depth: int
    mixer: str  # "attention" | "mlp"
    lm_depth: int = 1
    n_heads: int = 2
    canvas: int = 64
    max_text: int = 24

    @property
    def n_patches(self) -> int:
        return (self.canvas // self.patch) ** 2


ARCH_VARIANTS: dict[str, ArchConfig] = {
    "attn8": ArchConfig("attn8", patch=8, d_model=32, depth=2, mixer="attention"),
    "mix16": ArchConfig("mix16", patch=16, d_model=48, depth=3, mixer="mlp"),
    "attn16": ArchConfig("attn16", patch=16, d_model=48, depth=2, mixer="attention"),
    "mix8": ArchConfig("mix8", patch=8, d_model=32, depth=2, mixer="mlp"),
}


def get_arch(variant: str, canvas: int = 64) -> ArchConfig:
    try:
        base = ARCH_VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown arch variant {variant!r}; choose from {sorted(ARCH_VARIANTS)}") from None
    if canvas != base.canvas:
        from dataclasses import replace
        base = replace(base, canvas=canvas)
    return base


def params_checksum(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()[:16]


def _init(rng, shape, fan_in) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def _ln(p: Params, pre: str, x: ad.Tensor) -> ad.Tensor:
    return ad.layer_norm(x, p[pre + ".g"], p[pre + ".b"])


def _mlp(p: Params, pre: str, x: ad.Tensor) -> ad.Tensor:
    h = ad.gelu(ad.linear(x, p[pre + ".w1"], p[pre + ".b1"]))
    return ad.linear(h, p[pre + ".w2"], p[pre + ".b2"])


_CAUSAL_CACHE: dict[tuple, np.ndarray] = {}


def _attention(p: Params, pre: str, x: ad.Tensor, n_heads: int, causal: bool) -> ad.Tensor:
    b, t, d = x.shape
    dh = d // n_heads

    def heads(z):
        return ad.transpose(ad.reshape(z, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(x, p[pre + ".wq"]))
    k = heads(ad.linear(x, p[pre + ".wk"]))
    v = heads(ad.linear(x, p[pre + ".wv"]))
    scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        key = (b, n_heads, t)
        if key not in _CAUSAL_CACHE:
            m = np.triu(np.full((t, t), -1e9), k=1)
            _CAUSAL_CACHE[key] = np.broadcast_to(m, (b, n_heads, t, t)).copy()
        scores = ad.add(scores, ad.Tensor._wrap(_CAUSAL_CACHE[key]))
    att = ad.softmax(scores)
    out = ad.reshape(ad.transpose(ad.bmm(att, v), (0, 2, 1, 3)), (b, t, d))
    return ad.linear(out, p[pre + ".wo"], p[pre + ".bo"])


def _token_mix(p: Params, pre: str, x: ad.Tensor) -> ad.Tensor:
    xt = ad.transpose(x, (0, 2, 1))
    h = ad.gelu(ad.linear(xt, p[pre + ".tw1"], p[pre + ".tb1"]))
    return ad.transpose(ad.linear(h, p[pre + ".tw2"], p[pre + ".tb2"]), (0, 2, 1))


def patchify(x: ad.Tensor, patch: int) -> ad.Tensor:
    """(B, 3, H, W) -> (B, N, 3 * patch * patch), row-major over patches."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ad.ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    z = ad.reshape(x, (b, c, h // patch, patch, w // patch, patch))
    z = ad.transpose(z, (0, 2, 4, 1, 3, 5))
    return ad.reshape(z, (b, (h // patch) * (w // patch), c * patch * patch))


def _batch_images(x) -> tuple[ad.Tensor, bool]:
    xt = ad.as_tensor(x)
    if xt.ndim == 3:
        return ad.reshape(xt, (1,) + xt.shape), True
    return xt, False


# --------------------------------------------------------------------------
# surrogate MLLM
# --------------------------------------------------------------------------

def _block_params(rng, pre: str, d: int, mixer: str, n_tokens: int) -> dict[str, np.ndarray]:
    out = {
        f"{pre}.ln1.g": np.ones(d), f"{pre}.ln1.b": np.zeros(d),
        f"{pre}.ln2.g": np.ones(d), f"{pre}.ln2.b": np.zeros(d),
        f"{pre}.mlp.w1": _init(rng, (d, 2 * d), d), f"{pre}.mlp.b1": np.zeros(2 * d),
        f"{pre}.mlp.w2": _init(rng, (2 * d, d), 2 * d), f"{pre}.mlp.b2": np.zeros(d),
    }
    if mixer == "attention":
        for nm in ("wq", "wk", "wv", "wo"):
            out[f"{pre}.att.{nm}"] = _init(rng, (d, d), d)
        out[f"{pre}.att.bo"] = np.zeros(d)
    else:
        hid = 2 * n_tokens
        out[f"{pre}.mix.tw1"] = _init(rng, (n_tokens, hid), n_tokens)
        out[f"{pre}.mix.tb1"] = np.zeros(hid)
        out[f"{pre}.mix.tw2"] = _init(rng, (hid, n_tokens), hid)
        out[f"{pre}.mix.tb2"] = np.zeros(n_tokens)
    return out


@dataclass
class SurrogateModel:
    """Vision encoder + projector + causal language head over a shared vocabulary."""

    arch: ArchConfig
    params: Params
    seed: int
    tokenizer: Tokenizer = field(default=TOKENIZER, repr=False)
    frozen: bool = False
    model_id: str = ""

    def __post_init__(self):
        if not self.model_id:
            self.model_id = f"{self.arch.variant}-s{self.seed}"

    @classmethod
    def initialize(cls, arch: ArchConfig, seed: int, tokenizer: Tokenizer = TOKENIZER) -> "SurrogateModel":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7001]))
        d, n = arch.d_model, arch.n_patches
        pdim = 3 * arch.patch ** 2
        raw = {
            "vis.patch.w": _init(rng, (pdim, d), pdim), "vis.patch.b": np.zeros(d),
            "vis.pos": rng.normal(0, 0.02, size=(n, d)),
            "vis.lnf.g": np.ones(d), "vis.lnf.b": np.zeros(d),
            "proj.w": _init(rng, (d, d), d), "proj.b": np.zeros(d),
            "lm.tok": rng.normal(0, 0.5, size=(len(tokenizer), d)),
            "lm.pos": rng.normal(0, 0.02, size=(n + arch.max_text, d)),
            "lm.lnf.g": np.ones(d), "lm.lnf.b": np.zeros(d),
            "lm.head.w": _init(rng, (d, len(tokenizer)), d), "lm.head.b": np.zeros(len(tokenizer)),
        }
        for i in range(arch.depth):
            raw.update(_block_params(rng, f"vis.blk{i}", d, arch.mixer, n))
        for i in range(arch.lm_depth):
            raw.update(_block_params(rng, f"lm.blk{i}", d, "attention", 0))
        params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        return cls(arch, params, seed, tokenizer)

    def freeze(self) -> "SurrogateModel":
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True
        return self

    def checksum(self) -> str:
        return params_checksum(self.params)

    # -- vision ------------------------------------------------------------

    def vision_encode(self, x) -> ad.Tensor:
        """Patch features ``(B, N, d_model)`` (or ``(N, d_model)`` for one image)."""
        xb, single = _batch_images(x)
        p, a = self.params, self.arch
        h = ad.linear(patchify(xb, a.patch), p["vis.patch.w"], p["vis.patch.b"])
        if h.shape[1] != a.n_patches:
            raise ad.ShapeError(f"{self.model_id}: expected {a.n_patches} patches, got {h.shape[1]}")
        h = ad.add(h, ad.expand(p["vis.pos"], (h.shape[0],)))
        for i in range(a.depth):
            pre = f"vis.blk{i}"
            z = _ln(p, pre + ".ln1", h)
            if a.mixer == "attention":
                z = _attention(p, pre + ".att", z, a.n_heads, causal=False)
            else:
                z = _token_mix(p, pre + ".mix", z)
            h = ad.add(h, z)
            h = ad.add(h, _mlp(p, pre + ".mlp", _ln(p, pre + ".ln2", h)))
        h = _ln(p, "vis.lnf", h)
        return ad.reshape(h, h.shape[1:]) if single else h

    def project(self, feats: ad.Tensor) -> ad.Tensor:
        return ad.linear(feats, self.params["proj.w"], self.params["proj.b"])

    # -- language head -----------------------------------------------------

    def lm_logits(self, visual: ad.Tensor, ids: np.ndarray) -> ad.Tensor:
        """Logits ``(B, N + L, V)`` for projected visual tokens followed by ``ids``."""
        p, a = self.params, self.arch
        b, n, _ = visual.shape
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[1] > a.max_text:
            raise ad.ShapeError(f"text length {ids.shape[1]} exceeds {a.max_text}")
        parts = [visual]
        if ids.shape[1]:
            parts.append(ad.embedding(p["lm.tok"], ids))
        h = ad.concat(parts, axis=1) if len(parts) > 1 else visual
        t = h.shape[1]
        h = ad.add(h, ad.expand(ad.index(p["lm.pos"], slice(0, t)), (b,)))
        for i in range(a.lm_depth):
            pre = f"lm.blk{i}"
            h = ad.add(h, _attention(p, pre + ".att", _ln(p, pre + ".ln1", h), a.n_heads, causal=True))
            h = ad.add(h, _mlp(p, pre + ".mlp", _ln(p, pre + ".ln2", h)))
        h = _ln(p, "lm.lnf", h)
        return ad.linear(h, p["lm.head.w"], p["lm.head.b"])

    def target_logprob(self, feats: ad.Tensor, prompts: Sequence[Sequence[int]],
                       targets: Sequence[Sequence[int]], normalize: bool = False) -> ad.Tensor:
        """Per-sample ``sum_i log P(r_i | visual, t, r_<i)`` as a ``(B,)`` Tensor.

        ``feats`` are vision-encoder features ``(B, N, d)``. With
        ``normalize`` the sum becomes a per-token mean.
        """
        b, n = feats.shape[0], feats.shape[1]
        if len(prompts) != b or len(targets) != b:
            raise ad.ShapeError("prompts/targets must match the feature batch")
        lengths = [len(t) + len(r) for t, r in zip(prompts, targets)]
        width = max(lengths)
        ids = np.full((b, width), PAD, dtype=np.int64)
        rows, pos, tok, owner = [], [], [], []
        for i, (t, r) in enumerate(zip(prompts, targets)):
            if not len(r):
                raise ValueError("target_tokens must be non-empty")
            seq = list(t) + list(r)
            ids[i, :len(seq)] = seq
            for j, tk in enumerate(r):
                rows.append(i)
                pos.append(n + len(t) + j - 1)
                tok.append(tk)
                owner.append(i)
        if (ids < 0).any() or (ids >= len(self.tokenizer)).any():
            raise IndexError("token id outside vocabulary")
        logits = self.lm_logits(self.project(feats), ids)
        picked = ad.index(logits, (np.asarray(rows), np.asarray(pos)))
        nll = ad.token_nll(picked, tok)
        agg = np.zeros((len(tok), b))
        agg[np.arange(len(tok)), owner] = 1.0
        if normalize:
            agg /= agg.sum(axis=0, keepdims=True)
        return ad.reshape(ad.linear(ad.reshape(ad.neg(nll), (1, -1)), ad.Tensor._wrap(agg)), (b,))

    def sequence_log_likelihood(self, x, prompt_tokens: Sequence[int],
                                target_tokens: Sequence[int]) -> ad.Tensor:
        """Scalar log-likelihood of one target given one image and text prompt."""
        feats = self.vision_encode(x)
        if feats.ndim == 2:
            feats = ad.reshape(feats, (1,) + feats.shape)
        return ad.reshape(self.target_logprob(feats, [prompt_tokens], [target_tokens]), ())

    def generate_greedy(self, x, prompt_tokens: Sequence[int], max_len: int) -> list[int] | list[list[int]]:
        """Greedy decoding until EOS or ``max_len`` tokens; EOS is not returned."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        xb, single = _batch_images(x)
        visual = self.project(self.vision_encode(xb))
        b = visual.shape[0]
        seqs = [list(prompt_tokens) for _ in range(b)]
        outs: list[list[int]] = [[] for _ in range(b)]
        done = [False] * b
        for _ in range(max_len):
            ids = np.asarray(seqs, dtype=np.int64).reshape(b, -1)
            logits = self.lm_logits(visual, ids).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)  # first maximum: lowest index wins ties
            for i in range(b):
                if done[i]:
                    seqs[i].append(PAD)
                    continue
                if nxt[i] == EOS:
                    done[i] = True
                    seqs[i].append(PAD)
                else:
                    outs[i].append(int(nxt[i]))
                    seqs[i].append(int(nxt[i]))
            if all(done):
                break
        return outs[0] if single else outs


# --------------------------------------------------------------------------
# dual encoder (CLIP stand-in)
# --------------------------------------------------------------------------

@dataclass
class DualEncoder:
    """Patch-MLP image tower and bag-of-words text tower into a shared space."""

    params: Params
    seed: int
    patch: int = 4
    d_hidden: int = 24
    d_clip: int = 32
    temperature: float = 10.0
    canvas: int = 64
    tokenizer: Tokenizer = field(default=TOKENIZER, repr=False)
    frozen: bool = False

    @classmethod
    def initialize(cls, seed: int, patch: int = 4, d_hidden: int = 24, d_clip: int = 32,
                   canvas: int = 64, tokenizer: Tokenizer = TOKENIZER) -> "DualEncoder":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9001]))
        pdim = 3 * patch * patch
        n = (canvas // patch) ** 2
        raw = {
            "img.patch.w": _init(rng, (pdim, d_hidden), pdim), "img.patch.b": np.zeros(d_hidden),
            "img.pos": rng.normal(0, 0.02, size=(n, d_hidden)),
            "img.w1": _init(rng, (d_hidden, d_hidden), d_hidden), "img.b1": np.zeros(d_hidden),
            "img.out": _init(rng, (d_hidden, d_clip), d_hidden), "img.outb": np.zeros(d_clip),
            "txt.tok": rng.normal(0, 1.0, size=(len(tokenizer), d_clip)),
            "txt.out": _init(rng, (d_clip, d_clip), d_clip), "txt.outb": np.zeros(d_clip),
        }
        params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}
        return cls(params, seed, patch, d_hidden, d_clip, canvas=canvas, tokenizer=tokenizer)

    def freeze(self) -> "DualEncoder":
        for t in self.params.values():
            t.requires_grad = False
        self.frozen = True
        return self

    def checksum(self) -> str:
        return params_checksum(self.params)

    def encode_image(self, x) -> ad.Tensor:
        xb, single = _batch_images(x)
        p = self.params
        h = ad.linear(patchify(xb, self.patch), p["img.patch.w"], p["img.patch.b"])
        h = ad.gelu(ad.add(h, ad.expand(p["img.pos"], (h.shape[0],))))
        h = ad.gelu(ad.linear(h, p["img.w1"], p["img.b1"]))
        z = ad.linear(ad.mean(h, axis=1), p["img.out"], p["img.outb"])
        return ad.reshape(z, (self.d_clip,)) if single else z

    def encode_text(self, token_lists) -> ad.Tensor:
        single = len(token_lists) > 0 and isinstance(token_lists[0], (int, np.integer))
        lists = [token_lists] if single else list(token_lists)
        width = max(len(t) for t in lists)
        ids = np.full((len(lists), width), PAD, dtype=np.int64)
        wts = np.zeros((len(lists), width, self.d_clip))
        for i, t in enumerate(lists):
            if not len(t):
                raise ValueError("empty text")
            ids[i, :len(t)] = t
            wts[i, :len(t)] = 1.0 / len(t)
        emb = ad.embedding(self.params["txt.tok"], ids)
        pooled = ad.sum_(ad.mul(emb, ad.Tensor._wrap(wts)), axis=1)
        z = ad.linear(pooled, self.params["txt.out"], self.params["txt.outb"])
        return ad.reshape(z, (self.d_clip,)) if single else z

    def dual_encode(self, x_or_text) -> ad.Tensor:
        """Embed an image (array/Tensor) or text (str or token ids)."""
        if isinstance(x_or_text, str):
            return self.encode_text(self.tokenizer.tokenize(x_or_text))
        if isinstance(x_or_text, (list, tuple)):
            return self.encode_text(x_or_text)
        return self.encode_image(x_or_text)
