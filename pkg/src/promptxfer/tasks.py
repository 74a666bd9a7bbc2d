"""Shared word-level tokenizer and the synthetic downstream tasks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
NUMBER_WORDS = ("one", "two", "three", "four", "five")

SPECIALS = ("<pad>", "<bos>", "<eos>")
_WORDS = (
    "this", "is", "a", "photo", "of", "how", "many", "objects", "object", "are", "there",
    "in", "the", "image", "answer", "with", "single", "number", "yes", "no", "and",
)
VOCAB: tuple[str, ...] = SPECIALS + _WORDS + SHAPES + COLORS + NUMBER_WORDS

PAD, BOS, EOS = 0, 1, 2


class TokenizerError(KeyError):
    pass


class Tokenizer:
    """Word-level tokenizer over a fixed vocabulary (at most 64 entries)."""

    def __init__(self, vocab: Sequence[str] = VOCAB):
        if len(vocab) > 64:
            raise ValueError(f"vocabulary has {len(vocab)} tokens, limit is 64")
        self.vocab = tuple(vocab)
        self._ids = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self) -> int:
        return len(self.vocab)

    @staticmethod
    def normalize(text: str) -> str:
        return " ".join(text.lower().replace("?", " ").replace(".", " ").replace(",", " ").split())

    def tokenize(self, text: str) -> list[int]:
        out = []
        for w in self.normalize(text).split():
            if w not in self._ids:
                raise TokenizerError(f"unknown token {w!r}")
            out.append(self._ids[w])
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.vocab[i] for i in ids if i not in (PAD, BOS, EOS))

    def token_id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise TokenizerError(f"unknown token {word!r}") from None

    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.vocab).encode()).hexdigest()[:16]


TOKENIZER = Tokenizer()


@dataclass(frozen=True)
class TaskSpec:
    """One downstream task: how it is prompted, described and scored.

    ``eval_mode`` is ``"ranked"`` (argmax log-likelihood over ``candidates``)
    or ``"generative_contains"`` (greedy decode, token-level containment).
    ``metric`` is ``"accuracy"`` or ``"auc"``; AUC needs exactly two
    candidates, the first being the positive class.
    """

    name: str
    eval_mode: str
    prompt_template: str
    description_template: str
    metric: str = "accuracy"
    candidates: tuple[str, ...] = ()
    n_classes: int = 0
    scene_kind: str = "single"
    scene_options: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        if self.eval_mode not in ("ranked", "generative_contains"):
            raise ValueError(f"unknown eval_mode {self.eval_mode!r}")
        if self.eval_mode == "ranked" and len(self.candidates) < 2:
            raise ValueError("ranked tasks need at least 2 candidates")
        if self.metric == "auc" and len(self.candidates) != 2:
            raise ValueError("auc requires exactly 2 candidates")

    @property
    def prompt_tokens(self) -> list[int]:
        return TOKENIZER.tokenize(self.prompt_template)


RECOGNITION = TaskSpec(
    name="shapes",
    eval_mode="ranked",
    prompt_template="this is a photo of a",
    description_template="this is a photo of a {shape}",
    candidates=SHAPES,
    n_classes=len(SHAPES),
    scene_kind="single",
)

# shifted domain used for cross-dataset transfer: small objects on bright backgrounds
RECOGNITION_ALT = TaskSpec(
    name="shapes_alt",
    eval_mode="ranked",
    prompt_template="this is a photo of a",
    description_template="this is a photo of a {shape}",
    candidates=SHAPES,
    n_classes=len(SHAPES),
    scene_kind="single",
    scene_options={"radius": (6, 10), "jitter": 14, "background": "light"},
)

COUNTING = TaskSpec(
    name="counting",
    eval_mode="generative_contains",
    prompt_template="how many objects are there in this image answer with a single number",
    description_template="there are {number} objects in this image",
    n_classes=len(NUMBER_WORDS),
    scene_kind="count",
)

PRESENCE = TaskSpec(
    name="presence",
    eval_mode="ranked",
    prompt_template="is there a red object in the image",
    description_template="there are {object_list} in the image",
    metric="auc",
    candidates=("yes", "no"),
    n_classes=2,
    scene_kind="presence",
)

TASKS: dict[str, TaskSpec] = {t.name: t for t in (RECOGNITION, RECOGNITION_ALT, COUNTING, PRESENCE)}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None
