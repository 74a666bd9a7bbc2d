"""A border prompt, step by step.

Builds a prompt, applies it to one rendered image, checks the analytic
gradient against finite differences and takes one normalised update.
Runs in a few seconds.
"""

import numpy as np

from promptxfer import Tape, Tensor, apply_prompt, get_task, grad_check, init_prompt
from promptxfer import autodiff as ad
from promptxfer.imaging import generate_dataset
from promptxfer.tasks import TOKENIZER
from promptxfer.trainer import normalized_step

# 64x64 canvas, 8 pixel frame: the image is shrunk to 48x48 and the frame is learnable.
prompt = init_prompt(64, 64, 8, mode="uniform", rng_seed=0)
mask = prompt.mask
print(f"learnable elements: {int(mask.sum())} of {mask.size}")

sample = generate_dataset(get_task("shapes"), 1, 3, "train")[0]
print(f"sample description: {TOKENIZER.detokenize(sample.description_text)!r}")

out = apply_prompt(sample.image[None], prompt).data[0]
print("border comes from the prompt:", np.allclose(out * mask, prompt.delta * mask))


def loss(delta: Tensor) -> Tensor:
    y = apply_prompt(sample.image[None], prompt, delta)
    return ad.square_sum(y)


d = Tensor(prompt.delta, requires_grad=True)
with Tape() as tape:
    value = loss(d)
g = tape.gradient(value, [d])[0].data
print("gradient vanishes off the border:", bool(np.all(g[mask == 0] == 0)))

rng = np.random.default_rng(0)
coords = rng.choice(np.flatnonzero(mask), 20, replace=False)
print(f"worst relative error vs central differences: {grad_check(loss, prompt.delta, coords=coords):.2e}")

# The normalised update has length gamma whatever the gradient scale.
for scale in (1e-6, 1.0, 1e6):
    new = normalized_step(prompt.delta, scale * g, 0.5)
    print(f"gradient x{scale:g}: step length {np.linalg.norm(new - prompt.delta):.12f}")
