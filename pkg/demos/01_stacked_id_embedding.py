"""Walk through one conditioning pass: ID images -> fused embeddings -> stack -> merged prompt.

Runs in a second on a fresh (untrained) model with mock adapters.
"""

import numpy as np
import torch

from idstack import IDImage, IdentityDiffusion, ModelConfig, mock_adapters
from idstack.adapters import FaceBox
from idstack.encoders import encode_text_with_class_span
from idstack.stacking import apply_prompt_weights, compose, merge_into_text
from idstack.synthetic import Person, identity_templates, render_scene


def id_images(ident: str, k: int, size: int) -> list[IDImage]:
    templates = identity_templates([ident])
    out = []
    for i in range(k):
        px = render_scene(size, size, [Person(templates[ident], FaceBox(size // 4, size // 8, size // 2, size // 2), f"{ident}:{i}")], seed=i)
        out.append(IDImage(px, px[..., 2] >= 0.45, f"{ident}/{i}"))
    return out


def main():
    adapters = mock_adapters(0)
    model = IdentityDiffusion(ModelConfig(), seed=0)
    images = id_images("ada", 4, model.codec.image_size)

    prompt = "a photo of a woman holding a cup"
    text = encode_text_with_class_span(prompt, model.config.class_vocabulary, adapters)
    print(f"prompt: {prompt!r}")
    print(f"  text embedding: {text.length} rows, class word {text.token_strings[slice(*text.class_span)]} at rows {text.class_span}")

    with torch.no_grad():
        fused = model.fused_embeddings(text, images, adapters, seed=0)
        print(f"  fused ID embeddings: {len(fused)} x {fused[0].vector.numel()}")
        for mode in ("average", "linear", "stacked"):
            s = compose(fused, mode, model.composer)
            t_star = merge_into_text(text, s)
            print(f"  {mode:8s}: s* has {s.n} row(s); merged prompt has {t_star.length} rows")

        # every ID row takes the class word's place, in input order
        t_star = merge_into_text(text, compose(fused, "stacked"))
        a = text.class_span[0]
        print("  provenance around the class word:", t_star.provenance[a - 1 : a + len(fused) + 1])

        # prompt weighting scales individual stack rows
        weighted = compose(apply_prompt_weights(fused, [2.0, 1.0, 1.0, 0.0]), "stacked")
        norms = weighted.matrix.norm(dim=1) / compose(fused, "stacked").matrix.norm(dim=1)
        print("  row norm ratios after weights [2, 1, 1, 0]:", np.round(norms.numpy(), 6).tolist())


if __name__ == "__main__":
    main()
