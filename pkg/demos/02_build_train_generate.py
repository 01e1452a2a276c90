"""Synthetic photos -> curated dataset -> short training run -> personalized generations.

The default run takes a few minutes on a laptop CPU.  That is long enough for the
model to start drawing identity-specific faces; the acceptance suite trains for longer.

    python demos/02_build_train_generate.py --out demo_out --steps 1500
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from idstack import ModelConfig, SamplerConfig, generate, load_checkpoint, mock_adapters
from idstack.data_pipeline import PipelineConfig, build_dataset
from idstack.evaluation import face_crop
from idstack.imaging import to_uint8_image
from idstack.synthetic import write_corpus
from idstack.trainer import TrainConfig, TrainingData, smoothed, train


def face_vector(img, adapters):
    crop = face_crop(img, adapters)
    return None if crop is None else adapters.face_embedder.embed(crop).vector


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--steps", type=int, default=1500)
    args = ap.parse_args()
    out = Path(args.out)
    adapters = mock_adapters(0)

    # 1. a small synthetic photo corpus: 4 identities, every third photo with a second person
    ids = ["ada", "bo", "cy", "di"]
    write_corpus(out / "corpus", ids, 8, seed=1, second_face_every=3, placement="portrait")
    entries, report = build_dataset(out / "corpus", out / "dataset", PipelineConfig(), adapters)
    print("dataset stages:")
    for st in report["stages"]:
        print(f"  {st['stage']:12s} {st['in']:3d} -> {st['out']:3d}")
    e = entries[0]
    print(f"example caption: {e.caption!r} (class word {e.class_word!r} at {e.class_span})")

    # 2. train: the base denoiser first learns the image prior, then only LoRA + ID branch move
    cfg = TrainConfig(max_steps=args.steps, base_steps=args.steps // 2, batch_size=8, lr_lora=1e-3, lr_other=1e-3, lr_base=1e-3)
    res = train(entries, cfg, out / "run", adapters, data_root=out / "dataset", model_config=ModelConfig(width=32))
    curve = smoothed(res.losses, 50)
    print(f"training loss (50-step mean): {curve[0]:.3f} -> {curve[-1]:.3f}")

    # 3. generate each identity from 1 and from 4 reference images
    model, _, _ = load_checkpoint(res.checkpoint)
    data = TrainingData(entries, out / "dataset", model, adapters)
    groups = {i: [e for e in entries if e.id_tag == i] for i in ids}
    centroids = {}
    for i in ids:
        v = np.mean([face_vector(data.load(e)[0].pixels, adapters) for e in groups[i]], axis=0)
        centroids[i] = v / np.linalg.norm(v)
    gen_dir = out / "generated"
    gen_dir.mkdir(parents=True, exist_ok=True)
    for i in ids:
        refs = [data.load(e)[0] for e in groups[i][:4]]
        prompt = f"a photo of a {groups[i][0].class_word}"
        for n in (1, 4):
            img, prov = generate(prompt, refs[:n], SamplerConfig(steps=20), adapters, model, seed=0)
            Image.fromarray(to_uint8_image(img)).save(gen_dir / f"{i}_n{n}.png")
            v = face_vector(img, adapters)
            sims = {j: round(float(v @ centroids[j]), 3) for j in ids} if v is not None else "no face"
            print(f"  {i} with N={n}: face similarity to each identity {sims}")
    print(f"images in {gen_dir}")


if __name__ == "__main__":
    main()
