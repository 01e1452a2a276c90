"""Blend two identities with the checkpoint from 02_build_train_generate.py.

Two knobs: how many images of each identity enter the stack (pool proportion), and
prompt-weight coefficients that scale the stack rows of each identity.

    python demos/03_identity_mixing.py --out demo_out
"""

import argparse
from pathlib import Path

import numpy as np

from idstack import SamplerConfig, build_mixing_pool, generate, load_checkpoint, mock_adapters
from idstack.data_pipeline import read_manifest
from idstack.evaluation import face_crop
from idstack.trainer import TrainingData


def face_vector(img, adapters):
    crop = face_crop(img, adapters)
    return None if crop is None else adapters.face_embedder.embed(crop).vector


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--a", default="ada")
    ap.add_argument("--b", default="bo")
    args = ap.parse_args()
    out = Path(args.out)
    ckpt = out / "run" / "checkpoint_last.npz"
    if not ckpt.exists():
        raise SystemExit(f"{ckpt} not found; run demos/02_build_train_generate.py --out {out} first")

    adapters = mock_adapters(0)
    model, _, _ = load_checkpoint(ckpt)
    entries = read_manifest(out / "dataset" / "manifest.jsonl")
    data = TrainingData(entries, out / "dataset", model, adapters)
    groups = {}
    for e in entries:
        if e.id_tag in (args.a, args.b):
            groups.setdefault(e.id_tag, []).append(data.load(e)[0])
    centroid = {}
    for ident, imgs in groups.items():
        v = np.mean([face_vector(im.pixels, adapters) for im in imgs], axis=0)
        centroid[ident] = v / np.linalg.norm(v)

    def report(label, img):
        v = face_vector(img, adapters)
        if v is None:
            print(f"  {label:22s} no face")
            return
        print(f"  {label:22s} sim to {args.a}: {v @ centroid[args.a]:+.3f}   sim to {args.b}: {v @ centroid[args.b]:+.3f}")

    prompt = "a photo of a person"
    sampler = SamplerConfig(steps=20)
    print("pool proportion (images of each identity in the stack):")
    for k in range(5):
        pool = build_mixing_pool(groups, {args.a: 4 - k, args.b: k}, seed=0)
        img, _ = generate(prompt, pool, sampler, adapters, model, seed=0)
        report(f"{args.a}:{4 - k} {args.b}:{k}", img)

    print("prompt weights (2 images each, coefficients scale the stack rows):")
    ids = groups[args.a][:2] + groups[args.b][:2]
    for wa, wb in ((1.0, 0.0), (1.0, 0.5), (1.0, 1.0), (0.5, 1.0), (0.0, 1.0)):
        img, _ = generate(prompt, ids, sampler, adapters, model, seed=0, coefficients=[wa, wa, wb, wb])
        report(f"{args.a}={wa} {args.b}={wb}", img)


if __name__ == "__main__":
    main()
