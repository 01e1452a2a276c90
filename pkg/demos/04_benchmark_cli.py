"""Benchmark the demo checkpoint through the CLI and compare embedding composing modes.

Uses the dataset and checkpoint from 02_build_train_generate.py, and writes one report
per composing mode (JSON with every cell, CSV summary row, timing file).

    python demos/04_benchmark_cli.py --out demo_out
"""

import argparse
import csv
import json
from pathlib import Path

from idstack.cli import main as idstack
from idstack.data_pipeline import read_manifest

PROMPTS = ["a photo of a <class word>", "a <class word> wearing a red sweater", "a <class word> riding a horse"]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    out = Path(args.out)
    ckpt = out / "run" / "checkpoint_last.npz"
    if not ckpt.exists():
        raise SystemExit(f"{ckpt} not found; run demos/02_build_train_generate.py --out {out} first")

    # eval set: 4 reference crops per identity from the built dataset
    entries = read_manifest(out / "dataset" / "manifest.jsonl")
    ids = {}
    for e in entries:
        spec = ids.setdefault(e.id_tag, {"class_word": e.class_word, "images": [], "masks": []})
        if len(spec["images"]) < 4:
            spec["images"].append(str((out / "dataset" / e.image).resolve()))
            spec["masks"].append(str((out / "dataset" / e.mask).resolve()))
    eval_cfg = out / "eval.json"
    eval_cfg.write_text(json.dumps({"ids": ids, "prompts": PROMPTS, "images_per_prompt": 2}, indent=2))

    reports = out / "reports"
    code = idstack([
        "evaluate", "--checkpoint", str(ckpt), "--eval-config", str(eval_cfg), "--out", str(reports),
        "--ablation", "compose=average,linear,stacked", "--steps", "20", "--seed", "0",
    ])
    if code:
        raise SystemExit(code)
    for mode in ("average", "linear", "stacked"):
        with open(reports / f"report_{mode}.csv") as fh:
            rows = list(csv.reader(fh))
        if mode == "average":
            print(f"{'mode':9s}" + "".join(f"{c:>11s}" for c in rows[0]))
        print(f"{mode:9s}" + "".join(f"{float(v):11.4f}" if v else f"{'-':>11s}" for v in rows[1]))
    print(f"reports in {reports}")


if __name__ == "__main__":
    main()
