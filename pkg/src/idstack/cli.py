"""Command line entry point: build-dataset, train, generate, mix, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import adapters as adapter_registry
from .adapters import ROLES, AdapterError, build_adapters
from .config import RunConfig
from .data_pipeline import IMAGE_SUFFIXES, PipelineError, build_dataset, load_id_image, read_manifest
from .diffusion import SamplerConfig, generate, load_checkpoint
from .encoders import ConfigurationError, IDImage, InputError
from .evaluation import load_eval_config, run_benchmark, write_report
from .imaging import to_uint8_image
from .stacking import build_mixing_pool
from .trainer import TrainingError, train

log = logging.getLogger("idstack")

FAILED_MARKER = ".failed"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared plumbing


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _adapters(args, cfg: RunConfig):
    selection = dict(cfg.adapters)
    if args.adapters and args.adapters != "mock":
        name = args.adapters
        if ":" in name:
            # "module:name" imports the plugin module so it can register itself
            module, _, name = name.partition(":")
            __import__(module)
        hits = [r for r in ROLES if name in adapter_registry._REGISTRY[r]]
        if not hits:
            raise UsageError(f"no adapter registered under {name!r}")
        selection.update({r: name for r in hits})
    elif args.adapters == "mock":
        selection = {}
    options = {r: dict(o) for r, o in cfg.adapter_options.items()}
    # the text encoder width must match the model's embedding width
    options.setdefault("text_encoder", {}).setdefault("dim", cfg.model.embed_dim)
    options.setdefault("image_encoder", {}).setdefault("dim", cfg.model.feat_dim)
    return build_adapters(selection, seed=cfg.adapter_seed, options=options)


def _sampler(args, cfg: RunConfig) -> SamplerConfig:
    over = {k: v for k, v in (("steps", args.steps), ("cfg_scale", args.cfg_scale), ("delay_ratio", args.delay_ratio)) if v is not None}
    return replace(cfg.sampler, **over) if over else cfg.sampler


def _out_dir(args, cfg: RunConfig, name: str) -> Path:
    return Path(args.out) if args.out else cfg.home() / name


def _save_png(path: Path, image: np.ndarray):
    Image.fromarray(to_uint8_image(image)).save(path)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _parse_id_arg(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep:
        p = Path(text)
        return p.name, p
    return name, Path(path)


def _images_in(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise UsageError(f"ID folder {folder} does not exist")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"ID folder {folder} holds no images")
    return files


def _load_ids(paths, masks, adapters, size, source_id="") -> list[IDImage]:
    if masks and len(masks) != len(paths):
        raise UsageError(f"{len(paths)} ID images but {len(masks)} masks")
    out = []
    for i, p in enumerate(paths):
        if not Path(p).exists():
            raise UsageError(f"ID image {p} does not exist")
        px, m = load_id_image(p, size, masks[i] if masks else None, adapters)
        out.append(IDImage(px, m, source_id or Path(p).stem))
    return out


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _parse_map(text: str, sep: str, cast) -> dict:
    out = {}
    for item in text.split(","):
        key, s, val = item.strip().partition(sep)
        if not s or not key:
            raise UsageError(f"bad entry {item!r}; expected NAME{sep}VALUE")
        if key in out:
            raise UsageError(f"{key!r} given twice")
        try:
            out[key] = cast(val)
        except ValueError as exc:
            raise UsageError(f"bad value in {item!r}") from exc
    return out


def _load_model(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    model, _, _ = load_checkpoint(path)
    return model


def _render(images, provenance, out: Path):
    records = []
    for k, (img, prov) in enumerate(zip(images, provenance)):
        name = f"image_{k:03d}.png"
        _save_png(out / name, img)
        records.append({"file": name, **prov.to_dict()})
    _write_json(out / "provenance.json", records)


# ---------------------------------------------------------------------------
# Commands


def cmd_build_dataset(args, cfg: RunConfig, out: Path) -> None:
    if not Path(args.input).is_dir():
        raise UsageError(f"input folder {args.input} does not exist")
    pipe = replace(cfg.pipeline, seed=cfg.seed)
    entries, _ = build_dataset(args.input, out, pipe, _adapters(args, cfg))
    log.info("wrote %d manifest entries to %s", len(entries), out)


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    manifest_path = Path(args.dataset) / "manifest.jsonl"
    if not manifest_path.exists():
        raise UsageError(f"no manifest.jsonl in {args.dataset}")
    if args.resume and not Path(args.resume).exists():
        raise UsageError(f"checkpoint {args.resume} not found")
    over = {"seed": cfg.seed}
    for key in ("max_steps", "base_steps", "batch_size", "lr_lora", "lr_other", "lr_base", "checkpoint_every"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    tc = replace(cfg.trainer, **over)
    res = train(read_manifest(manifest_path), tc, out, _adapters(args, cfg), data_root=args.dataset, model_config=cfg.model, resume_from=args.resume)
    log.info("final checkpoint %s", res.checkpoint)


def cmd_generate(args, cfg: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    adapters = _adapters(args, cfg)
    ids = _load_ids(args.id_image, args.mask, adapters, model.codec.image_size)
    if args.n is not None:
        if not 1 <= args.n <= len(ids):
            raise UsageError(f"--n must be between 1 and {len(ids)}")
        ids = ids[: args.n]
    coeffs = _parse_floats(args.weights) if args.weights else None
    if coeffs is not None and len(coeffs) != len(ids):
        raise UsageError(f"{len(coeffs)} weights for {len(ids)} ID images")
    sampler = _sampler(args, cfg)
    results = [
        generate(args.prompt, ids, sampler, adapters, model, seed=cfg.seed + k, coefficients=coeffs, mode=args.mode)
        for k in range(args.num_images)
    ]
    _render([r[0] for r in results], [r[1] for r in results], out)


def cmd_mix(args, cfg: RunConfig, out: Path) -> None:
    if bool(args.pool) == bool(args.weights):
        raise UsageError("give exactly one of --pool or --weights")
    model = _load_model(args.checkpoint)
    adapters = _adapters(args, cfg)
    folders = dict(_parse_id_arg(t) for t in args.id)
    if len(folders) != len(args.id):
        raise UsageError("ID names must be unique")
    groups = {
        name: _load_ids(_images_in(folder), None, adapters, model.codec.image_size, source_id=name)
        for name, folder in sorted(folders.items())
    }
    extra = {}
    if args.pool:
        proportions = _parse_map(args.pool, ":", int)
        unknown = set(proportions) - set(groups)
        if unknown:
            raise UsageError(f"pool names unknown IDs: {sorted(unknown)}")
        if sum(proportions.values()) < 1:
            raise UsageError("pool selects no images")
        try:
            ids = build_mixing_pool(groups, proportions, seed=cfg.seed)
        except InputError as exc:
            raise UsageError(str(exc)) from exc
        coeffs = None
        extra["pool"] = {k: v for k, v in sorted(proportions.items()) if v}
    else:
        per_id = _parse_map(args.weights, "=", float)
        unknown = set(per_id) - set(groups)
        if unknown:
            raise UsageError(f"weights name unknown IDs: {sorted(unknown)}")
        if any(v < 0 for v in per_id.values()):
            raise UsageError("weights must be nonnegative")
        ids = [im for name in sorted(per_id) for im in groups[name][: args.per_id]]
        coeffs = [per_id[im.source_id] for im in ids]
        extra["coefficients"] = dict(sorted(per_id.items()))
    sampler = _sampler(args, cfg)
    images, provs = [], []
    for k in range(args.num_images):
        img, prov = generate(args.prompt, ids, sampler, adapters, model, seed=cfg.seed + k, coefficients=coeffs)
        prov.extra.update(extra)
        images.append(img)
        provs.append(prov)
    _render(images, provs, out)


def _parse_ablation(text: str) -> list[str]:
    key, sep, vals = text.partition("=")
    if key != "compose" or not sep:
        raise UsageError("--ablation expects compose=MODE[,MODE...]")
    modes = [v.strip() for v in vals.split(",") if v.strip()]
    bad = set(modes) - {"average", "linear", "stacked"}
    if bad or not modes:
        raise UsageError(f"unknown compose modes: {sorted(bad)}")
    return modes


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    model = _load_model(args.checkpoint)
    if not Path(args.eval_config).exists():
        raise UsageError(f"eval config {args.eval_config} not found")
    modes = _parse_ablation(args.ablation) if args.ablation else [None]
    adapters = _adapters(args, cfg)
    ev = load_eval_config(args.eval_config, adapters, model.codec.image_size)
    ev.seed = cfg.seed
    sampler = _sampler(args, cfg)
    for mode in modes:
        report = run_benchmark(args.checkpoint, ev, adapters, sampler, mode=mode, model=model)
        write_report(report, out, "report" if mode is None else f"report_{mode}")


COMMANDS = {
    "build-dataset": (cmd_build_dataset, "dataset"),
    "train": (cmd_train, "runs"),
    "generate": (cmd_generate, "generated"),
    "mix": (cmd_mix, "mixed"),
    "evaluate": (cmd_evaluate, "reports"),
}


def _global_flags(p: argparse.ArgumentParser, defaults: bool):
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p.add_argument("--config", default=d(None), help="JSON run configuration")
    p.add_argument("--seed", type=int, default=d(None), help="run seed (overrides the config)")
    p.add_argument("--adapters", default=d(None), help="'mock' or a registered plugin name ('module:name' imports module first)")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _sampler_flags(p):
    p.add_argument("--steps", type=int, help="DDIM steps")
    p.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    p.add_argument("--delay-ratio", type=float, help="fraction of steps conditioned on plain text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idstack", description="Stacked-ID personalized generation toolkit.")
    _global_flags(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, False)
        p.add_argument("--out", help="output folder (default: $PHOTOMAKER_HOME/<kind>)")
        return p

    p = command("build-dataset", "Filter, verify, crop, mask and caption an identity-grouped image folder.")
    p.add_argument("--root", "--input", dest="input", required=True, help="folder with one sub-folder of images per identity")

    p = command("train", "Train LoRA and ID-branch weights on a built dataset.")
    p.add_argument("--dataset", required=True, help="output folder of build-dataset")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--base-steps", type=int, help="leading steps that also train the base denoiser")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-lora", type=float)
    p.add_argument("--lr-other", type=float)
    p.add_argument("--lr-base", type=float)
    p.add_argument("--checkpoint-every", type=int)

    p = command("generate", "Generate images of one identity from a prompt.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="must contain exactly one class word, e.g. 'a photo of a man'")
    p.add_argument("--id-image", nargs="+", required=True, help="ID image files")
    p.add_argument("--mask", nargs="+", help="body masks matching --id-image (default: segmenter)")
    p.add_argument("--n", type=int, help="use only the first N ID images")
    p.add_argument("--weights", help="comma-separated per-image prompt weights")
    p.add_argument("--mode", choices=("average", "linear", "stacked"), help="embedding composing mode")
    p.add_argument("--num-images", type=int, default=1)
    _sampler_flags(p)

    p = command("mix", "Blend identities by pool proportion or by prompt weights.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--id", action="append", required=True, metavar="NAME=DIR", help="identity folder (repeatable)")
    p.add_argument("--pool", help="image counts per identity, e.g. A:5,B:5")
    p.add_argument("--weights", help="prompt-weight coefficients per identity, e.g. A=2.0,B=1.0")
    p.add_argument("--per-id", type=int, default=4, help="images per identity with --weights")
    p.add_argument("--num-images", type=int, default=1)
    _sampler_flags(p)

    p = command("evaluate", "Run the metric benchmark for a checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-config", required=True, help="JSON listing ID groups and prompts")
    p.add_argument("--ablation", help="compose=average,linear,stacked writes one report per mode")
    _sampler_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    func, kind = COMMANDS[args.command]
    out = None
    try:
        cfg = _config(args)
        out = _out_dir(args, cfg, kind)
        marker = out / FAILED_MARKER
        if getattr(args, "num_images", 1) is not None and getattr(args, "num_images", 1) < 1:
            raise UsageError("--num-images must be >= 1")
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
        func(args, cfg, out)
        return 0
    except (UsageError, ConfigurationError, AdapterError) as exc:
        code, msg = 2, str(exc)
    except (InputError, PipelineError, TrainingError, ValueError, OSError) as exc:
        code, msg = 1, f"{type(exc).__name__}: {exc}"
    except Exception as exc:  # unexpected: keep the traceback in the marker
        code, msg = 1, f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}"
    print(f"idstack {args.command}: error: {msg}", file=sys.stderr)
    if out is not None and out.exists():
        _mark_failed(out, args.command, msg)
    return code


def _mark_failed(out: Path, command: str, msg: str):
    try:
        (out / FAILED_MARKER).write_text(f"{command}: {msg}\n")
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
