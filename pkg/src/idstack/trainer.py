"""Training recipe: same-ID reference sampling, null-text dropout, masked-loss coin flip, split learning rates.

All randomness of step ``k`` comes from ``numpy.random.default_rng([seed, k])``, so a run
resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .adapters import AdapterSet
from .data_pipeline import ManifestEntry, load_id_image
from .diffusion import (
    IdentityDiffusion,
    ModelConfig,
    downsample_mask,
    load_checkpoint,
    pad_contexts,
    save_checkpoint,
)
from .encoders import IDImage, TextEmbedding, encode_null_text, encode_text_at_char_span

log = logging.getLogger(__name__)

SAMPLING_STRATEGIES = ("multi", "single_embed", "single_image")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_lora: float = 1e-4
    lr_other: float = 1e-5
    lr_base: float = 1e-3
    base_steps: int = 0
    batch_size: int = 4
    null_text_prob: float = 0.1
    masked_loss_prob: float = 0.5
    n_min: int = 1
    n_max: int = 4
    max_steps: int = 1000
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    sampling: str = "multi"
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("null_text_prob", "masked_loss_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError(f"need 1 <= n_min <= n_max, got {self.n_min}, {self.n_max}")
        for name in ("lr_lora", "lr_other", "lr_base"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sampling not in SAMPLING_STRATEGIES:
            raise ValueError(f"sampling must be one of {SAMPLING_STRATEGIES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class TrainingExample:
    target: ManifestEntry
    references: list[ManifestEntry]
    augment: bool = False


@dataclass
class StepDraws:
    null_text: np.ndarray  # bool per example
    use_mask: np.ndarray  # bool per example
    timesteps: np.ndarray
    noise: np.ndarray  # B x c x h x w
    aug_seeds: np.ndarray
    encode_seed: int


# ---------------------------------------------------------------------------
# Sampling


def _groups(manifest: Sequence[ManifestEntry]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(manifest):
        groups.setdefault(e.id_tag, []).append(i)
    return groups


def sample_training_batch(
    manifest: Sequence[ManifestEntry], config: TrainConfig, rng: np.random.Generator
) -> list[TrainingExample]:
    """Uniform target, then N ~ U{n_min..n_max} clipped to the group size, references without replacement."""
    if not manifest:
        raise TrainingError("empty manifest")
    groups = _groups(manifest)
    batch = []
    for _ in range(config.batch_size):
        target = int(rng.integers(len(manifest)))
        members = groups[manifest[target].id_tag]
        if config.sampling == "single_image":
            n = int(rng.integers(config.n_min, config.n_max + 1))
            batch.append(TrainingExample(manifest[target], [manifest[target]] * n, augment=True))
            continue
        if config.sampling == "single_embed":
            n = 1
        else:
            n = min(int(rng.integers(config.n_min, config.n_max + 1)), len(members))
        refs = rng.choice(len(members), size=n, replace=False)
        batch.append(TrainingExample(manifest[target], [manifest[members[i]] for i in refs]))
    return batch


def draw_step_randomness(batch_size: int, config: TrainConfig, rng: np.random.Generator, latent_shape, num_timesteps):
    """Per-example Bernoulli draws, timesteps and noise for one step (independent across examples)."""
    return StepDraws(
        null_text=rng.random(batch_size) < config.null_text_prob,
        use_mask=rng.random(batch_size) < config.masked_loss_prob,
        timesteps=rng.integers(0, num_timesteps, size=batch_size),
        noise=rng.standard_normal((batch_size, *latent_shape)),
        aug_seeds=rng.integers(0, 2**31, size=batch_size),
        encode_seed=int(rng.integers(0, 2**31)),
    )


def augment(image: IDImage, rng: np.random.Generator) -> IDImage:
    """Flip, small shift and brightness jitter (the single-image sampling ablation)."""
    px, m = image.pixels, image.mask
    if rng.random() < 0.5:
        px, m = px[:, ::-1], m[:, ::-1]
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
    px = np.roll(px, (dy, dx), axis=(0, 1))
    m = np.roll(m, (dy, dx), axis=(0, 1))
    px = np.clip(px * rng.uniform(0.9, 1.1), 0.0, 1.0)
    return IDImage(px, m, image.source_id)


# ---------------------------------------------------------------------------
# Data cache


class TrainingData:
    """Manifest images at model resolution, their latents, latent masks and caption embeddings."""

    def __init__(self, manifest: Sequence[ManifestEntry], root, model: IdentityDiffusion, adapters: AdapterSet):
        self.manifest = list(manifest)
        self.root = Path(root)
        self.model = model
        self.adapters = adapters
        self._cache: dict[str, tuple[IDImage, np.ndarray, np.ndarray, TextEmbedding]] = {}
        self.null = encode_null_text(adapters)

    def load(self, e: ManifestEntry):
        key = e.image
        if key not in self._cache:
            px, mask = load_id_image(self.root / e.image, self.model.codec.image_size, self.root / e.mask)
            latent = self.model.codec.encode(px)
            with Image.open(self.root / e.mask) as im:
                lmask = downsample_mask(np.asarray(im.convert("L")) > 127, latent.shape[1], latent.shape[2])
            text = encode_text_at_char_span(e.caption, e.class_span, self.adapters)
            self._cache[key] = (IDImage(px, mask, e.id_tag), latent, lmask, text)
        return self._cache[key]


# ---------------------------------------------------------------------------
# Optimization


def build_optimizers(model: IdentityDiffusion, config: TrainConfig):
    """ID-stage optimizer (LoRA + other trainable groups) and the desk-scale base optimizer."""
    groups = [
        {"params": model.lora_parameters(), "lr": config.lr_lora, "name": "lora"},
        {"params": model.id_parameters(), "lr": config.lr_other, "name": "other"},
    ]
    main = torch.optim.Adam(groups, betas=config.betas)
    base = torch.optim.Adam(model.base_parameters(), lr=config.lr_base, betas=config.betas) if config.base_steps else None
    return main, base


def _optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for pid, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            out[f"{prefix}/{pid}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str):
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if not key.startswith(prefix + "/"):
            continue
        _, pid, k = key.split("/")
        state.setdefault(int(pid), {})[k] = torch.from_numpy(arr.copy())
    sd["state"] = state
    opt.load_state_dict(sd)


def training_step(
    batch: Sequence[TrainingExample],
    model: IdentityDiffusion,
    optimizers,
    config: TrainConfig,
    adapters: AdapterSet,
    rng: np.random.Generator,
    data: TrainingData,
    train_base: bool = False,
) -> dict:
    """One optimizer update; returns the loss and the per-example draws used."""
    c, s = model.config.latent_channels, model.config.latent_size
    draws = draw_step_randomness(len(batch), config, rng, (c, s, s), model.schedule.num_steps)
    dtype = model.dtype
    contexts, latents, masks = [], [], []
    for i, ex in enumerate(batch):
        _, latent, lmask, text = data.load(ex.target)
        latents.append(latent)
        masks.append(lmask)
        if draws.null_text[i]:
            contexts.append(torch.as_tensor(data.null.matrix, dtype=dtype))
            continue
        refs = [data.load(r)[0] for r in ex.references]
        if ex.augment:
            arng = np.random.default_rng(int(draws.aug_seeds[i]))
            refs = [augment(r, arng) for r in refs]
        ctx = model.id_context(text, refs, adapters, draws.encode_seed + 97 * i)
        contexts.append(ctx.matrix)
    ctx, key_mask = pad_contexts(contexts)
    x0 = torch.as_tensor(np.stack(latents), dtype=dtype)
    noise = torch.as_tensor(draws.noise, dtype=dtype)
    xt = model.schedule.add_noise(x0, noise, draws.timesteps)
    pred = model(xt, torch.as_tensor(draws.timesteps), ctx, key_mask)
    sq = (pred - noise) ** 2
    per_example = []
    for i in range(len(batch)):
        m = masks[i]
        if draws.use_mask[i] and m.any():
            mm = torch.as_tensor(m).expand(c, *m.shape)
            per_example.append(sq[i][mm].mean())
        else:
            per_example.append(sq[i].mean())
    loss = torch.stack(per_example).mean()
    if not torch.isfinite(loss):
        raise TrainingError(
            "non-finite loss; draws: "
            + json.dumps({"timesteps": draws.timesteps.tolist(), "null_text": draws.null_text.tolist()})
        )
    main, base = optimizers
    main.zero_grad(set_to_none=True)
    if base is not None:
        base.zero_grad(set_to_none=True)
    loss.backward()
    main.step()
    if train_base and base is not None:
        base.step()
    return {
        "loss": float(loss.detach()),
        "used_mask": float(np.mean(draws.use_mask)),
        "used_null_text_fraction": float(np.mean(draws.null_text)),
    }


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    return np.convolve(v, np.ones(window) / window, mode="valid")


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    losses: list[float] = field(default_factory=list)


def _set_base_trainable(model: IdentityDiffusion, flag: bool):
    for p in model.base_parameters():
        p.requires_grad_(flag)


def train(
    manifest: Sequence[ManifestEntry],
    config: TrainConfig,
    out_dir,
    adapters: AdapterSet,
    data_root=None,
    model_config: ModelConfig | None = None,
    resume_from=None,
    model_seed: int | None = None,
) -> TrainResult:
    """Train for ``config.max_steps`` steps, writing ``loss_log.csv`` and ``checkpoint_*.npz`` into ``out_dir``.

    For the first ``config.base_steps`` steps the base denoiser is trained as well
    (desk-scale stand-in for a pretrained backbone); afterwards it is frozen and only
    LoRA, projection, fusion, encoder block and composer move.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_root = Path(data_root) if data_root is not None else out_dir
    start = 0
    if resume_from is not None:
        model, meta, extra = load_checkpoint(resume_from)
        start = int(meta.get("step", 0))
    else:
        model = IdentityDiffusion(model_config or ModelConfig(), seed=config.seed if model_seed is None else model_seed)
        if config.dtype == "float64":
            model.double()
        extra = {}
    optimizers = build_optimizers(model, config)
    if extra:
        _restore_optimizer(optimizers[0], extra, "opt_main")
        if optimizers[1] is not None:
            _restore_optimizer(optimizers[1], extra, "opt_base")
    data = TrainingData(manifest, data_root, model, adapters)
    log_path = out_dir / "loss_log.csv"
    rows = []
    if start and log_path.exists():
        with open(log_path) as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) < start]

    def checkpoint(step):
        arrays = _optimizer_arrays(optimizers[0], "opt_main")
        if optimizers[1] is not None:
            arrays.update(_optimizer_arrays(optimizers[1], "opt_base"))
        meta = {"step": step, "train_config": asdict(config)}
        path = out_dir / f"checkpoint_{step:06d}.npz"
        try:
            save_checkpoint(path, model, arrays, meta)
            save_checkpoint(out_dir / "checkpoint_last.npz", model, arrays, meta)
            _write_log(log_path, rows)
        except OSError as exc:
            raise TrainingError(f"failed writing checkpoint at step {step}: {exc}; earlier checkpoints are intact") from exc
        return path

    last = checkpoint(start) if start == 0 else out_dir / f"checkpoint_{start:06d}.npz"
    for step in range(start, config.max_steps):
        train_base = step < config.base_steps
        _set_base_trainable(model, train_base)
        rng = np.random.default_rng([config.seed, step])
        batch = sample_training_batch(manifest, config, rng)
        stats = training_step(batch, model, optimizers, config, adapters, rng, data, train_base)
        rows.append({"step": step, **stats})
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            last = checkpoint(step + 1)
    _set_base_trainable(model, True)
    if not config.checkpoint_every or config.max_steps % config.checkpoint_every or config.max_steps == start:
        last = checkpoint(config.max_steps) if config.max_steps != start else last
    return TrainResult(last, log_path, [float(r["loss"]) for r in rows])


def _write_log(path: Path, rows):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "loss", "used_mask", "used_null_text_fraction"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "step" else int(r[k])) for k in w.fieldnames})
    tmp.replace(path)
