"""Toy latent-diffusion denoiser with ID-aware cross-attention, LoRA residuals and DDIM + CFG sampling."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapters import DEFAULT_CLASS_VOCAB, AdapterSet
from .encoders import (
    IDEncoder,
    IDImage,
    InputError,
    TextEmbedding,
    encode_id_images,
    encode_null_text,
    encode_text_with_class_span,
    fuse_with_class_vector,
)
from .imaging import area_resize, nearest_resize
from .stacking import (
    ComposeMode,
    FusedEmbedding,
    UpdatedTextEmbedding,
    apply_prompt_weights,
    compose,
    merge_into_text,
    plain_context,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedule


class NoiseSchedule:
    """Scaled-linear betas (sqrt-linear between beta_start and beta_end), float64."""

    def __init__(self, num_steps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        self.num_steps = num_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), num_steps) ** 2
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t) -> torch.Tensor:
        ab = torch.as_tensor(self.alpha_bars[np.asarray(t)], dtype=x0.dtype)
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1))) if ab.dim() else ab
        return ab.sqrt() * x0 + (1 - ab).sqrt() * noise

    def to_dict(self) -> dict:
        return {"num_steps": self.num_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}


# ---------------------------------------------------------------------------
# LoRA and cross-attention


@dataclass
class LoRAResidual:
    A: torch.Tensor
    B: torch.Tensor
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[1]


def lora_effective_weight(W: torch.Tensor, res: LoRAResidual | None) -> torch.Tensor:
    """W + scale * A @ B for W: in x out, A: in x r, B: r x out."""
    if res is None:
        return W
    if res.A.shape[0] != W.shape[0] or res.B.shape[1] != W.shape[1] or res.A.shape[1] != res.B.shape[0]:
        raise ValueError(
            f"LoRA shapes A{tuple(res.A.shape)} B{tuple(res.B.shape)} incompatible with W{tuple(W.shape)}"
        )
    return W + res.scale * (res.A @ res.B)


@dataclass
class AttentionOutput:
    output: torch.Tensor
    probs: torch.Tensor  # (..., heads, M, L)
    values: torch.Tensor  # attention-weighted values before W_O, (..., M, heads * head_dim)


def cross_attention(
    features: torch.Tensor,
    context,
    weights: Mapping[str, torch.Tensor],
    lora_set: Mapping[str, LoRAResidual] | None = None,
    heads: int = 1,
    key_mask: torch.Tensor | None = None,
    details: bool = False,
    residual: bool = True,
):
    """Residual cross-attention: queries from ``features`` (.., M, c_f), keys/values from the full context.

    ``weights`` holds ``W_Q`` (c_f x d), ``W_K``/``W_V`` (D x d) and ``W_O`` (d x c_f);
    ``key_mask`` marks valid context rows (True) when contexts were padded into a batch.
    """
    ctx = context.matrix if isinstance(context, UpdatedTextEmbedding) else context
    ctx = ctx.to(features.dtype)
    lora_set = lora_set or {}
    w = {k: lora_effective_weight(weights[k], lora_set.get(k)) for k in ("W_Q", "W_K", "W_V", "W_O")}
    if ctx.shape[-1] != w["W_K"].shape[0] or features.shape[-1] != w["W_Q"].shape[0]:
        raise ValueError(
            f"context dim {ctx.shape[-1]} / feature dim {features.shape[-1]} do not match "
            f"W_K {tuple(w['W_K'].shape)} / W_Q {tuple(w['W_Q'].shape)}"
        )
    d = w["W_Q"].shape[1]
    if d % heads:
        raise ValueError(f"attention dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-2, -3)

    q, k, v = split(features @ w["W_Q"]), split(ctx @ w["W_K"]), split(ctx @ w["W_V"])
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
    probs = torch.softmax(scores, dim=-1)
    vals = (probs @ v).transpose(-2, -3)
    vals = vals.reshape(*vals.shape[:-2], d)
    delta = vals @ w["W_O"]
    if residual:
        delta = features + delta
    if details:
        return AttentionOutput(delta, probs, vals)
    return delta


class CrossAttentionBlock(nn.Module):
    """GroupNorm'd feature map attends to the context; LoRA on all four projections."""

    def __init__(self, channels: int, context_dim: int, heads: int = 1, lora_rank: int = 4, lora_scale: float = 1.0):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        d = channels
        self.W_Q = nn.Parameter(torch.randn(channels, d) / math.sqrt(channels))
        self.W_K = nn.Parameter(torch.randn(context_dim, d) / math.sqrt(context_dim))
        self.W_V = nn.Parameter(torch.randn(context_dim, d) / math.sqrt(context_dim))
        self.W_O = nn.Parameter(torch.randn(d, channels) / math.sqrt(d) * 0.5)
        self.lora_scale = lora_scale
        self.lora_enabled = True
        shapes = {"W_Q": (channels, d), "W_K": (context_dim, d), "W_V": (context_dim, d), "W_O": (d, channels)}
        self.lora_A = nn.ParameterDict()
        self.lora_B = nn.ParameterDict()
        for name, (i, o) in shapes.items():
            self.lora_A[name] = nn.Parameter(torch.randn(i, lora_rank) / math.sqrt(i))
            self.lora_B[name] = nn.Parameter(torch.zeros(lora_rank, o))

    def weights(self):
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V, "W_O": self.W_O}

    def lora_set(self):
        if not self.lora_enabled:
            return None
        return {k: LoRAResidual(self.lora_A[k], self.lora_B[k], self.lora_scale) for k in self.lora_A}

    def forward(self, x, context, key_mask=None):
        b, c, h, w = x.shape
        feats = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        # residual goes to the un-normalized input, not the normed queries
        delta = cross_attention(feats, context, self.weights(), self.lora_set(), self.heads, key_mask, residual=False)
        return x + delta.transpose(1, 2).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# Toy UNet


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ToyUNet(nn.Module):
    """Two-level UNet (full and half resolution) with skip connections.

    Cross-attention blocks sit at the full-resolution down path, the bottleneck and
    the full-resolution up path, so every level sees the ID-augmented context.
    Two fixed coordinate channels are appended to the input latent.
    """

    def __init__(
        self,
        latent_channels: int = 4,
        width: int = 32,
        context_dim: int = 32,
        heads: int = 4,
        lora_rank: int = 4,
        lora_scale: float = 1.0,
        coords: bool = True,
    ):
        super().__init__()
        temb = 4 * width
        self.width = width
        self.coords = coords
        self.time_mlp = nn.Sequential(nn.Linear(width, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(latent_channels + (2 if coords else 0), width, 3, padding=1)
        self.down_res = ResBlock(width, width, temb)
        self.down_attn = CrossAttentionBlock(width, context_dim, heads, lora_rank, lora_scale)
        self.downsample = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.mid_res1 = ResBlock(width, 2 * width, temb)
        self.mid_attn = CrossAttentionBlock(2 * width, context_dim, heads, lora_rank, lora_scale)
        self.mid_res2 = ResBlock(2 * width, 2 * width, temb)
        self.upsample = nn.Conv2d(2 * width, width, 3, padding=1)
        self.up_res = ResBlock(2 * width, width, temb)
        self.up_attn = CrossAttentionBlock(width, context_dim, heads, lora_rank, lora_scale)
        self.norm_out = nn.GroupNorm(_groups(width), width)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def attention_blocks(self) -> list[CrossAttentionBlock]:
        return [self.down_attn, self.mid_attn, self.up_attn]

    def set_lora_enabled(self, enabled: bool):
        for blk in self.attention_blocks():
            blk.lora_enabled = enabled

    def forward(self, x, t, context, key_mask=None):
        b, _, h, w = x.shape
        if self.coords:
            ys = torch.linspace(-1, 1, h, dtype=x.dtype)[:, None].expand(h, w)
            xs = torch.linspace(-1, 1, w, dtype=x.dtype)[None, :].expand(h, w)
            x = torch.cat([x, torch.stack([ys, xs]).expand(b, 2, h, w)], dim=1)
        t = torch.as_tensor(t).reshape(-1).expand(b)
        emb = self.time_mlp(timestep_embedding(t, self.width).to(x.dtype))
        h1 = self.conv_in(x)
        h1 = self.down_attn(self.down_res(h1, emb), context, key_mask)
        h2 = self.downsample(h1)
        h2 = self.mid_res2(self.mid_attn(self.mid_res1(h2, emb), context, key_mask), emb)
        u = self.upsample(F.interpolate(h2, size=h1.shape[-2:], mode="nearest"))
        u = self.up_attn(self.up_res(torch.cat([u, h1], dim=1), emb), context, key_mask)
        return self.conv_out(F.silu(self.norm_out(u)))


# ---------------------------------------------------------------------------
# Latent codec


class ToyAutoencoder:
    """Fixed linear codec: 2x2 area pooling + colour-to-latent map, decoder by pseudo-inverse + 2x nearest."""

    _basis = np.array(
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1 / 3, 1 / 3, 1 / 3]]
    )

    def __init__(self, latent_channels: int = 4, latent_size: int = 16, factor: int = 2):
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.factor = factor
        reps = -(-latent_channels // 4)
        self.A = np.tile(self._basis, (reps, 1))[:latent_channels] * 2.0
        self.A_pinv = np.linalg.pinv(self.A)

    @property
    def image_size(self) -> int:
        return self.latent_size * self.factor

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """HxWx3 image in [0,1] -> c x h x w latent."""
        small = area_resize(pixels, self.latent_size, self.latent_size) - 0.5
        return np.einsum("kc,hwc->khw", self.A, small)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        rgb = np.einsum("ck,khw->hwc", self.A_pinv, np.asarray(latent, dtype=np.float64)) + 0.5
        return np.clip(nearest_resize(rgb, self.image_size, self.image_size), 0.0, 1.0)


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Area voting: a latent cell is in the mask when at least half its pixels are."""
    return area_resize(np.asarray(mask, dtype=np.float64), h, w) >= 0.5


# ---------------------------------------------------------------------------
# Model bundle


@dataclass
class ModelConfig:
    feat_dim: int = 64
    embed_dim: int = 32
    latent_channels: int = 4
    latent_size: int = 16
    width: int = 64
    heads: int = 4
    lora_rank: int = 4
    lora_scale: float = 1.0
    compose_mode: str = "stacked"
    max_id_images: int = 16
    num_train_timesteps: int = 1000
    class_vocabulary: tuple[str, ...] = DEFAULT_CLASS_VOCAB

    def __post_init__(self):
        self.class_vocabulary = tuple(self.class_vocabulary)
        ComposeMode(self.compose_mode)


class IdentityDiffusion(nn.Module):
    """All parameters of the personalized generator: ID branch, composer and denoiser."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = IDEncoder(config.feat_dim, config.embed_dim)
            self.composer = nn.Linear(config.embed_dim, config.embed_dim)
            self.unet = ToyUNet(
                config.latent_channels, config.width, config.embed_dim, config.heads, config.lora_rank, config.lora_scale
            )
        self.schedule = NoiseSchedule(config.num_train_timesteps)
        self.codec = ToyAutoencoder(config.latent_channels, config.latent_size)

    # parameter groups -----------------------------------------------------
    def lora_parameters(self):
        return [p for n, p in self.named_parameters() if ".lora_" in n]

    def id_parameters(self):
        return list(self.encoder.parameters()) + list(self.composer.parameters())

    def base_parameters(self):
        return [p for n, p in self.unet.named_parameters() if ".lora_" not in n]

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {"lora": [], "projection": [], "fusion": [], "encoder_block": [], "composer": [], "base": []}
        for n, p in self.named_parameters():
            if ".lora_" in n:
                groups["lora"].append((n, p))
            elif n.startswith("encoder.projection"):
                groups["projection"].append((n, p))
            elif n.startswith("encoder.fusion"):
                groups["fusion"].append((n, p))
            elif n.startswith("encoder.tunable"):
                groups["encoder_block"].append((n, p))
            elif n.startswith("composer"):
                groups["composer"].append((n, p))
            else:
                groups["base"].append((n, p))
        return groups

    @property
    def dtype(self):
        return self.encoder.projection.weight.dtype

    # conditioning -----------------------------------------------------------
    def fused_embeddings(
        self, text: TextEmbedding, id_images: Sequence[IDImage], adapters: AdapterSet, seed: int = 0
    ) -> list[FusedEmbedding]:
        e = encode_id_images(id_images, adapters, self.encoder, seed)
        cls = torch.as_tensor(text.class_vector(), dtype=e.dtype)
        fused = fuse_with_class_vector(e, cls, self.encoder.fusion)
        return [FusedEmbedding(fused[i], im.source_id) for i, im in enumerate(id_images)]

    def id_context(
        self,
        text: TextEmbedding,
        id_images: Sequence[IDImage],
        adapters: AdapterSet,
        seed: int = 0,
        coefficients: Sequence[float] | None = None,
        mode: str | None = None,
    ) -> UpdatedTextEmbedding:
        fused = self.fused_embeddings(text, id_images, adapters, seed)
        if coefficients is not None:
            fused = apply_prompt_weights(fused, coefficients)
        s = compose(fused, mode or self.config.compose_mode, self.composer)
        return merge_into_text(text, s)

    def forward(self, x, t, context, key_mask=None):
        return self.unet(x, t, context, key_mask)


def pad_contexts(contexts: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack variable-length contexts into B x L_max x D with a validity mask."""
    lmax = max(c.shape[0] for c in contexts)
    d = contexts[0].shape[1]
    out = contexts[0].new_zeros((len(contexts), lmax, d))
    mask = torch.zeros((len(contexts), lmax), dtype=torch.bool)
    for i, c in enumerate(contexts):
        out[i, : c.shape[0]] = c
        mask[i, : c.shape[0]] = True
    return out, mask


# ---------------------------------------------------------------------------
# Noise prediction, guidance and sampling


@dataclass
class Latent:
    z: np.ndarray  # h x w x c
    timestep: int = 0


def predict_noise(latent: Latent, context: UpdatedTextEmbedding, model: IdentityDiffusion) -> np.ndarray:
    """Single-sample noise prediction in h x w x c layout."""
    if latent.z.ndim != 3 or latent.z.shape[2] != model.config.latent_channels:
        raise ValueError(f"latent must be h x w x {model.config.latent_channels}, got {latent.z.shape}")
    if not 0 <= latent.timestep < model.schedule.num_steps:
        raise ValueError(f"timestep {latent.timestep} out of range")
    x = torch.as_tensor(latent.z, dtype=model.dtype).permute(2, 0, 1)[None]
    ctx = context.matrix.to(model.dtype)[None]
    with torch.no_grad():
        eps = model(x, torch.tensor([latent.timestep]), ctx)
    return eps[0].permute(1, 2, 0).numpy()


def cfg_combine(cond, uncond, scale: float):
    if cond.shape != uncond.shape:
        raise ValueError(f"shape mismatch {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    return uncond + scale * (cond - uncond)


def delay_cutoff(total_steps: int, delay_ratio: float) -> int:
    if not 0.0 <= delay_ratio <= 1.0:
        raise ValueError(f"delay_ratio must be in [0, 1], got {delay_ratio}")
    return math.ceil(delay_ratio * total_steps)


def delayed_condition_select(step_index: int, total_steps: int, delay_ratio: float, t, t_star):
    """Plain text conditioning for the first ceil(ratio * total) steps, the ID-augmented one after."""
    cutoff = delay_cutoff(total_steps, delay_ratio)
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step {step_index} outside [0, {total_steps})")
    return t if step_index < cutoff else t_star


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 5.0
    delay_ratio: float = 0.2
    eta: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")
        delay_cutoff(self.steps, self.delay_ratio)


def ddim_timesteps(num_train: int, steps: int) -> np.ndarray:
    if steps > num_train:
        raise ValueError(f"{steps} sampling steps exceed {num_train} training steps")
    return (np.arange(steps) * (num_train // steps))[::-1].copy()


def ddim_step(x, eps, ab_t: float, ab_prev: float):
    x0 = (x - math.sqrt(1 - ab_t) * eps) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps, x0


def initial_noise(shape, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 0x5EED]).standard_normal(shape)


def ddim_sample(
    model: IdentityDiffusion,
    prompt_embeddings: tuple[UpdatedTextEmbedding, UpdatedTextEmbedding],
    null_context: UpdatedTextEmbedding,
    config: SamplerConfig,
    seed: int,
    x_T: np.ndarray | None = None,
) -> Latent:
    """Deterministic DDIM with classifier-free guidance and delayed subject conditioning.

    ``prompt_embeddings`` is (plain text t, ID-augmented t*).  The last step jumps to
    alpha_bar = 1, i.e. returns the x0 prediction.
    """
    c, s = model.config.latent_channels, model.config.latent_size
    x = torch.as_tensor(initial_noise((1, c, s, s), seed) if x_T is None else x_T, dtype=model.dtype)
    t_plain, t_star = prompt_embeddings
    null = null_context.matrix.to(model.dtype)[None]
    ab = model.schedule.alpha_bars
    ts = ddim_timesteps(model.schedule.num_steps, config.steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            ctx = delayed_condition_select(i, config.steps, config.delay_ratio, t_plain, t_star)
            tt = torch.tensor([int(t)])
            eps_c = model(x, tt, ctx.matrix.to(model.dtype)[None])
            eps_u = model(x, tt, null)
            eps = cfg_combine(eps_c, eps_u, config.cfg_scale)
            ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x, _ = ddim_step(x, eps, float(ab[t]), float(ab_prev))
    return Latent(x[0].permute(1, 2, 0).numpy(), 0)


def masked_diffusion_loss(pred, target, mask=None, use_mask: bool = False):
    """MSE over all cells, or over mask-true latent cells when ``use_mask``.

    ``pred``/``target``: (c, h, w) or (B, c, h, w); ``mask``: boolean (h, w) or (B, h, w)
    at latent resolution.  An empty mask falls back to the unmasked loss.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if not use_mask:
        return sq.mean()
    m = torch.as_tensor(np.asarray(mask, dtype=bool))
    if not bool(m.any()):
        log.warning("masked loss requested with an empty mask; using the unmasked loss")
        return sq.mean()
    m = m.unsqueeze(-3).expand_as(sq)
    return sq[m].mean()


# ---------------------------------------------------------------------------
# End-to-end generation


@dataclass
class Provenance:
    prompt: str
    n: int
    sources: list[str]
    weights: list[float]
    seed: int
    sampler: dict
    compose_mode: str
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def generate(
    prompt: str,
    id_images: Sequence[IDImage],
    config: SamplerConfig,
    adapters: AdapterSet,
    model: IdentityDiffusion,
    seed: int = 0,
    coefficients: Sequence[float] | None = None,
    mode: str | None = None,
) -> tuple[np.ndarray, Provenance]:
    """Encode, stack, merge and sample one image for ``prompt`` conditioned on ``id_images``."""
    if not id_images:
        raise InputError("generate needs at least one ID image")
    if len(id_images) > model.config.max_id_images:
        raise InputError(f"{len(id_images)} ID images exceed the configured maximum {model.config.max_id_images}")
    text = encode_text_with_class_span(prompt, model.config.class_vocabulary, adapters)
    with torch.no_grad():
        t_star = model.id_context(text, id_images, adapters, seed, coefficients, mode)
    t_plain = plain_context(text, t_star.matrix)
    null = plain_context(encode_null_text(adapters), t_star.matrix)
    latent = ddim_sample(model, (t_plain, t_star), null, config, seed)
    image = model.codec.decode(latent.z.transpose(2, 0, 1))
    weights = list(coefficients) if coefficients is not None else [1.0] * len(id_images)
    prov = Provenance(
        prompt=prompt,
        n=len(id_images),
        sources=[im.source_id for im in id_images],
        weights=[float(w) for w in weights],
        seed=seed,
        sampler=asdict(config),
        compose_mode=mode or model.config.compose_mode,
    )
    return image, prov


# ---------------------------------------------------------------------------
# Checkpoints


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, model: IdentityDiffusion, extra_arrays: Mapping[str, np.ndarray] | None = None, metadata=None):
    """Write a single .npz: parameter arrays under ``param/``, extras under ``extra/``, JSON under ``__metadata__``."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    meta = {
        "model": asdict(model.config),
        "schedule": model.schedule.to_dict(),
        "lora_ranks": {n: int(p.shape[1]) for n, p in model.named_parameters() if ".lora_A." in n},
        "dtype": str(model.dtype).replace("torch.", ""),
    }
    meta["config_hash"] = config_hash(meta["model"])
    meta.update(metadata or {})
    arrays["__metadata__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[IdentityDiffusion, dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path) as z:
        meta = json.loads(bytes(z["__metadata__"]).decode())
        params = {k[len("param/") :]: z[k] for k in z.files if k.startswith("param/")}
        extra = {k[len("extra/") :]: z[k] for k in z.files if k.startswith("extra/")}
    cfg = ModelConfig(**meta["model"])
    model = IdentityDiffusion(cfg)
    if meta.get("dtype") == "float64":
        model.double()
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})
    return model, meta, extra


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
