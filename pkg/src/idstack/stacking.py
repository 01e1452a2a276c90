"""Stacked ID embedding: composition, prompt weighting, identity-mixing pools and merging into text."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .encoders import ConfigurationError, IDImage, InputError, TextEmbedding
from .imaging import rng_for


@dataclass
class FusedEmbedding:
    vector: torch.Tensor
    source_id: str = ""
    weight: float = 1.0


@dataclass
class StackedIDEmbedding:
    matrix: torch.Tensor
    sources: list[str]

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass
class UpdatedTextEmbedding:
    """Text rows with the class-word span replaced by the ID rows.

    ``provenance[k]`` is ``("text", original_index)`` or ``("id", stack_row)``.
    """

    matrix: torch.Tensor
    provenance: list[tuple[str, int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]


class ComposeMode(str, enum.Enum):
    AVERAGE = "average"
    LINEAR = "linear"
    STACKED = "stacked"


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=like.dtype if like is not None else torch.float64)


def stack(fused: Sequence[FusedEmbedding]) -> StackedIDEmbedding:
    """Concatenate fused embeddings along the length axis, each row scaled by its weight."""
    if not fused:
        raise InputError("cannot stack an empty list of embeddings")
    vecs = [_as_tensor(f.vector) for f in fused]
    dim = vecs[0].shape[-1]
    if any(v.shape != (dim,) for v in vecs):
        raise InputError("fused embeddings must all be D-vectors of one dimension")
    rows = [v if f.weight == 1.0 else v * f.weight for v, f in zip(vecs, fused)]
    return StackedIDEmbedding(torch.stack(rows), [f.source_id for f in fused])


def compose(
    fused: Sequence[FusedEmbedding],
    mode: ComposeMode | str = ComposeMode.STACKED,
    linear_weights: nn.Linear | None = None,
) -> StackedIDEmbedding:
    """Compose per-image embeddings into the ID rows used for conditioning.

    ``average`` and ``linear`` both return a single row; ``linear`` applies a shared
    D->D map to the weighted mean so any number of inputs is accepted.
    """
    mode = ComposeMode(mode)
    if mode is ComposeMode.STACKED:
        return stack(fused)
    if mode is ComposeMode.LINEAR and linear_weights is None:
        raise ConfigurationError("linear composing needs a trained D->D projection")
    s = stack(fused)
    mean = s.matrix.mean(dim=0, keepdim=True)
    if mode is ComposeMode.LINEAR:
        mean = linear_weights(mean)
    return StackedIDEmbedding(mean, ["+".join(dict.fromkeys(s.sources))])


def apply_prompt_weights(fused: Sequence[FusedEmbedding], coefficients: Sequence[float]) -> list[FusedEmbedding]:
    if len(fused) != len(coefficients):
        raise InputError(f"{len(fused)} embeddings but {len(coefficients)} coefficients")
    if any(c < 0 for c in coefficients):
        raise InputError("prompt-weight coefficients must be nonnegative")
    return [FusedEmbedding(f.vector, f.source_id, f.weight * float(c)) for f, c in zip(fused, coefficients)]


def weights_by_source(fused: Sequence[FusedEmbedding], per_id: Mapping[str, float]) -> list[float]:
    """Coefficient list for :func:`apply_prompt_weights` from an ``{id: coefficient}`` map (default 1)."""
    return [float(per_id.get(f.source_id, 1.0)) for f in fused]


def build_mixing_pool(
    groups: Mapping[str, Sequence[IDImage]],
    proportions: Mapping[str, int],
    seed: int = 0,
) -> list[IDImage]:
    """Select exactly ``proportions[id]`` images per identity and interleave them round-robin."""
    picks = {}
    for ident in sorted(proportions):
        count = int(proportions[ident])
        if count < 0:
            raise InputError(f"negative count for {ident!r}")
        if count == 0:
            continue
        available = groups.get(ident, ())
        if count > len(available):
            raise InputError(f"requested {count} images of {ident!r} but only {len(available)} available")
        idx = rng_for("mixing-pool", seed, ident).permutation(len(available))[:count]
        picks[ident] = [available[i] for i in sorted(idx)]
    # most-represented identities lead each round so proportions stay spread out
    order = sorted(picks, key=lambda k: (-len(picks[k]), k))
    pool = []
    for r in range(max((len(v) for v in picks.values()), default=0)):
        pool.extend(picks[k][r] for k in order if r < len(picks[k]))
    return pool


def merge_into_text(t: TextEmbedding, s: StackedIDEmbedding) -> UpdatedTextEmbedding:
    """Replace the class-word span of ``t`` with the rows of ``s``: L - span_len + N rows."""
    if t.class_span is None:
        raise InputError("text embedding has no class span to replace")
    a, b = t.class_span
    length = t.matrix.shape[0]
    if not (0 <= a < b <= length):
        raise InputError(f"class span {t.class_span} out of bounds for length {length}")
    text = _as_tensor(t.matrix, s.matrix)
    if text.shape[1] != s.matrix.shape[1]:
        raise InputError(f"text dim {text.shape[1]} != ID dim {s.matrix.shape[1]}")
    matrix = torch.cat([text[:a], s.matrix.to(text.dtype), text[b:]], dim=0)
    prov = [("text", i) for i in range(a)] + [("id", j) for j in range(s.n)] + [("text", i) for i in range(b, length)]
    return UpdatedTextEmbedding(matrix, prov)


def plain_context(t: TextEmbedding, like: torch.Tensor | None = None) -> UpdatedTextEmbedding:
    """Wrap an unmodified text embedding (null text, or the delayed-conditioning phase)."""
    return UpdatedTextEmbedding(_as_tensor(t.matrix, like), [("text", i) for i in range(t.matrix.shape[0])])
