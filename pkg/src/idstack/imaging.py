"""Small numeric helpers shared by the adapters, the data pipeline and metrics."""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np


def stable_seed(*parts) -> int:
    """Map arbitrary printable parts to a 63-bit integer, stable across runs and platforms."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_seed(*parts))


@lru_cache(maxsize=256)
def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Row i averages the input interval [i*n_in/n_out, (i+1)*n_in/n_out) with exact overlap weights.
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
        m[i] /= hi - lo
    m.setflags(write=False)
    return m


def area_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resampling of an HxW or HxWxC array (float output)."""
    img = np.asarray(img, dtype=np.float64)
    rh = _area_matrix(img.shape[0], out_h)
    rw = _area_matrix(img.shape[1], out_w)
    if img.ndim == 2:
        return rh @ img @ rw.T
    rows = np.tensordot(rh, img, axes=(1, 0))  # out_h x W x C
    return np.einsum("jw,iwc->ijc", rw, rows)


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    img = np.asarray(img)
    rows = np.minimum((np.arange(out_h) + 0.5) * img.shape[0] / out_h, img.shape[0] - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * img.shape[1] / out_w, img.shape[1] - 1).astype(int)
    return img[rows][:, cols]


def to_float_image(img) -> np.ndarray:
    """uint8 or float image -> float64 HxWx3 in [0, 1]."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3]


def to_uint8_image(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def orthonormal_columns(rows: int, cols: int, seed: int) -> np.ndarray:
    """rows x cols matrix with orthonormal columns (rows >= cols), fixed by seed."""
    g = np.random.default_rng(seed).standard_normal((rows, cols))
    q, r = np.linalg.qr(g)
    # sign fix makes the factorization unique
    return q * np.sign(np.diag(r))


def unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
