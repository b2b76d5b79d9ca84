"""Weak and strong input perturbations with recoverable provenance.

Every view is a deterministic function of ``(source features, aug_seed,
settings)``: its random stream is keyed on ``(aug_seed, source_id, kind)``,
so a view can be regenerated from its source example alone, and a batch
yields exactly the rows the single-example functions would.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Example
from .errors import ConfigurationError

WEAK, STRONG = "weak", "strong"
_KIND_TAG = {WEAK: 0, STRONG: 1}


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    mask_fraction: float = 0.2
    shift_pixels: int = 0

    def __post_init__(self):
        if self.weak_noise < 0 or self.strong_noise < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.strong_noise <= self.weak_noise and (self.strong_noise > 0 or self.mask_fraction > 0):
            raise ConfigurationError(
                f"strong_noise ({self.strong_noise}) must exceed weak_noise ({self.weak_noise})"
            )
        if not 0 <= self.mask_fraction < 1:
            raise ConfigurationError(f"mask_fraction must be in [0, 1), got {self.mask_fraction}")
        if self.shift_pixels < 0:
            raise ConfigurationError("shift_pixels must be non-negative")


@dataclass(frozen=True, eq=False)
class AugmentedView:
    source_id: int
    view: np.ndarray
    kind: str
    aug_seed: int
    scale: float
    mask_fraction: float = 0.0
    shift_pixels: int = 0
    image_shape: Optional[tuple[int, int]] = None


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _uniform_streams(seed: int, ids, kind: str, count: int) -> np.ndarray:
    """``(len(ids), count)`` uniforms in (0, 1).

    Row ``j`` is a splitmix64 stream keyed on ``(seed, ids[j], kind)`` and
    depends on nothing else, so batching never changes a view.
    """
    ids = np.asarray(ids, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        base = _mix(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
        key = _mix(_mix(base ^ ids) + np.uint64(_KIND_TAG[kind] + 1) * _GOLDEN)
        ctr = np.arange(1, count + 1, dtype=np.uint64) * _GOLDEN
        bits = _mix(key[:, None] + ctr[None, :])
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def _normals(u: np.ndarray, dim: int) -> np.ndarray:
    """Box-Muller on the first ``2*ceil(dim/2)`` columns of ``u``."""
    half = (dim + 1) // 2
    r = np.sqrt(-2.0 * np.log(u[:, :half]))
    theta = 2.0 * np.pi * u[:, half:2 * half]
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)], axis=1)[:, :dim]


def _shift(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(image)
    h, w = image.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = image[ys, xs]
    return out


def _weak_batch(ids, features, seed, noise_scale, shift_pixels, image_shape):
    n, dim = features.shape
    nz = 2 * ((dim + 1) // 2)
    u = _uniform_streams(seed, ids, WEAK, nz + 2)
    views = features + noise_scale * _normals(u, dim)
    if image_shape is not None and shift_pixels > 0:
        span = 2 * shift_pixels + 1
        offsets = np.minimum((u[:, nz:nz + 2] * span).astype(np.int64), span - 1) - shift_pixels
        for j in range(n):
            views[j] = _shift(views[j].reshape(image_shape), int(offsets[j, 0]), int(offsets[j, 1])).ravel()
    return views


def _strong_batch(ids, features, seed, strength, mask_fraction, image_shape):
    n, dim = features.shape
    nz = 2 * ((dim + 1) // 2)
    u = _uniform_streams(seed, ids, STRONG, nz + 2 + dim)
    views = features + strength * _normals(u, dim)
    if mask_fraction > 0:
        if image_shape is not None:
            h, w = image_shape
            bh = max(1, int(round(np.sqrt(mask_fraction) * h)))
            bw = max(1, int(round(np.sqrt(mask_fraction) * w)))
            tops = np.minimum((u[:, nz] * (h - bh + 1)).astype(np.int64), h - bh)
            lefts = np.minimum((u[:, nz + 1] * (w - bw + 1)).astype(np.int64), w - bw)
            imgs = views.reshape(n, h, w)
            for j in range(n):
                imgs[j, tops[j]:tops[j] + bh, lefts[j]:lefts[j] + bw] = 0.0
        else:
            n_mask = int(round(mask_fraction * dim))
            # the n_mask smallest uniforms pick a uniformly random coordinate subset
            masked = np.argsort(u[:, nz + 2:], axis=1, kind="stable")[:, :n_mask]
            np.put_along_axis(views, masked, 0.0, axis=1)
    return views


def weak_augment(x: Example, noise_scale: float, seed: int, *, shift_pixels: int = 0,
                 image_shape=None) -> AugmentedView:
    if noise_scale < 0:
        raise ConfigurationError("noise_scale must be non-negative")
    features = np.asarray(x.features, dtype=np.float64)[None, :]
    view = _weak_batch([x.id], features, seed, noise_scale, shift_pixels, image_shape)[0]
    return AugmentedView(x.id, view, WEAK, int(seed), noise_scale, 0.0, shift_pixels, image_shape)


def strong_augment(x: Example, strength: float, seed: int, *, mask_fraction: float = 0.0,
                   image_shape=None) -> AugmentedView:
    if strength < 0:
        raise ConfigurationError("strength must be non-negative")
    features = np.asarray(x.features, dtype=np.float64)[None, :]
    view = _strong_batch([x.id], features, seed, strength, mask_fraction, image_shape)[0]
    return AugmentedView(x.id, view, STRONG, int(seed), strength, mask_fraction, 0, image_shape)


def reaugment(view: AugmentedView, source: Example) -> np.ndarray:
    """Regenerate ``view`` from its resolved source example."""
    if source.id != view.source_id:
        raise ConfigurationError(f"source {source.id} does not match view of {view.source_id}")
    if view.kind == WEAK:
        again = weak_augment(source, view.scale, view.aug_seed,
                             shift_pixels=view.shift_pixels, image_shape=view.image_shape)
    else:
        again = strong_augment(source, view.scale, view.aug_seed,
                               mask_fraction=view.mask_fraction, image_shape=view.image_shape)
    return again.view


def augment_rows(ids, features, config: AugmentConfig, seed: int, image_shape=None,
                 strong: bool = True) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Weak (and optionally strong) views for a batch, stacked row-wise.

    Row ``j`` equals ``weak_augment(Example(ids[j], features[j]), ...).view``.
    """
    features = np.asarray(features, dtype=np.float64)
    features = features.reshape(len(ids), features.shape[-1])
    weak_views = _weak_batch(ids, features, seed, config.weak_noise, config.shift_pixels, image_shape)
    strong_views = (_strong_batch(ids, features, seed, config.strong_noise, config.mask_fraction, image_shape)
                    if strong else None)
    return weak_views, strong_views
