"""Class-specific non-morphological augmentations for MCI volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import ContractError

MAX_SHIFT = 2
SCALE_RANGE = (0.95, 1.05)
CONTRAST_RANGE = (0.9, 1.1)
CUTMIX_FRACTION = (0.2, 0.5)


@dataclass(frozen=True)
class AffineParams:
    translation: tuple = (0, 0, 0)  # (tx, ty, tz) voxels; x is the last array axis
    scale: float = 1.0
    contrast: float = 1.0

    def validate(self, max_shift=MAX_SHIFT, scale_range=SCALE_RANGE,
                 contrast_range=CONTRAST_RANGE):
        t = self.translation
        if len(t) != 3 or any(int(v) != v or abs(v) > max_shift for v in t):
            raise ContractError(f"translation {t} must be integers within +-{max_shift}")
        if not scale_range[0] <= self.scale <= scale_range[1]:
            raise ContractError(f"scale {self.scale} outside {scale_range}")
        if not contrast_range[0] <= self.contrast <= contrast_range[1]:
            raise ContractError(f"contrast {self.contrast} outside {contrast_range}")


def sample_affine(rng: np.random.Generator, max_shift=MAX_SHIFT, scale_range=SCALE_RANGE,
                  contrast_range=CONTRAST_RANGE) -> AffineParams:
    t = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=3))
    return AffineParams(t, float(rng.uniform(*scale_range)), float(rng.uniform(*contrast_range)))


def _shift(x: np.ndarray, translation) -> np.ndarray:
    tx, ty, tz = (int(v) for v in translation)
    out = np.zeros_like(x)
    src, dst = [], []
    for t, n in zip((tz, ty, tx), x.shape):
        if abs(t) >= n:
            return out
        src.append(slice(max(0, -t), n - max(0, t)))
        dst.append(slice(max(0, t), n - max(0, -t)))
    out[tuple(dst)] = x[tuple(src)]
    return out


def _rescale(x: np.ndarray, s: float) -> np.ndarray:
    # output voxel p samples the input at centre + (p - centre) / s
    centre = (np.array(x.shape) - 1) / 2.0
    matrix = np.diag(np.full(3, 1.0 / s))
    offset = centre - centre / s
    return ndimage.affine_transform(x, matrix, offset=offset, order=1,
                                    mode="constant", cval=0.0)


def affine_mci(x: np.ndarray, p: AffineParams, **ranges) -> np.ndarray:
    """Integer shift, isotropic trilinear rescale and foreground contrast change.

    Out-of-volume samples fill with zero; the result is clamped to [0, 255].
    """
    p.validate(**ranges)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"expected [D, H, W], got {x.shape}")
    out = x.copy()
    if any(p.translation):
        out = _shift(out, p.translation)
    if p.scale != 1.0:
        out = _rescale(out, p.scale)
    if p.contrast != 1.0:
        fg = out != 0
        if fg.any():
            m = out[fg].mean()
            out[fg] = m + p.contrast * (out[fg] - m)
    return np.clip(out, 0.0, 255.0)


@dataclass(frozen=True)
class CutMixRegion:
    corner: tuple  # (z0, y0, x0) in array-axis order
    size: tuple    # (dz, dy, dx)

    def slices(self) -> tuple:
        return tuple(slice(c, c + s) for c, s in zip(self.corner, self.size))

    def validate(self, shape):
        if any(c < 0 or s < 0 or c + s > n for c, s, n in zip(self.corner, self.size, shape)):
            raise ContractError(f"region {self} does not fit inside {shape}")


def sample_region(shape, rng: np.random.Generator, fraction=CUTMIX_FRACTION) -> CutMixRegion:
    sizes, corners = [], []
    for n in shape:
        lo = max(1, math.ceil(fraction[0] * n))
        hi = max(lo, math.floor(fraction[1] * n))
        s = int(rng.integers(lo, hi + 1))
        sizes.append(s)
        corners.append(int(rng.integers(0, n - s + 1)))
    return CutMixRegion(tuple(corners), tuple(sizes))


def cutmix3d(xa: np.ndarray, xb: np.ndarray, rng: np.random.Generator = None,
             region: CutMixRegion = None, fraction=CUTMIX_FRACTION) -> np.ndarray:
    """Copy of ``xa`` with one axis-aligned box taken from ``xb``.

    Both inputs share a label, so the label is not mixed.
    """
    xa, xb = np.asarray(xa, dtype=np.float64), np.asarray(xb, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ContractError(f"cutmix shape mismatch {xa.shape} vs {xb.shape}")
    if region is None:
        if rng is None:
            raise ContractError("cutmix3d needs an rng or an explicit region")
        region = sample_region(xa.shape, rng, fraction)
    region.validate(xa.shape)
    out = xa.copy()
    out[region.slices()] = xb[region.slices()]
    return out
