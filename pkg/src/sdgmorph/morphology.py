"""Flat grayscale dilation and erosion with a cubic structuring element.

Samples outside the volume are ignored (-inf padding for dilation, +inf for
erosion). Two implementations are provided: a brute-force neighbourhood scan
used as the reference, and a separable van Herk / Gil-Werman path that costs
three running-extreme passes per voxel regardless of ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class StructuringElement:
    """k x k x k cube centred on the origin."""

    k: int

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1 or self.k % 2 == 0:
            raise ContractError(f"structuring element size must be odd and >= 1, got {self.k}")

    @property
    def radius(self) -> int:
        return (self.k - 1) // 2


def _as_se(se) -> StructuringElement:
    return se if isinstance(se, StructuringElement) else StructuringElement(int(se))


def _validate(volume: np.ndarray, se: StructuringElement) -> np.ndarray:
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3:
        raise ContractError(f"expected a [D, H, W] volume, got shape {volume.shape}")
    if se.k > 2 * min(volume.shape) - 1:
        raise ContractError(f"k={se.k} too large for volume {volume.shape}")
    return volume


def _scan(volume: np.ndarray, se: StructuringElement, reducer, pad_value) -> np.ndarray:
    r = se.radius
    D, H, W = volume.shape
    padded = np.pad(volume, r, constant_values=pad_value)
    out = np.full(volume.shape, pad_value)
    for dz in range(se.k):
        for dy in range(se.k):
            for dx in range(se.k):
                reducer(out, padded[dz:dz + D, dy:dy + H, dx:dx + W], out=out)
    return out


def dilate_bruteforce(volume, se) -> np.ndarray:
    se = _as_se(se)
    return _scan(_validate(volume, se), se, np.maximum, -np.inf)


def erode_bruteforce(volume, se) -> np.ndarray:
    se = _as_se(se)
    return _scan(_validate(volume, se), se, np.minimum, np.inf)


def running_extreme_1d(a: np.ndarray, k: int, axis: int, mode: str = "max") -> np.ndarray:
    """Centred sliding-window max/min of odd width ``k`` along ``axis``.

    van Herk / Gil-Werman: split the padded line into blocks of ``k``, take
    prefix extremes forward and suffix extremes backward inside each block;
    any window then straddles at most two blocks, so its extreme is
    ``op(suffix[i], prefix[i + k - 1])``.
    """
    if k == 1:
        return np.array(a, dtype=np.float64)
    if mode == "max":
        op, pad_value = np.maximum, -np.inf
    elif mode == "min":
        op, pad_value = np.minimum, np.inf
    else:
        raise ContractError(f"unknown mode {mode!r}")
    r = (k - 1) // 2
    line = np.moveaxis(np.asarray(a, dtype=np.float64), axis, -1)
    n = line.shape[-1]
    length = n + 2 * r
    nblocks = -(-length // k)
    extra = nblocks * k - length
    padded = np.pad(line, [(0, 0)] * (line.ndim - 1) + [(r, r + extra)],
                    constant_values=pad_value)
    blocks = padded.reshape(line.shape[:-1] + (nblocks, k))
    prefix = op.accumulate(blocks, axis=-1).reshape(padded.shape)
    suffix = op.accumulate(blocks[..., ::-1], axis=-1)[..., ::-1].reshape(padded.shape)
    out = op(suffix[..., :n], prefix[..., k - 1:k - 1 + n])
    return np.moveaxis(out, -1, axis)


def _separable(volume, se, mode):
    out = volume
    for axis in range(3):
        out = running_extreme_1d(out, se.k, axis, mode)
    return out


def dilate_flat(volume, se) -> np.ndarray:
    """Neighbourhood maximum over the cube of side ``se``."""
    se = _as_se(se)
    return _separable(_validate(volume, se), se, "max")


def erode_flat(volume, se) -> np.ndarray:
    """Neighbourhood minimum over the cube of side ``se``."""
    se = _as_se(se)
    return _separable(_validate(volume, se), se, "min")
