"""Learnable pseudo-dilation and pseudo-erosion.

Each layer convolves a single-channel volume with a bank of ``k**3`` kernels
(``k`` drawn from {3, 5} per layer and call), reshapes the response to
``[B, 1, k**3, D, H, W]`` and takes the max (dilation) or min (erosion) over
the kernel-channel axis. With one-hot kernels (channel ``c`` picks the
``c``-th neighbour offset) a layer is exactly flat morphology on the
foreground.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tape, Var

log = logging.getLogger(__name__)

KERNEL_SIZES = (3, 5)
MODES = ("dilation", "erosion")


class EmptyForegroundWarning(UserWarning):
    """A sample had no foreground voxels; it was passed through unchanged."""


@dataclass
class PseudoMorphParams:
    """Kernel banks for one augmenter.

    ``layers[l][k]`` has shape ``[k**3, 1, k, k, k]``; entries are ndarrays
    for storage or :class:`Var` once bound to a tape.
    """

    mode: str
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    def bind(self, tape: Tape, requires_grad: bool = True) -> "PseudoMorphParams":
        return PseudoMorphParams(self.mode, [
            {k: (b if isinstance(b, Var) else tape.leaf(b, requires_grad)) for k, b in layer.items()}
            for layer in self.layers])

    def named_arrays(self, prefix: str) -> dict:
        return {f"{prefix}.{i}.k{k}": np.asarray(b.value if isinstance(b, Var) else b)
                for i, layer in enumerate(self.layers) for k, b in sorted(layer.items())}


def one_hot_bank(k: int) -> np.ndarray:
    """Bank whose channel ``c`` is 1 at the ``c``-th offset in raster order."""
    bank = np.zeros((k ** 3, 1, k, k, k))
    bank.reshape(k ** 3, k ** 3)[np.arange(k ** 3), np.arange(k ** 3)] = 1.0
    return bank


def init_pseudo_morph(mode: str, n_layers: int, rng: np.random.Generator,
                      sigma: float = 0.01) -> PseudoMorphParams:
    layers = []
    for _ in range(n_layers):
        layer = {}
        for k in KERNEL_SIZES:
            bank = one_hot_bank(k)
            if sigma:
                bank = bank + rng.normal(0.0, sigma, size=bank.shape)
            layer[k] = bank
        layers.append(layer)
    return PseudoMorphParams(mode, layers)


def foreground_mask(x) -> np.ndarray:
    """Indicator of nonzero voxels (a constant; never differentiated)."""
    v = x.value if isinstance(x, Var) else np.asarray(x)
    return (v != 0).astype(np.float64)


def sample_kernel_size(rng: np.random.Generator) -> int:
    """3 or 5 with equal probability from exactly one uniform draw."""
    return 3 if rng.random() < 0.5 else 5


def _check_input(x: Var):
    if x.value.ndim != 5 or x.shape[1] != 1:
        raise ContractError(f"expected [B, 1, D, H, W], got {x.shape}")


def _dilate_layer(x: Var, bank: Var, k: int) -> Var:
    B, _, D, H, W = x.shape
    mask = foreground_mask(x)
    y = T.conv3d_same(x, bank)
    y = T.reduce_extreme(T.reshape(y, (B, 1, k ** 3, D, H, W)), 2, "max")
    return T.mul(y, mask)


def _erode_layer(x: Var, bank: Var, k: int) -> Var:
    B, _, D, H, W = x.shape
    tape = x.tape
    mask = foreground_mask(x)
    # Background and out-of-volume samples are replaced by the per-sample
    # foreground maximum c so they can never win the minimum:
    #   conv(x_filled) == conv((x - c) * M) + c * sum(kernel)
    # c is differentiable: with non-one-hot kernels the output depends on it.
    exclude = np.zeros(x.shape)
    for b in range(B):
        if mask[b].any():
            exclude[b][mask[b] == 0] = -np.inf
        else:
            warnings.warn(f"sample {b} has no foreground; left unchanged",
                          EmptyForegroundWarning, stacklevel=3)
    candidates = T.reshape(T.add(x, tape.constant(exclude)), (B, -1))
    fill = T.reshape(T.reduce_extreme(candidates, 1, "max"), (B, 1))
    shifted = T.mul(T.sub(x, T.broadcast_to(T.reshape(fill, (B, 1, 1, 1, 1)), x.shape)), mask)
    y = T.conv3d_same(shifted, bank)
    kernel_sums = T.reshape(T.sum(T.reshape(bank, (k ** 3, k ** 3)), axis=1), (1, k ** 3))
    offset = T.matmul(fill, kernel_sums)
    y = T.add(y, T.broadcast_to(T.reshape(offset, (B, k ** 3, 1, 1, 1)), y.shape))
    y = T.reduce_extreme(T.reshape(y, (B, 1, k ** 3, D, H, W)), 2, "min")
    return T.mul(y, mask)


def _apply(params: PseudoMorphParams, x: Var, rng: np.random.Generator, layer_fn) -> Var:
    _check_input(x)
    params = params.bind(x.tape)
    for layer in params.layers:
        k = sample_kernel_size(rng)
        x = layer_fn(x, layer[k], k)
    return x


def pseudo_dilate(params: PseudoMorphParams, x: Var, rng: np.random.Generator) -> Var:
    """Learnable dilation of ``x`` [B, 1, D, H, W]; zero voxels stay zero."""
    if params.mode != "dilation":
        raise ContractError(f"pseudo_dilate needs dilation params, got {params.mode}")
    return _apply(params, x, rng, _dilate_layer)


def pseudo_erode(params: PseudoMorphParams, x: Var, rng: np.random.Generator) -> Var:
    """Learnable erosion of ``x`` [B, 1, D, H, W]; background is masked out of
    the minimum and zero voxels stay zero."""
    if params.mode != "erosion":
        raise ContractError(f"pseudo_erode needs erosion params, got {params.mode}")
    return _apply(params, x, rng, _erode_layer)


def apply_to_array(params: PseudoMorphParams, volume: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Run an augmenter on a plain [D, H, W] or [B, 1, D, H, W] array."""
    volume = np.asarray(volume, dtype=np.float64)
    squeeze = volume.ndim == 3
    tape = Tape()
    x = tape.constant(volume[None, None] if squeeze else volume)
    fn = pseudo_dilate if params.mode == "dilation" else pseudo_erode
    out = fn(params, x, rng).value
    return out[0, 0] if squeeze else out
