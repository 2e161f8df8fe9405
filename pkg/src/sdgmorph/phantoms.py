"""Synthetic three-class brain phantoms with controllable scanner-style shift.

A phantom is an ellipsoidal brain: a bright outer shell, darker interior
tissue and an empty central ventricle. Class drives morphology (ventricle
size, shell thickness, global atrophy of the brain envelope); the domain
drives appearance (gain, bias field, noise, blur).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import ndimage

from .tensor import ContractError

NC, MCI, AD = 0, 1, 2
CLASS_NAMES = ("NC", "MCI", "AD")

# class counts of the source and the two target cohorts
NACC_COUNTS = (2524, 1175, 948)
ADNI_COUNTS = (684, 572, 317)
AIBL_COUNTS = (465, 101, 68)

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (output, next state)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), state


def derive_seed(*keys: int) -> int:
    """Fold integer keys through SplitMix64 into one 64-bit seed."""
    state = 0
    out = 0
    for key in keys:
        state ^= int(key) & MASK64
        out, state = splitmix64(state)
    return out


@dataclass(frozen=True)
class DomainSpec:
    gain: float = 1.0
    bias: float = 0.0
    noise: float = 0.0
    blur: int = 0
    domain_id: int = 0

    def __post_init__(self):
        if self.gain <= 0:
            raise ContractError(f"gain must be positive, got {self.gain}")
        if not 0 <= self.bias <= 0.3:
            raise ContractError(f"bias amplitude {self.bias} outside [0, 0.3]")
        if not 0 <= self.noise <= 10:
            raise ContractError(f"noise sigma {self.noise} outside [0, 10]")
        if self.blur not in (0, 1, 2):
            raise ContractError(f"blur radius {self.blur} not in {{0, 1, 2}}")


SOURCE = DomainSpec(domain_id=0)
TARGET_A = DomainSpec(gain=1.15, bias=0.2, noise=5.0, blur=1, domain_id=1)
TARGET_B = DomainSpec(gain=0.85, bias=0.1, noise=8.0, blur=2, domain_id=2)


@dataclass(frozen=True)
class PhantomShape:
    """Morphology constants. ``nc``/``ad`` tuples are
    (ventricle fraction, shell thickness fraction, envelope atrophy)."""

    brain_axes: tuple = (0.80, 0.86, 0.92)  # fractions of the half-extent per axis
    nc: tuple = (0.10, 0.15, 0.0)
    ad: tuple = (0.25, 0.08, 0.08)
    jitter: float = 0.15
    shell_intensity: float = 180.0
    tissue_intensity: float = 120.0
    intensity_jitter: float = 0.05
    centre_jitter: float = 0.5


@dataclass
class LabeledSample:
    volume: np.ndarray
    label: int
    domain: int = 0

    def __post_init__(self):
        if self.label not in (NC, MCI, AD):
            raise ContractError(f"label must be 0, 1 or 2, got {self.label}")


def _class_fractions(label: int, shape: PhantomShape, rng: np.random.Generator):
    nc, ad = np.array(shape.nc), np.array(shape.ad)
    if label == NC:
        base = nc
    elif label == AD:
        base = ad
    else:
        base = nc + rng.uniform() * (ad - nc)
    return base * (1.0 + rng.uniform(-shape.jitter, shape.jitter, size=3))


def _bias_field(dims, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # linear ramp plus a mild quadratic bowl, zero-mean with peak magnitude 1
    # on the foreground so the field perturbs contrast but not mean brightness
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in dims], indexing="ij")
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    field = sum(ui * g for ui, g in zip(u, grids)) / np.sqrt(3)
    field = field + 0.5 * sum(g * g for g in grids) / 3.0
    if mask.any():
        field = field - field[mask].mean()
        return field / max(np.abs(field[mask]).max(), 1e-12)
    return np.zeros(dims)


def _blur_foreground(x: np.ndarray, mask: np.ndarray, radius: int) -> np.ndarray:
    m = mask.astype(np.float64)
    for _ in range(radius):
        num = ndimage.uniform_filter(x * m, size=3, mode="constant")
        den = ndimage.uniform_filter(m, size=3, mode="constant")
        x = np.where(mask, num / np.where(den > 0, den, 1.0), 0.0)
    return x


def apply_domain(volume: np.ndarray, mask: np.ndarray, domain: DomainSpec,
                 rng: np.random.Generator) -> np.ndarray:
    x = volume * domain.gain
    if domain.bias:
        x = x * (1.0 + domain.bias * _bias_field(volume.shape, mask, rng))
    if domain.noise:
        x = x + rng.normal(0.0, domain.noise, size=x.shape)
    if domain.blur:
        x = _blur_foreground(x, mask, domain.blur)
    x = np.clip(x, 0.0, 255.0)
    return np.where(mask, x, 0.0)


def generate_phantom(label: int, domain: DomainSpec, dims, rng: np.random.Generator,
                     shape: PhantomShape = PhantomShape()) -> LabeledSample:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ContractError(f"phantom dims must be three extents >= 8, got {dims}")
    if label not in (NC, MCI, AD):
        raise ContractError(f"label must be 0, 1 or 2, got {label}")
    ventricle, thickness, atrophy = _class_fractions(label, shape, rng)
    centre = (np.array(dims) - 1) / 2.0 + rng.uniform(-shape.centre_jitter, shape.centre_jitter, 3)
    axes = np.array(shape.brain_axes) * np.array(dims) / 2.0 * (1.0 - atrophy)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    r = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, axes)))
    brain = r <= 1.0
    cavity = r <= ventricle
    inner = r <= 1.0 - thickness
    level = 1.0 + rng.uniform(-shape.intensity_jitter, shape.intensity_jitter)
    vol = np.where(inner, shape.tissue_intensity, shape.shell_intensity) * level
    mask = brain & ~cavity
    vol = np.where(mask, vol, 0.0)
    vol = apply_domain(vol, mask, domain, rng)
    return LabeledSample(vol, int(label), domain.domain_id)


def proportional_counts(ratios: Sequence[int], total: int) -> tuple:
    """Largest-remainder apportionment of ``total`` by ``ratios``."""
    ratios = [Fraction(int(r)) for r in ratios]
    s = sum(ratios)
    quotas = [r * total / s for r in ratios]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


@dataclass(frozen=True)
class DataConfig:
    dims: tuple = (16, 16, 16)
    source_total: int = 300
    target_total: int = 150
    seed: int = 42
    shape: PhantomShape = field(default_factory=PhantomShape)


def generate_set(counts, domain: DomainSpec, cfg: DataConfig) -> list:
    samples = []
    index = 0
    for label, n in enumerate(counts):
        for _ in range(n):
            rng = np.random.default_rng(derive_seed(cfg.seed, domain.domain_id, index))
            samples.append(generate_phantom(label, domain, cfg.dims, rng, cfg.shape))
            index += 1
    return samples


def make_datasets(cfg: DataConfig) -> tuple:
    """Source set plus ``{domain_id: samples}`` for the two targets."""
    source_counts = proportional_counts(NACC_COUNTS, cfg.source_total)
    a_counts = proportional_counts(ADNI_COUNTS, cfg.target_total)
    b_counts = proportional_counts(AIBL_COUNTS, cfg.target_total)
    for name, counts in (("source", source_counts), ("target A", a_counts), ("target B", b_counts)):
        if min(counts) < 1:
            raise ContractError(f"{name} needs >= 1 sample per class, got {counts}")
    source = generate_set(source_counts, SOURCE, cfg)
    targets = {TARGET_A.domain_id: generate_set(a_counts, TARGET_A, cfg),
               TARGET_B.domain_id: generate_set(b_counts, TARGET_B, cfg)}
    return source, targets


def split_80_20(samples: list, rng: np.random.Generator, train_fraction=Fraction(4, 5)):
    """Stratified split; per-class train sizes by largest remainder."""
    if len(samples) < 5:
        raise ContractError(f"need at least 5 samples to split, got {len(samples)}")
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    labels = sorted(by_class)
    for c in labels:
        if len(by_class[c]) < 2:
            raise ContractError(f"class {c} has {len(by_class[c])} sample(s); need >= 2")
    sizes = [len(by_class[c]) for c in labels]
    total_train = int(Fraction(len(samples)) * train_fraction + Fraction(1, 2))
    quotas = [Fraction(n) * train_fraction for n in sizes]
    train_counts = [int(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - train_counts[i]), i))
    for i in order[: total_train - sum(train_counts)]:
        train_counts[i] += 1
    # keep at least one sample of each class on both sides
    train_counts = [min(max(t, 1), n - 1) for t, n in zip(train_counts, sizes)]
    train_idx, val_idx = [], []
    for c, n_train in zip(labels, train_counts):
        idx = list(by_class[c])
        perm = rng.permutation(len(idx))
        idx = [idx[j] for j in perm]
        train_idx += idx[:n_train]
        val_idx += idx[n_train:]
    train_idx.sort()
    val_idx.sort()
    return [samples[i] for i in train_idx], [samples[i] for i in val_idx]


def foreground_fraction(volume: np.ndarray) -> float:
    return float(np.count_nonzero(volume)) / volume.size
