"""Desk-scale 3-D encoder, projection head and classifier.

Parameters live in a flat ``dict[str, ndarray]``:

* ``enc.{i}.conv{j}.w`` / ``.b`` -- block ``i``, conv ``j`` (k=3)
* ``proj.w`` [E, F, 1, 1, 1] / ``proj.b`` [E]
* ``cls.w`` [3, F] / ``cls.b`` [3]
* ``dil.{l}.k{k}`` / ``ero.{l}.k{k}`` -- pseudo-morphological kernel banks
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .pseudo_morph import PseudoMorphParams, init_pseudo_morph
from .tensor import ContractError, Tape, Var

NUM_CLASSES = 3
# volumes are stored on the [0, 255] scale
INPUT_SCALE = 1.0 / 255.0


@dataclass(frozen=True)
class ModelSpec:
    channels: tuple = (8, 16, 32)
    embed_dim: int = 64
    pm_layers: int = 2
    pm_sigma: float = 0.01

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ContractError(f"channels must be positive, got {self.channels}")
        if any(b != 2 * a for a, b in zip(self.channels, self.channels[1:])):
            raise ContractError(f"channel counts must double per block, got {self.channels}")
        if self.embed_dim < 1 or self.pm_layers < 0 or self.pm_sigma < 0:
            raise ContractError(f"invalid model spec {self}")

    @property
    def features(self) -> int:
        return self.channels[-1]

    def check_input(self, shape):
        factor = 2 ** len(self.channels)
        if any(d % factor for d in shape[-3:]):
            raise ContractError(f"spatial dims {tuple(shape[-3:])} not divisible by {factor}")


def init_params(spec: ModelSpec, rng: np.random.Generator) -> dict:
    """He-normal conv/linear weights, zero biases, near one-hot morphology banks."""
    params = {}
    cin = 1
    for i, c in enumerate(spec.channels):
        for j in range(2):
            fan_in = cin * 27
            params[f"enc.{i}.conv{j}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c, cin, 3, 3, 3))
            params[f"enc.{i}.conv{j}.b"] = np.zeros(c)
            cin = c
    F = spec.features
    params["proj.w"] = rng.normal(0.0, np.sqrt(2.0 / F), (spec.embed_dim, F, 1, 1, 1))
    params["proj.b"] = np.zeros(spec.embed_dim)
    params["cls.w"] = rng.normal(0.0, np.sqrt(2.0 / F), (NUM_CLASSES, F))
    params["cls.b"] = np.zeros(NUM_CLASSES)
    for prefix, mode in (("dil", "dilation"), ("ero", "erosion")):
        pm = init_pseudo_morph(mode, spec.pm_layers, rng, spec.pm_sigma)
        params.update(pm.named_arrays(prefix))
    return params


def spec_from_params(params: dict) -> ModelSpec:
    """Recover the architecture from parameter names and shapes."""
    try:
        channels = []
        i = 0
        while f"enc.{i}.conv0.w" in params:
            channels.append(int(params[f"enc.{i}.conv0.w"].shape[0]))
            i += 1
        embed = int(params["proj.w"].shape[0])
    except KeyError as exc:
        raise ContractError(f"parameter set lacks {exc}") from None
    layers = len({m.group(1) for name in params if (m := re.match(r"dil\.(\d+)\.", name))})
    spec = ModelSpec(tuple(channels), embed, layers)
    validate_params(spec, params)
    return spec


def validate_params(spec: ModelSpec, params: dict):
    expected = {name: a.shape for name, a in init_params(spec, _ShapeRng()).items()}
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ContractError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ContractError(f"{name}: shape {params[name].shape} != {shape}")


class _ShapeRng:
    """Stand-in generator for shape-only initialisation."""

    def normal(self, loc, scale, size):
        return np.zeros(size)


def pseudo_morph_params(params: dict, mode: str) -> PseudoMorphParams:
    prefix = "dil" if mode == "dilation" else "ero"
    layers = {}
    for name, value in params.items():
        m = re.fullmatch(rf"{prefix}\.(\d+)\.k(\d+)", name)
        if m:
            layers.setdefault(int(m.group(1)), {})[int(m.group(2))] = value
    return PseudoMorphParams(mode, [layers[i] for i in sorted(layers)])


def bind(params: dict, tape: Tape, requires_grad: bool = True) -> dict:
    return {name: tape.leaf(value, requires_grad) for name, value in params.items()}


def feature_map(p: dict, x: Var) -> Var:
    """Final encoder feature map [B, F, D/2^n, H/2^n, W/2^n]."""
    h = T.scale(x, INPUT_SCALE)
    i = 0
    while f"enc.{i}.conv0.w" in p:
        for j in range(2):
            h = T.relu(T.conv3d_same(h, p[f"enc.{i}.conv{j}.w"], p[f"enc.{i}.conv{j}.b"]))
        h = T.max_pool2(h)
        i += 1
    return h


def encoder_forward(p: dict, x: Var) -> Var:
    """[B, 1, D, H, W] -> pooled features [B, F]."""
    return T.global_avg_pool(feature_map(p, x))


def project(p: dict, fmap: Var) -> Var:
    return T.global_avg_pool(T.conv3d_same(fmap, p["proj.w"], p["proj.b"]))


def project_normalize(p: dict, x: Var, fmap: Var = None) -> Var:
    """Unit-norm embeddings [B, E]; reuses ``fmap`` when already computed."""
    fmap = feature_map(p, x) if fmap is None else fmap
    return T.l2_normalize_rows(project(p, fmap))


def classify(p: dict, features: Var) -> Var:
    return T.matvec_affine(features, p["cls.w"], p["cls.b"])


def forward(p: dict, x: Var):
    """Shared encoder pass: returns (feature map, logits)."""
    fmap = feature_map(p, x)
    return fmap, classify(p, T.global_avg_pool(fmap))


def predict(params: dict, volumes: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Logits for [N, D, H, W] or [N, 1, D, H, W] volumes, evaluated in chunks."""
    volumes = np.asarray(volumes, dtype=np.float64)
    if volumes.ndim == 4:
        volumes = volumes[:, None]
    out = []
    for start in range(0, len(volumes), chunk):
        tape = Tape()
        p = bind(params, tape, requires_grad=False)
        _, logits = forward(p, tape.constant(volumes[start:start + chunk]))
        out.append(logits.value)
    return np.concatenate(out, axis=0) if out else np.zeros((0, NUM_CLASSES))
