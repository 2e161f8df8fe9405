"""Run configuration and its ``key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .io import FormatError, config_digest
from .model import ModelSpec
from .phantoms import DataConfig, PhantomShape
from .tensor import ContractError


@dataclass
class TrainConfig:
    # optimisation
    micro_batch: int = 2
    effective_batch: int = 16
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_per_epoch: float = 0.05
    epochs: int = 5
    tau: float = 0.07
    lam: float = 1.0
    seed: int = 42
    # model
    channels: tuple = (8, 16, 32)
    embed_dim: int = 64
    pm_layers: int = 2
    pm_sigma: float = 0.01
    # method components
    use_pseudo_morph: bool = True
    use_mci_affine: bool = True
    use_cutmix: bool = True
    use_scl: bool = True
    max_shift: int = 2
    scale_min: float = 0.95
    scale_max: float = 1.05
    contrast_min: float = 0.9
    contrast_max: float = 1.1
    cutmix_min: float = 0.2
    cutmix_max: float = 0.5
    # data
    dims: tuple = (16, 16, 16)
    source_total: int = 300
    target_total: int = 150
    ventricle_nc: float = 0.10
    ventricle_ad: float = 0.25
    thickness_nc: float = 0.15
    thickness_ad: float = 0.08
    atrophy_nc: float = 0.0
    atrophy_ad: float = 0.08
    morph_jitter: float = 0.15
    shell_intensity: float = 180.0
    tissue_intensity: float = 120.0
    intensity_jitter: float = 0.05

    def validate(self):
        if self.micro_batch < 1 or self.effective_batch % self.micro_batch:
            raise ContractError("effective_batch must be a positive multiple of micro_batch")
        if self.lr0 <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ContractError("lr0 > 0, 0 <= momentum < 1 and weight_decay >= 0 required")
        if not 0 <= self.lr_decay_per_epoch < 1:
            raise ContractError("lr_decay_per_epoch must lie in [0, 1)")
        if self.epochs < 0 or self.tau <= 0 or self.lam < 0:
            raise ContractError("epochs >= 0, tau > 0 and lam >= 0 required")
        if not self.channels or len(self.dims) != 3:
            raise ContractError("channels must be nonempty and dims three extents")
        self.model_spec().check_input(self.dims)
        if not 0 < self.cutmix_min <= self.cutmix_max <= 1:
            raise ContractError("need 0 < cutmix_min <= cutmix_max <= 1")
        return self

    def model_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.channels), self.embed_dim, self.pm_layers, self.pm_sigma)

    def data_config(self) -> DataConfig:
        shape = PhantomShape(
            nc=(self.ventricle_nc, self.thickness_nc, self.atrophy_nc),
            ad=(self.ventricle_ad, self.thickness_ad, self.atrophy_ad),
            jitter=self.morph_jitter, shell_intensity=self.shell_intensity,
            tissue_intensity=self.tissue_intensity, intensity_jitter=self.intensity_jitter)
        return DataConfig(tuple(self.dims), self.source_total, self.target_total, self.seed, shape)

    def affine_ranges(self) -> dict:
        return dict(max_shift=self.max_shift, scale_range=(self.scale_min, self.scale_max),
                    contrast_range=(self.contrast_min, self.contrast_max))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> bytes:
        return config_digest(self.to_text())

    @classmethod
    def from_text(cls, text: str, source="<config>") -> "TrainConfig":
        types = {f.name: type(f.default) for f in fields(cls)}
        values = {}
        offset = 0
        for lineno, line in enumerate(text.splitlines(keepends=True), 1):
            start = offset
            offset += len(line.encode("utf-8"))
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise FormatError(source, start, f"line {lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in body.split("=", 1))
            if key not in types:
                raise FormatError(source, start, f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = _parse(raw, types[key])
            except ValueError:
                raise FormatError(source, start,
                                  f"line {lineno}: bad value {raw!r} for {key!r}") from None
        return cls(**values).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), path)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, kind):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(raw)
    if kind is tuple:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return kind(raw)
