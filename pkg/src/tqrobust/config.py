"""Strict JSON experiment configuration."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .attacks import AttackConfig
from .data import Dataset, cifar_dataset, synthesize_dataset
from .model import LayerSpec, Model
from .presets import SCHEMES, apply_scheme, build
from .quantize import QuantizerSpec
from .train import TrainConfig, derive_seed

CIFAR_EPS_SCALE = 255.0


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSpec(_Strict):
    kind: Literal["cifar10_binary", "synthetic_gaussians", "synthetic_checkerboard"] = "synthetic_gaussians"
    path: str | None = None
    class_subset: list[int] = Field(default_factory=lambda: [0, 1])
    downsample: Literal[1, 2, 4] = 4
    cap: int | None = None
    # synthetic sets
    n: int = 200
    dim: int = 2
    separation: float = 4.0
    sigma: float = 0.1
    num_classes: int = 2

    @model_validator(mode="after")
    def _check(self):
        if not self.class_subset:
            raise ValueError("class_subset must be non-empty")
        if len(set(self.class_subset)) != len(self.class_subset) or not all(0 <= c < 10 for c in self.class_subset):
            raise ValueError("class_subset must hold distinct labels in [0, 10)")
        if self.kind == "cifar10_binary" and not self.path:
            raise ValueError("cifar10_binary needs a path")
        if self.cap is not None and self.cap < 1:
            raise ValueError("cap must be positive")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        return self


class LayerOverride(_Strict):
    weight_quantizer: QuantizerSpec | None = None
    activation_quantizer: QuantizerSpec | None = None


class ModelSpec(_Strict):
    preset: Literal["linear", "mlp", "tiny_cnn", "custom"] = "mlp"
    scheme: str | None = None  # None: presets run full precision, custom layers keep their own quantizers
    hidden: list[int] = Field(default_factory=lambda: [16, 16])
    width: int = 8
    layers: list[LayerSpec] | None = None  # for preset "custom"
    input_shape: list[int] | None = None  # for preset "custom"; defaults to the dataset's
    overrides: dict[int, LayerOverride] = Field(default_factory=dict)
    checkpoint: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.scheme is not None and self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.preset == "custom" and not self.layers:
            raise ValueError("custom preset needs layers")
        if self.preset != "custom" and self.layers:
            raise ValueError("layers are only read for the custom preset")
        return self


class SweepSpec(_Strict):
    attack: AttackConfig = AttackConfig(kind="fgsm")
    eps_list: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2, 0.25, 0.3])


class ExperimentConfig(_Strict):
    name: str = "model"
    seed: int = 0
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig()
    attacks: list[AttackConfig] = Field(default_factory=list)
    folds: int = 5
    sweep: SweepSpec | None = None
    temperatures: list[float] = Field(default_factory=lambda: [1.0, 50.0])
    out_dir: str = "out"
    record_timing: bool = False

    @model_validator(mode="after")
    def _check(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.temperatures or any(not t >= 1 for t in self.temperatures):
            raise ValueError("temperatures must be >= 1")
        return self


def parse_config(text: str) -> ExperimentConfig:
    return ExperimentConfig.model_validate(json.loads(text))


def dump_config(cfg: ExperimentConfig) -> str:
    return cfg.model_dump_json(indent=2)


def check_paths(cfg: ExperimentConfig):
    for p in (cfg.dataset.path, cfg.model.checkpoint):
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"referenced path does not exist: {p}")


def load_config(path) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    check_paths(cfg)
    return cfg


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    if spec.kind == "cifar10_binary":
        return cifar_dataset(spec.path, spec.class_subset, spec.cap, spec.downsample)
    kind = spec.kind.removeprefix("synthetic_")
    ds = synthesize_dataset(kind, spec.n, seed, spec.dim, spec.separation, spec.sigma, spec.num_classes)
    if spec.cap is not None:
        ds = ds.subset(slice(0, spec.cap))
    return ds


def _apply_overrides(layers: list[LayerSpec], overrides: dict[int, LayerOverride]) -> list[LayerSpec]:
    layers = list(layers)
    for i, ov in overrides.items():
        if not 0 <= i < len(layers):
            raise ValueError(f"override for layer {i} out of range")
        upd = {k: v for k, v in (("weight_quantizer", ov.weight_quantizer), ("activation_quantizer", ov.activation_quantizer)) if v is not None}
        layers[i] = layers[i].model_copy(update=upd)
    return layers


def data_shape(cfg: ExperimentConfig) -> tuple[tuple[int, ...], int]:
    """(input shape, class count) implied by the config, without reading any data."""
    ds = cfg.dataset
    if cfg.model.input_shape:
        shape = tuple(cfg.model.input_shape)
    elif ds.kind == "cifar10_binary":
        side = 32 // ds.downsample
        shape = (side, side, 1)
    else:
        shape = (ds.dim,)
    if ds.kind == "cifar10_binary":
        k = len(ds.class_subset)
    elif ds.kind == "synthetic_checkerboard":
        k = 2
    else:
        k = ds.num_classes
    return shape, k


def model_builder(cfg: ExperimentConfig):
    """seed -> fresh Model for the config's model spec."""
    spec = cfg.model
    input_shape, k = data_shape(cfg)

    def make(seed: int) -> Model:
        if spec.preset == "custom":
            layers = spec.layers if spec.scheme is None else apply_scheme(spec.layers, spec.scheme)
            m = Model(layers, input_shape, seed=seed)
        else:
            m = build(spec.preset, input_shape, k, spec.scheme or "fp", seed, spec.hidden, spec.width)
        if spec.overrides:
            m = m.with_layers(_apply_overrides(m.layers, spec.overrides))
        return m

    return make


def quantizer_label(cfg: ExperimentConfig) -> str:
    return cfg.model.scheme or ("custom" if cfg.model.preset == "custom" else "fp")


def resolve_attacks(cfg: ExperimentConfig, data: Dataset) -> list[AttackConfig]:
    """Attach dataset bounds, the pixel-scale epsilon factor for CIFAR, and run-derived seeds,
    unless a field was written explicitly in the config."""
    out = []
    for j, ac in enumerate(cfg.attacks):
        out.append(resolve_attack(ac, cfg, data, j + 1))
    return out


def resolve_attack(ac: AttackConfig, cfg: ExperimentConfig, data: Dataset, slot: int) -> AttackConfig:
    upd = {"seed": derive_seed(cfg.seed, slot)}
    if "input_bounds" not in ac.model_fields_set:
        upd["input_bounds"] = tuple(data.input_bounds)
    if "eps_scale" not in ac.model_fields_set and cfg.dataset.kind == "cifar10_binary":
        upd["eps_scale"] = CIFAR_EPS_SCALE
    return AttackConfig(**{**ac.model_dump(), **upd})


def resolve_train(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(**{**cfg.train.model_dump(), "seed": derive_seed(cfg.seed, 0)})

