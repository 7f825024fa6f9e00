"""Quantizer forward maps and their straight-through gradient rules.

Inputs are assumed to be pre-scaled to roughly [-1, 1]; nothing here rescales.
Stochastic kinds draw from an explicit ``numpy.random.Generator`` so that a
fixed seed reproduces the exact same quantized tensor.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .tensor import Var, custom

QuantizerKind = Literal[
    "identity",
    "binary",
    "stochastic_binary",
    "ternary",
    "stochastic_ternary",
    "fixed_point",
    "quantized_relu",
]

STOCHASTIC_KINDS = {"stochastic_binary", "stochastic_ternary"}


class QuantizerSpec(BaseModel):
    """Per-layer quantization rule."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: QuantizerKind = "identity"
    bits: int = 8
    threshold: float = 1.0 / 3.0
    ste_clip: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.kind == "fixed_point" and not 2 <= self.bits <= 16:
            raise ValueError("fixed_point requires 2 <= bits <= 16")
        if self.kind == "quantized_relu" and not 1 <= self.bits <= 16:
            raise ValueError("quantized_relu requires 1 <= bits <= 16")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not self.ste_clip > 0:
            raise ValueError("ste_clip must be positive")
        return self

    @property
    def stochastic(self) -> bool:
        return self.kind in STOCHASTIC_KINDS

    @property
    def storage_bits(self) -> int:
        """Bits per stored parameter when this quantizer guards a weight tensor."""
        if self.kind == "identity":
            return 32
        if self.kind in ("binary", "stochastic_binary"):
            return 1
        if self.kind in ("ternary", "stochastic_ternary"):
            return 2
        return self.bits

    def deterministic(self) -> "QuantizerSpec":
        """Deployment counterpart: stochastic kinds collapse to their deterministic image."""
        if self.kind == "stochastic_ternary":
            return self.model_copy(update={"kind": "ternary"})
        if self.kind == "stochastic_binary":
            return self.model_copy(update={"kind": "binary"})
        return self


class StochasticSchedule(BaseModel):
    """Linearly growing fraction of elements that a stochastic quantizer replaces."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    r0: float = 0.5
    r_final: float = 1.0
    total_steps: int = 1000

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ValueError("r0 must lie in [0, 1]")
        if not self.r0 <= self.r_final <= 1.0:
            raise ValueError("r_final must lie in [r0, 1]")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        return self


def schedule_portion(schedule: StochasticSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    frac = min(step, schedule.total_steps) / schedule.total_steps
    return schedule.r0 + (schedule.r_final - schedule.r0) * frac


def ternarize(x: np.ndarray, threshold: float) -> np.ndarray:
    m = np.max(np.abs(x)) if x.size else 0.0
    if m == 0:
        return np.zeros_like(x)
    return np.sign(x) * (np.abs(x) > threshold * m)


def quantize_forward(
    spec: QuantizerSpec,
    x,
    step: int = 0,
    schedule: StochasticSchedule | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantizer input must be finite")
    kind = spec.kind
    if spec.stochastic and rng is None:
        raise ValueError(f"{kind} quantizer needs a random generator")

    if kind == "identity":
        return x.copy()
    if kind == "binary":
        return np.where(x >= 0, 1.0, -1.0)
    if kind == "stochastic_binary":
        p = (np.clip(x, -1.0, 1.0) + 1.0) / 2.0
        return np.where(rng.random(x.shape) < p, 1.0, -1.0)
    if kind == "ternary":
        return ternarize(x, spec.threshold)
    if kind == "stochastic_ternary":
        r = 1.0 if schedule is None else schedule_portion(schedule, step)
        t = ternarize(x, spec.threshold)
        err = np.abs(x - t)
        emax = np.max(err) if err.size else 0.0
        # probability falls linearly from r (exact) to 0 (worst error)
        p = np.full(x.shape, r) if emax == 0 else r * (1.0 - err / emax)
        return np.where(rng.random(x.shape) < p, t, x)
    if kind == "fixed_point":
        s = 2.0 ** (spec.bits - 1)
        return np.clip(np.rint(x * s), -s, s - 1) / s
    if kind == "quantized_relu":
        s = 2.0**spec.bits
        return np.clip(np.rint(np.maximum(x, 0.0) * s), 0, s - 1) / s
    raise ValueError(f"unknown quantizer kind {kind!r}")


def ste_mask(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    if spec.kind == "identity":
        return np.ones_like(x)
    if spec.kind == "quantized_relu":
        return ((x >= 0) & (x <= spec.ste_clip)).astype(np.float64)
    return (np.abs(x) <= spec.ste_clip).astype(np.float64)


def quantize_backward(spec: QuantizerSpec, x, upstream) -> np.ndarray:
    """Straight-through gradient: pass ``upstream`` inside the clip window, zero outside.

    The identity quantizer passes everything.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs upstream {upstream.shape}")
    return upstream * ste_mask(spec, x)


def quantize_var(
    spec: QuantizerSpec,
    v: Var,
    step: int = 0,
    schedule: StochasticSchedule | None = None,
    rng: np.random.Generator | None = None,
) -> Var:
    """Quantize a tape value, recording the straight-through backward rule."""
    if spec.kind == "identity":
        return v
    q = quantize_forward(spec, v.value, step, schedule, rng)
    x = v.value
    return custom(v, q, lambda g: quantize_backward(spec, x, g))
