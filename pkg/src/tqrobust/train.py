"""Quantization-aware training: losses, optimizers, learning-rate schedule, folds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import tensor as tn
from .model import Model, layer_jvp, predict, propagate_tangents, trace
from .quantize import StochasticSchedule
from .tensor import Tape, Var

JR_DEFAULT_LAMBDA = 0.01
HISTORY_HEADER = ["epoch", "loss", "train_acc", "val_acc", "lr"]


class DivergenceError(RuntimeError):
    pass


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = 30
    batch_size: int = 64
    lr_min: float = 1e-6
    lr_max: float = 1e-3
    # None picks rmsprop for full-precision/ternary models and adamax otherwise
    optimizer: Literal["sgd", "rmsprop", "adamax"] | None = None
    loss: Literal["cross_entropy"] = "cross_entropy"
    jr_lambda: float | None = None
    jr_mode: Literal["off", "full", "per_layer"] = "off"
    # 0 = exact Jacobian via identity tangents; >0 = that many random projections per sample
    jr_projections: int = 0
    distill_T: float = 1.0
    seed: int = 0
    schedule: StochasticSchedule | None = None
    output_noise: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.jr_lambda is not None and self.jr_lambda < 0:
            raise ValueError("jr_lambda must be >= 0")
        if self.jr_projections < 0:
            raise ValueError("jr_projections must be >= 0")
        if not self.distill_T >= 1.0:
            raise ValueError("distill_T must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.output_noise < 0:
            raise ValueError("output_noise must be >= 0")
        return self

    @property
    def lam(self) -> float:
        if self.jr_mode == "off":
            return 0.0
        return JR_DEFAULT_LAMBDA if self.jr_lambda is None else self.jr_lambda


def default_optimizer(model: Model) -> str:
    kinds = {s.weight_quantizer.kind for s in model.layers}
    return "rmsprop" if kinds <= {"identity", "ternary", "stochastic_ternary"} else "adamax"


# ---------------------------------------------------------------------------
# losses


def _check_targets(logits: np.ndarray, y: np.ndarray):
    if logits.shape != y.shape or logits.ndim != 2:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs targets {y.shape}")
    if not np.allclose(y.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("target rows must sum to 1")


def cross_entropy_loss(logits, y_onehot, T: float = 1.0) -> float:
    z = np.asarray(tn.as_array(logits), dtype=np.float64)
    y = np.asarray(tn.as_array(y_onehot), dtype=np.float64)
    _check_targets(z, y)
    p = tn.softmax(z, T)
    return float(np.mean(-np.sum(y * np.log(np.maximum(p, tn.LOG_FLOOR)), axis=1)))


def _head_check(model: Model):
    aq = model.layers[-1].activation_quantizer if model.layers else None
    if aq is not None and aq.kind != "identity":
        raise ValueError("Jacobian regularization needs a differentiable head; last layer is quantized")


def _jr_term(model: Model, tr, config: TrainConfig, rng: np.random.Generator | None) -> Var:
    tape = tr.tape
    x = tr.x.value
    b = x.shape[0]
    if config.jr_mode == "full":
        shape = model.input_shape
        d = model.input_dim
        if config.jr_projections:
            p = config.jr_projections
            if rng is None:
                raise ValueError("random projections need a random generator")
            t0 = rng.standard_normal((b * p,) + shape)
            n = p
        else:
            t0 = np.tile(np.eye(d), (b, 1)).reshape((b * d,) + shape)
            n = d
        t = propagate_tangents(model, tr, tape.const(t0), n)
        norms = tn.reduce_sum(tn.square(t))
        return tn.scale(norms, 1.0 / (b * n) if config.jr_projections else 1.0 / b)
    # per_layer: one random sample, one random layer
    if rng is None:
        raise ValueError("per-layer regularization needs a random generator")
    i = int(rng.integers(b))
    l = int(rng.integers(len(model.layers)))
    shape = model.layer_input_shape(l)
    n_in = int(np.prod(shape))
    if config.jr_projections:
        n = config.jr_projections
        t0 = rng.standard_normal((n,) + shape)
    else:
        n = n_in
        t0 = np.eye(n_in).reshape((n_in,) + shape)
    t = layer_jvp(model, tr, l, tape.const(t0), n, sample=i)
    norms = tn.reduce_sum(tn.square(t))
    return tn.scale(norms, 1.0 / n) if config.jr_projections else norms


def _joint(model: Model, tr, y_onehot: np.ndarray, config: TrainConfig, rng) -> Var:
    ce = tn.softmax_cross_entropy(tr.logits, y_onehot, config.distill_T)
    lam = config.lam
    if config.jr_mode != "off":
        _head_check(model)
    if lam == 0.0:
        return ce
    return tn.add(ce, tn.scale(_jr_term(model, tr, config, rng), lam))


def joint_loss(
    model: Model,
    x,
    y_onehot,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    mode: str = "quantized",
) -> float:
    """Cross-entropy plus lambda times the Jacobian penalty, evaluated in inference mode."""
    x = np.asarray(tn.as_array(x), dtype=np.float64)
    y = np.asarray(tn.as_array(y_onehot), dtype=np.float64)
    tape = Tape()
    tr = trace(model, tape, tape.const(x), quantized=mode == "quantized", training=False)
    _check_targets(tr.logits.value, y)
    return float(_joint(model, tr, y, config, rng).value)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    """SGD, RMSprop (rho 0.9, eps 1e-7) or Adamax (beta1 0.9, beta2 0.999) on master weights."""

    def __init__(self, kind: str, rho: float = 0.9, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        if kind not in ("sgd", "rmsprop", "adamax"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.rho, self.beta1, self.beta2, self.eps = rho, beta1, beta2, eps
        self.t = 0
        self.slots: dict[tuple[int, str], list[np.ndarray]] = {}

    def apply(self, model: Model, grads: list[dict[str, np.ndarray]], lr: float):
        self.t += 1
        for i, layer_grads in enumerate(grads):
            for name, g in layer_grads.items():
                p = model.params[i][name]
                if self.kind == "sgd":
                    p -= lr * g
                    continue
                key = (i, name)
                if self.kind == "rmsprop":
                    (v,) = self.slots.setdefault(key, [np.zeros_like(p)])
                    v *= self.rho
                    v += (1 - self.rho) * g * g
                    p -= lr * g / (np.sqrt(v) + self.eps)
                else:
                    m, u = self.slots.setdefault(key, [np.zeros_like(p), np.zeros_like(p)])
                    m *= self.beta1
                    m += (1 - self.beta1) * g
                    np.maximum(self.beta2 * u, np.abs(g), out=u)
                    p -= (lr / (1 - self.beta1**self.t)) * m / (u + self.eps)


def cosine_lr(step: int, total_steps: int, lr_min: float, lr_max: float) -> float:
    if total_steps <= 0:
        return lr_max
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# training


def one_hot(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def qat_train_step(
    model: Model,
    x,
    y_onehot,
    config: TrainConfig,
    step: int,
    rng: np.random.Generator | None = None,
    optimizer: Optimizer | None = None,
    lr: float | None = None,
    jr_rng: np.random.Generator | None = None,
):
    """One quantized forward/backward pass; updates the full-precision masters in place.

    Returns ``(model, loss)`` with the loss measured before the update.
    """
    x = np.asarray(tn.as_array(x), dtype=np.float64)
    y = np.asarray(tn.as_array(y_onehot), dtype=np.float64)
    if optimizer is None:
        optimizer = Optimizer(config.optimizer or default_optimizer(model))
    if lr is None:
        lr = config.lr_max
    tape = Tape()
    tr = trace(
        model,
        tape,
        tape.const(x),
        quantized=True,
        training=True,
        step=step,
        schedule=config.schedule,
        rng=rng,
        param_grad=True,
        noise_std=config.output_noise,
    )
    _check_targets(tr.logits.value, y)
    loss = _joint(model, tr, y, config, jr_rng if jr_rng is not None else rng)
    value = float(loss.value)
    if not math.isfinite(value):
        raise DivergenceError(f"diverged at step {step}")
    leaves = [(i, name, v) for i, pv in enumerate(tr.params) for name, v in pv.items()]
    flat = tape.grad(loss, [v for _, _, v in leaves])
    grads: list[dict[str, np.ndarray]] = [{} for _ in model.layers]
    for (i, name, _), g in zip(leaves, flat):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged at step {step}")
        grads[i][name] = g
    optimizer.apply(model, grads, lr)
    for i, stats in enumerate(tr.bn_stats):
        if stats is None:
            continue
        mu, var = stats
        m = model.layers[i].momentum
        st = model.state[i]
        st["moving_mean"] = m * st["moving_mean"] + (1 - m) * mu
        st["moving_var"] = m * st["moving_var"] + (1 - m) * var
    return model, value


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float | None
    lr: float


def accuracy(model: Model, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(model, x) == y))


def train(model: Model, x, y, config: TrainConfig, x_val=None, y_val=None):
    """Run ``epochs`` passes of shuffled mini-batch QAT with cosine learning rate.

    ``y`` holds integer labels. Returns ``(model, history)`` with one
    :class:`EpochRecord` per epoch.
    """
    x = np.asarray(tn.as_array(x), dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n == 0:
        raise ValueError("empty dataset")
    k = model.num_classes
    yh = one_hot(y, k)
    shuffle_ss, quant_ss, jr_ss = np.random.SeedSequence(config.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    quant_rng = np.random.default_rng(quant_ss)
    jr_rng = np.random.default_rng(jr_ss)
    steps_per_epoch = -(-n // config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.schedule is None:
        config = config.model_copy(update={"schedule": StochasticSchedule(total_steps=total)})
    opt = Optimizer(config.optimizer or default_optimizer(model))
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        losses, lr = [], config.lr_max
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            lr = cosine_lr(step, total, config.lr_min, config.lr_max)
            _, loss = qat_train_step(model, x[idx], yh[idx], config, step, quant_rng, opt, lr, jr_rng)
            losses.append(loss * len(idx))
            step += 1
        val = accuracy(model, x_val, y_val) if x_val is not None and len(x_val) else None
        history.append(EpochRecord(epoch + 1, float(sum(losses) / n), accuracy(model, x, y), val, lr))
    return model, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.loss), repr(r.train_acc), "" if r.val_acc is None else repr(r.val_acc), repr(r.lr)])


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    K: int
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]  # (train indices, validation indices)

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return self.K


def kfold_split(n: int, K: int, seed: int = 0) -> FoldPlan:
    if K < 2:
        raise ValueError("K must be >= 2")
    if K > n:
        raise ValueError(f"K={K} exceeds sample count {n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, K)
    folds = []
    for j, val in enumerate(parts):
        tr = np.concatenate([p for i, p in enumerate(parts) if i != j])
        folds.append((np.sort(tr), np.sort(val)))
    return FoldPlan(K, tuple(folds))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a sub-task (fold, attack, ...) of a run."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
