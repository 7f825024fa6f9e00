"""Experiment orchestration: clean and attacked accuracy, sweeps, K-fold tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .data import Dataset
from .model import Model, flash_footprint, predict
from .train import TrainConfig, derive_seed, kfold_split, train

REPORT_HEADER = ["model", "quantizer", "attack", "epsilon", "fold", "accuracy", "mean", "std", "footprint_bytes", "seconds"]


@dataclass
class Record:
    model: str
    quantizer: str
    attack: str  # "clean" or an attack kind
    epsilon: float
    fold: int
    accuracy: float
    footprint_bytes: int = 0
    seconds: float = 0.0

    @property
    def condition(self):
        return (self.model, self.quantizer, self.attack, self.epsilon)


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class ExperimentReport:
    records: list[Record] = field(default_factory=list)
    K: int | None = None
    record_timing: bool = False

    def conditions(self) -> list[tuple]:
        seen: dict[tuple, None] = {}
        for r in self.records:
            seen.setdefault(r.condition, None)
        return list(seen)

    def stats(self, condition) -> tuple[float, float]:
        """Mean and population standard deviation over folds."""
        acc = np.array([r.accuracy for r in self.records if r.condition == condition])
        if acc.size == 0:
            raise KeyError(condition)
        mean = float(sum(acc) / len(acc))
        std = float(np.sqrt(sum((a - mean) ** 2 for a in acc) / len(acc)))
        return mean, std

    def extend(self, other: "ExperimentReport"):
        self.records.extend(other.records)
        return self

    def to_csv(self, path=None) -> str:
        """Report rows; ``seconds`` is left empty unless timing was requested,
        which keeps reruns byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        stats = {c: self.stats(c) for c in self.conditions()}
        for r in self.records:
            mean, std = stats[r.condition]
            w.writerow(
                [
                    r.model,
                    r.quantizer,
                    r.attack,
                    _fmt(r.epsilon),
                    r.fold,
                    _fmt(r.accuracy),
                    _fmt(mean),
                    _fmt(std),
                    r.footprint_bytes,
                    f"{r.seconds:.3f}" if self.record_timing else "",
                ]
            )
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def timings_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "quantizer", "attack", "epsilon", "fold", "seconds"])
        for r in self.records:
            w.writerow([r.model, r.quantizer, r.attack, _fmt(r.epsilon), r.fold, f"{r.seconds:.3f}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def summary_table(self) -> str:
        """One row per (model, quantizer): clean accuracy then each attack, mean +- std in percent."""
        groups: dict[tuple, dict[tuple, str]] = {}
        columns: dict[tuple, None] = {}
        for c in self.conditions():
            model, quant, attack, eps = c
            col = (attack, eps)
            columns.setdefault(col, None)
            mean, std = self.stats(c)
            groups.setdefault((model, quant), {})[col] = f"{100 * mean:.1f} +- {100 * std:.1f}"
        cols = sorted(columns, key=lambda c: (c[0] != "clean", list(columns).index(c)))
        names = ["clean" if a == "clean" else f"{a}@{e:g}" for a, e in cols]
        rows = [["model", "quantizer"] + names]
        for (model, quant), cells in groups.items():
            rows.append([model, quant] + [cells.get(c, "-") for c in cols])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def evaluate_clean(model: Model, data: Dataset, mode: str = "quantized") -> float:
    if len(data) == 0:
        raise ValueError("empty dataset")
    return float(np.mean(predict(model, data.x, mode) == data.y))


def evaluate_under_attack(
    model: Model, data: Dataset, config: AttackConfig, threads: int = 1, mode: str = "quantized"
) -> tuple[float, AdversarialBatch]:
    if len(data) == 0:
        raise ValueError("empty dataset")
    batch = run_attack(model, data.x, data.y, config, threads, mode)
    acc = float(np.mean(predict(model, batch.x_adv, mode) == data.y))
    return acc, batch


def epsilon_sweep(
    model: Model,
    data: Dataset,
    config: AttackConfig,
    eps_list: Sequence[float],
    name: str = "model",
    quantizer: str = "",
    threads: int = 1,
) -> ExperimentReport:
    """One record per epsilon; every epsilon reuses the same attack seed."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("eps_list is empty")
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be ascending")
    fp = flash_footprint(model)
    rep = ExperimentReport(K=1)
    for e in eps_list:
        cfg = AttackConfig(**{**config.model_dump(), "epsilon": e, "alpha": _alpha_for(config, e)})
        t0 = time.perf_counter()
        acc, _ = evaluate_under_attack(model, data, cfg, threads)
        rep.records.append(Record(name, quantizer, config.kind, e, 0, acc, fp, time.perf_counter() - t0))
    return rep


def _alpha_for(config: AttackConfig, eps: float):
    # keep a fixed pgd step unless it would leave the ball
    if config.alpha is None:
        return None
    if config.kind == "pgd" and config.alpha > eps:
        return eps if eps > 0 else None
    return config.alpha


def kfold_robustness(
    model_builder: Callable[[int], Model],
    data: Dataset,
    train_config: TrainConfig,
    attack_configs: Sequence[AttackConfig],
    K: int = 5,
    name: str = "model",
    quantizer: str = "",
    threads: int = 1,
    record_timing: bool = False,
    on_history: Callable | None = None,
) -> ExperimentReport:
    """Train a fresh model per fold and evaluate clean plus every attack on its validation split.

    The fold plan comes from the training seed, so every condition trained
    with the same seed sees the same splits and the same attack seeds.
    """
    plan = kfold_split(len(data), K, train_config.seed)
    rep = ExperimentReport(K=K, record_timing=record_timing)
    for fold, (tr_idx, va_idx) in enumerate(plan):
        fold_seed = derive_seed(train_config.seed, fold)
        t0 = time.perf_counter()
        model = model_builder(fold_seed)
        cfg = TrainConfig(**{**train_config.model_dump(), "seed": fold_seed})
        _, history = train(model, data.x[tr_idx], data.y[tr_idx], cfg, data.x[va_idx], data.y[va_idx])
        if on_history is not None:
            on_history(fold, history)
        val = data.subset(va_idx)
        fp = flash_footprint(model)
        rep.records.append(Record(name, quantizer, "clean", 0.0, fold, evaluate_clean(model, val), fp, time.perf_counter() - t0))
        for j, ac in enumerate(attack_configs):
            t0 = time.perf_counter()
            acfg = AttackConfig(**{**ac.model_dump(), "seed": derive_seed(ac.seed, fold, j)})
            acc, _ = evaluate_under_attack(model, val, acfg, threads)
            rep.records.append(Record(name, quantizer, ac.kind, ac.epsilon, fold, acc, fp, time.perf_counter() - t0))
    return rep


def distillation_compare(
    model_builder: Callable[[int], Model],
    data: Dataset,
    train_config: TrainConfig,
    attack_configs: Sequence[AttackConfig],
    T_list: Sequence[float] = (1.0, 50.0),
    K: int = 5,
    name: str = "model",
    quantizer: str = "",
    threads: int = 1,
    record_timing: bool = False,
    on_history: Callable | None = None,
) -> ExperimentReport:
    """K-fold robustness once per training temperature.

    Rows trained at T=1 keep the plain model name; others get a ``-T<value>`` suffix.
    """
    if not T_list or any(not t > 0 for t in T_list):
        raise ValueError("temperatures must be positive")
    rep = ExperimentReport(K=K, record_timing=record_timing)
    for T in T_list:
        cfg = TrainConfig(**{**train_config.model_dump(), "distill_T": float(T)})
        label = name if T == 1 else f"{name}-T{T:g}"
        hook = None if on_history is None else (lambda fold, h, T=T: on_history(T, fold, h))
        rep.extend(
            kfold_robustness(model_builder, data, cfg, attack_configs, K, label, quantizer, threads, record_timing, hook)
        )
    return rep
