"""Command-line entry point.

Exit codes: 0 success, 1 bad flags or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import pydantic

from . import config as C
from .attacks import AttackConfig, save_batch
from .harness import ExperimentReport, Record, distillation_compare, epsilon_sweep, evaluate_clean, evaluate_under_attack, kfold_robustness
from .model import flash_footprint, load_checkpoint, save_checkpoint
from .selftest import run_selftest
from .train import kfold_split, train, write_history_csv

COMMANDS = ("train", "evaluate", "attack", "sweep", "kfold", "distill", "footprint", "selftest")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment JSON")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=_u64, metavar="U64", help="overrides the config seed")
    common.add_argument("--threads", type=_positive, default=1, metavar="N", help="worker threads for per-sample attacks")
    p = _Parser(prog="tqrobust", description="Quantized-model robustness experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "train": "train one model on the whole dataset (one fold held out for validation)",
        "evaluate": "clean and attacked accuracy of a trained model",
        "attack": "run every configured attack and save the adversarial batches",
        "sweep": "attacked accuracy over a list of epsilons",
        "kfold": "K-fold cross-validated robustness table",
        "distill": "K-fold robustness for each training temperature",
        "footprint": "print parameter storage in bytes",
        "selftest": "run the built-in invariant checks",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return p


def _load(args) -> C.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    try:
        cfg = C.load_config(args.config)
    except (OSError, json.JSONDecodeError, pydantic.ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from e
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.out is not None:
        upd["out_dir"] = args.out
    try:
        if upd:
            # model_copy keeps track of which nested fields were written explicitly
            cfg = cfg.model_copy(update=upd)
        if not cfg.model.checkpoint:
            C.model_builder(cfg)(cfg.seed)  # surfaces layer shape errors as config errors
    except (pydantic.ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return cfg


def _out(cfg) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _data(cfg):
    try:
        return C.load_dataset(cfg.dataset, cfg.seed)
    except (OSError, ValueError) as e:
        raise ConfigError(f"dataset: {e}") from e


def _trained_model(cfg, data, out: Path):
    """Checkpoint from the config, else ``<out>/model.tqrm``, else train one now."""
    if cfg.model.checkpoint:
        return load_checkpoint(cfg.model.checkpoint)
    ckpt = out / "model.tqrm"
    if ckpt.exists():
        return load_checkpoint(ckpt)
    return _train(cfg, data, out)


def _train(cfg, data, out: Path):
    tcfg = C.resolve_train(cfg)
    model = C.model_builder(cfg)(tcfg.seed)
    tr_idx, va_idx = kfold_split(len(data), cfg.folds, tcfg.seed).folds[0]
    _, history = train(model, data.x[tr_idx], data.y[tr_idx], tcfg, data.x[va_idx], data.y[va_idx])
    write_history_csv(history, out / "history.csv")
    save_checkpoint(model, out / "model.tqrm")
    return model


def _write_report(rep: ExperimentReport, out: Path, stem: str = "report"):
    rep.to_csv(out / f"{stem}.csv")
    (out / f"{stem}_summary.txt").write_text(rep.summary_table())
    rep.timings_csv(out / f"{stem}_timings.csv")
    sys.stdout.write(rep.summary_table())


def cmd_train(cfg, threads):
    data, out = _data(cfg), _out(cfg)
    model = _train(cfg, data, out)
    print(f"clean accuracy {evaluate_clean(model, data):.4f}; wrote {out / 'model.tqrm'}")


def _evaluate(cfg, threads: int, keep_batches: bool):
    data, out = _data(cfg), _out(cfg)
    model = _trained_model(cfg, data, out)
    q = C.quantizer_label(cfg)
    fp = flash_footprint(model)
    rep = ExperimentReport(K=1, record_timing=cfg.record_timing)
    rep.records.append(Record(cfg.name, q, "clean", 0.0, 0, evaluate_clean(model, data), fp))
    for j, ac in enumerate(C.resolve_attacks(cfg, data)):
        acc, batch = evaluate_under_attack(model, data, ac, threads)
        rep.records.append(Record(cfg.name, q, ac.kind, ac.epsilon, 0, acc, fp))
        if keep_batches:
            save_batch(batch, out / f"adv_{j}_{ac.kind}")
    _write_report(rep, out)


def cmd_evaluate(cfg, threads):
    _evaluate(cfg, threads, keep_batches=False)


def cmd_attack(cfg, threads):
    _evaluate(cfg, threads, keep_batches=True)


def cmd_sweep(cfg, threads):
    data, out = _data(cfg), _out(cfg)
    model = _trained_model(cfg, data, out)
    spec = cfg.sweep or C.SweepSpec()
    ac = C.resolve_attack(spec.attack, cfg, data, 1)
    rep = epsilon_sweep(model, data, ac, spec.eps_list, cfg.name, C.quantizer_label(cfg), threads)
    rep.record_timing = cfg.record_timing
    _write_report(rep, out, "sweep")


def cmd_kfold(cfg, threads):
    data, out = _data(cfg), _out(cfg)

    def hist(fold, h):
        write_history_csv(h, out / f"history_fold{fold}.csv")

    rep = kfold_robustness(
        C.model_builder(cfg), data, C.resolve_train(cfg), C.resolve_attacks(cfg, data), cfg.folds,
        cfg.name, C.quantizer_label(cfg), threads, cfg.record_timing, hist,
    )
    _write_report(rep, out)


def cmd_distill(cfg, threads):
    data, out = _data(cfg), _out(cfg)

    def hist(T, fold, h):
        write_history_csv(h, out / f"history_T{T:g}_fold{fold}.csv")

    rep = distillation_compare(
        C.model_builder(cfg), data, C.resolve_train(cfg), C.resolve_attacks(cfg, data), cfg.temperatures,
        cfg.folds, cfg.name, C.quantizer_label(cfg), threads, cfg.record_timing, hist,
    )
    _write_report(rep, out)


def cmd_footprint(cfg, threads):
    if cfg.model.checkpoint:
        model = load_checkpoint(cfg.model.checkpoint)
    else:
        model = C.model_builder(cfg)(cfg.seed)
    print(f"{flash_footprint(model)} bytes")


def cmd_selftest(_cfg, _threads):
    ok = True
    for name, passed, detail in run_selftest():
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return 0 if ok else 2


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handler = globals()[f"cmd_{args.command}"]
    try:
        cfg = None if args.command == "selftest" else _load(args)
        return int(handler(cfg, args.threads) or 0)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
