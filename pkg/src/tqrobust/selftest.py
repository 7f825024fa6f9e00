"""Quick invariant checks runnable from the command line."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as tn
from .attacks import AttackConfig, ScoreOracle, run_attack, zoo_gradient_estimate
from .data import synthesize_dataset
from .jacobian import chain_product, jacobian_full, jr_frobenius
from .model import LayerSpec, Model, flash_footprint, softmax_with_temperature, trace
from .presets import build
from .quantize import QuantizerSpec, StochasticSchedule, quantize_forward, schedule_portion
from .train import TrainConfig, kfold_split, train


def _grad_check() -> str:
    rng = np.random.default_rng(0)
    m = Model(
        [
            LayerSpec(kind="conv2d", filters=2),
            LayerSpec(kind="batch_norm"),
            LayerSpec(kind="sigmoid"),
            LayerSpec(kind="separable_conv2d", filters=2),
            LayerSpec(kind="flatten"),
            LayerSpec(kind="dense", units=3),
        ],
        (4, 4, 1),
        seed=1,
    )
    x = rng.normal(size=(3, 4, 4, 1))
    y = np.eye(3)[[0, 1, 2]]

    def loss_of(k):
        def f(w):
            saved = m.params[0]["kernel"]
            m.params[0]["kernel"] = w
            tape = tn.Tape()
            tr = trace(m, tape, tape.const(x), training=True)
            m.params[0]["kernel"] = saved
            return float(tn.softmax_cross_entropy(tr.logits, y).value)

        return f

    tape = tn.Tape()
    tr = trace(m, tape, tape.const(x), training=True, param_grad=True)
    loss = tn.softmax_cross_entropy(tr.logits, y)
    (g,) = tape.grad(loss, [tr.params[0]["kernel"]])
    fd = tn.finite_diff_gradient(loss_of("kernel"), m.params[0]["kernel"])
    err = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
    assert err < 1e-4, f"relative error {err:.2e}"
    return f"rel err {err:.1e}"


def _jacobian() -> str:
    m = build("mlp", (4,), 3, "fp", seed=2, hidden=(5, 5))
    x = np.random.default_rng(1).normal(size=4)
    a, b = jr_frobenius(m, x, form="rows"), jr_frobenius(m, x, form="entries")
    chain = np.max(np.abs(chain_product(m, x) - jacobian_full(m, x).matrix))
    assert abs(a - b) < 1e-10 and chain < 1e-8, f"forms {abs(a - b):.1e}, chain {chain:.1e}"
    return f"forms {abs(a - b):.1e}, chain {chain:.1e}"


def _quantizers() -> str:
    x = np.linspace(-2, 2, 101)
    rng = np.random.default_rng(0)
    for spec in [
        QuantizerSpec(kind="binary"),
        QuantizerSpec(kind="ternary"),
        QuantizerSpec(kind="fixed_point", bits=4),
        QuantizerSpec(kind="quantized_relu", bits=3),
    ]:
        q = quantize_forward(spec, x)
        assert np.array_equal(quantize_forward(spec, q), q), spec.kind
        assert np.all(np.diff(q) >= 0), spec.kind
    assert quantize_forward(QuantizerSpec(kind="binary"), [0.0])[0] == 1.0
    s = StochasticSchedule(r0=0.25, r_final=0.75, total_steps=10)
    assert schedule_portion(s, 0) == 0.25 and schedule_portion(s, 10) == 0.75
    p = np.mean([quantize_forward(QuantizerSpec(kind="stochastic_binary"), [0.4], rng=rng)[0] == 1 for _ in range(4000)])
    assert abs(p - 0.7) < 0.03, f"stochastic binary frequency {p}"
    return "ok"


def _softmax() -> str:
    z = np.random.default_rng(3).normal(size=(200, 5))
    for T in (1.0, 50.0):
        assert np.array_equal(np.argmax(softmax_with_temperature(z, T), axis=1), np.argmax(z, axis=1))
    return "ok"


def _footprint() -> str:
    m = Model([LayerSpec(kind="dense", units=10, use_bias=False, weight_quantizer=QuantizerSpec(kind="fixed_point", bits=2))], (100,))
    assert flash_footprint(m) == 250, flash_footprint(m)
    return "250 bytes"


def _folds() -> str:
    plan = kfold_split(23, 5, seed=4)
    vals = np.concatenate([v for _, v in plan])
    assert np.array_equal(np.sort(vals), np.arange(23))
    return "ok"


def _attacks() -> str:
    ds = synthesize_dataset("gaussians", 60, seed=0)
    m = build("mlp", (2,), 2, "fp", seed=0, hidden=(8,))
    train(m, ds.x, ds.y, TrainConfig(epochs=10, batch_size=20, lr_max=0.01))
    for kind in ("fgsm", "pgd", "square", "zoo"):
        b = run_attack(m, ds.x, ds.y, AttackConfig(kind=kind, epsilon=0.2, max_iter=5, input_bounds=(-1, 1)))
        assert np.all(b.norms <= 0.2 + 1e-9) and np.all(np.abs(b.x_adv) <= 1), kind
    oracle = ScoreOracle(lambda x: np.stack([x.sum(axis=1) ** 2, -x.sum(axis=1)], axis=1))
    g = zoo_gradient_estimate(lambda b: oracle.logits(b)[:, 0], np.ones(2), [0, 1])
    assert np.allclose(g, 4.0, atol=1e-6), g
    return "ok"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": _grad_check,
    "jacobian": _jacobian,
    "quantizers": _quantizers,
    "softmax": _softmax,
    "footprint": _footprint,
    "folds": _folds,
    "attacks": _attacks,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, True, fn()))
        except Exception as e:  # report and keep going
            results.append((name, False, f"{type(e).__name__}: {e}"))
    return results
