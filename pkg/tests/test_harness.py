import numpy as np
import pytest

from tqrobust.attacks import AttackConfig, loss_and_input_grad
from tqrobust.data import Dataset, synthesize_dataset
from tqrobust.harness import (
    ExperimentReport,
    Record,
    distillation_compare,
    epsilon_sweep,
    evaluate_clean,
    evaluate_under_attack,
    kfold_robustness,
)
from tqrobust.model import LayerSpec, Model
from tqrobust.presets import build
from tqrobust.train import TrainConfig, train

BOUNDS = (-1.0, 1.0)
FGSM_LIST = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
KINDS = ["fgsm", "pgd", "cw_l2", "square", "boundary", "zoo"]
FAST = TrainConfig(epochs=5, batch_size=32, lr_max=0.01)


def dense(W, b, d):
    return Model([LayerSpec(kind="dense", units=len(b))], (d,), [{"kernel": np.asarray(W, float), "bias": np.asarray(b, float)}], [{}])


@pytest.fixture(scope="module")
def toy():
    ds = synthesize_dataset("gaussians", 200, seed=0)
    m = build("mlp", (2,), 2, seed=0)
    train(m, ds.x, ds.y, TrainConfig(epochs=30, batch_size=32, lr_max=0.01))
    return m, ds


def mlp(seed):
    return build("mlp", (2,), 2, seed=seed, hidden=(8,))


def test_constant_model_scores_one_tenth():
    y = np.repeat(np.arange(10), 10)
    ds = Dataset(np.random.default_rng(0).normal(size=(100, 4)), y, 10, (-5, 5))
    assert evaluate_clean(dense(np.zeros((4, 10)), np.zeros(10), 4), ds) == 0.1


def test_lookup_model_scores_one():
    y = np.random.default_rng(1).integers(0, 5, 60)
    ds = Dataset(np.eye(5)[y], y, 5, (0, 1))
    assert evaluate_clean(dense(np.eye(5), np.zeros(5), 5), ds) == 1.0


def test_empty_dataset_rejected():
    ds = Dataset(np.zeros((0, 2)), np.zeros(0, int), 2, BOUNDS)
    with pytest.raises(ValueError):
        evaluate_clean(mlp(0), ds)
    with pytest.raises(ValueError):
        evaluate_under_attack(mlp(0), ds, AttackConfig(kind="fgsm"))


def test_held_out_accuracy(toy):
    m, _ = toy
    # the cluster centres do not depend on the seed, so a fresh draw is held-out data
    # from the same Bayes-separable distribution
    held = synthesize_dataset("gaussians", 400, seed=99)
    assert evaluate_clean(m, held) >= 0.95


@pytest.mark.parametrize("kind", KINDS)
def test_epsilon_zero_matches_clean(toy, kind):
    m, ds = toy
    norm = "l2" if kind in ("cw_l2", "boundary") else "inf"
    acc, _ = evaluate_under_attack(m, ds, AttackConfig(kind=kind, epsilon=0.0, norm=norm, input_bounds=BOUNDS))
    assert acc == evaluate_clean(m, ds)


@pytest.mark.parametrize("kind", KINDS)
def test_constant_model_is_unaffected(kind):
    ds = synthesize_dataset("gaussians", 40, seed=3)
    m = dense(np.zeros((2, 2)), [0.0, 1.0], 2)
    norm = "l2" if kind in ("cw_l2", "boundary") else "inf"
    cfg = AttackConfig(kind=kind, epsilon=0.3, norm=norm, input_bounds=BOUNDS, max_iter=20)
    if kind == "boundary":
        # no input is ever classified differently, so the walk has no starting point
        with pytest.raises(RuntimeError, match="cannot seed boundary attack"):
            evaluate_under_attack(m, ds, cfg)
        return
    acc, _ = evaluate_under_attack(m, ds, cfg)
    assert acc == evaluate_clean(m, ds) == 0.5


def test_fgsm_sweep_is_monotone_and_losses_rise(toy):
    m, ds = toy
    rep = epsilon_sweep(m, ds, AttackConfig(kind="fgsm", input_bounds=BOUNDS), FGSM_LIST, "mlp", "fp")
    acc = [r.accuracy for r in rep.records]
    assert [r.epsilon for r in rep.records] == FGSM_LIST
    assert len(rep.records) == 6
    assert all(b <= a + 0.02 for a, b in zip(acc, acc[1:]))
    # per-sample losses at the adversarial points explain the trend
    means = []
    for e in FGSM_LIST:
        _, batch = evaluate_under_attack(m, ds, AttackConfig(kind="fgsm", epsilon=e, input_bounds=BOUNDS))
        means.append(float(loss_and_input_grad(m, batch.x_adv, ds.y)[0].mean()))
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_sweep_edge_cases(toy):
    m, ds = toy
    rep = epsilon_sweep(m, ds, AttackConfig(kind="fgsm", input_bounds=BOUNDS), [0.0])
    assert len(rep.records) == 1 and rep.records[0].accuracy == evaluate_clean(m, ds)
    with pytest.raises(ValueError):
        epsilon_sweep(m, ds, AttackConfig(kind="fgsm"), [])
    with pytest.raises(ValueError):
        epsilon_sweep(m, ds, AttackConfig(kind="fgsm"), [0.2, 0.1])


def test_sweep_is_deterministic(toy):
    m, ds = toy
    cfg = AttackConfig(kind="square", input_bounds=BOUNDS, seed=4, max_iter=30)
    a = epsilon_sweep(m, ds, cfg, [0.1, 0.3])
    b = epsilon_sweep(m, ds, cfg, [0.1, 0.3])
    assert a.to_csv() == b.to_csv()


def test_pgd_sweep_keeps_step_inside_ball(toy):
    m, ds = toy
    cfg = AttackConfig(kind="pgd", epsilon=32 / 255, alpha=2 / 255, max_iter=7, input_bounds=BOUNDS)
    rep = epsilon_sweep(m, ds, cfg, [1 / 255, 8 / 255, 16 / 255, 32 / 255])
    assert len(rep.records) == 4


@pytest.fixture(scope="module")
def kfold_report():
    ds = synthesize_dataset("gaussians", 500, seed=1)
    attacks = [AttackConfig(kind="fgsm", epsilon=0.1, input_bounds=BOUNDS)]
    return kfold_robustness(mlp, ds, FAST, attacks, K=5, name="mlp", quantizer="fp")


def test_kfold_records_per_condition(kfold_report):
    rep = kfold_report
    assert rep.conditions() == [("mlp", "fp", "clean", 0.0), ("mlp", "fp", "fgsm", 0.1)]
    for c in rep.conditions():
        folds = [r.fold for r in rep.records if r.condition == c]
        assert folds == [0, 1, 2, 3, 4]
    assert all(0 <= r.accuracy <= 1 for r in rep.records)


def test_kfold_mean_and_std_recomputed(kfold_report):
    for c in kfold_report.conditions():
        acc = [r.accuracy for r in kfold_report.records if r.condition == c]
        mean, std = kfold_report.stats(c)
        assert abs(mean - np.mean(acc)) <= 1e-12
        assert abs(std - np.std(acc)) <= 1e-12 and std >= 0


def test_std_zero_for_identical_folds():
    rep = ExperimentReport(K=5, records=[Record("m", "fp", "clean", 0.0, f, 0.8, 10) for f in range(5)])
    assert rep.stats(("m", "fp", "clean", 0.0)) == (0.8, 0.0)


def test_csv_layout(kfold_report):
    lines = kfold_report.to_csv().splitlines()
    assert lines[0] == "model,quantizer,attack,epsilon,fold,accuracy,mean,std,footprint_bytes,seconds"
    assert len(lines) == 1 + 10
    assert all(line.endswith(",") for line in lines[1:])
    table = kfold_report.summary_table().splitlines()
    assert table[0].split() == ["model", "quantizer", "clean", "fgsm@0.1"]


def test_kfold_is_deterministic(kfold_report):
    ds = synthesize_dataset("gaussians", 500, seed=1)
    attacks = [AttackConfig(kind="fgsm", epsilon=0.1, input_bounds=BOUNDS)]
    again = kfold_robustness(mlp, ds, FAST, attacks, K=5, name="mlp", quantizer="fp")
    assert again.to_csv() == kfold_report.to_csv()


def test_distill_t1_equals_kfold():
    ds = synthesize_dataset("gaussians", 100, seed=2)
    attacks = [AttackConfig(kind="fgsm", epsilon=0.2, input_bounds=BOUNDS)]
    cfg = TrainConfig(epochs=3, batch_size=16, lr_max=0.01)
    a = distillation_compare(mlp, ds, cfg, attacks, [1.0], K=3, name="mlp", quantizer="fp")
    b = kfold_robustness(mlp, ds, cfg, attacks, K=3, name="mlp", quantizer="fp")
    assert a.to_csv() == b.to_csv()


def test_distill_two_temperatures_with_finite_losses():
    ds = synthesize_dataset("gaussians", 100, seed=2)
    attacks = [AttackConfig(kind="fgsm", epsilon=0.2, input_bounds=BOUNDS)]
    seen = {}
    rep = distillation_compare(
        mlp, ds, TrainConfig(epochs=4, batch_size=16, lr_max=0.01), attacks, [1.0, 50.0], K=3,
        name="mlp", quantizer="fp", on_history=lambda T, fold, h: seen.setdefault(T, []).append(h),
    )
    models = sorted({r.model for r in rep.records})
    assert models == ["mlp", "mlp-T50"]
    assert len(rep.summary_table().splitlines()) == 2 + 2
    assert len(seen[50.0]) == 3
    assert all(np.isfinite(e.loss) for h in seen[50.0] for e in h)
    with pytest.raises(ValueError):
        distillation_compare(mlp, ds, FAST, attacks, [0.0])
