"""Untargeted adversarial attacks.

White-box kinds (fgsm, pgd, cw_l2) read input gradients off the tape.
Black-box kinds (square, boundary, zoo) only ever see an oracle object:
:class:`ScoreOracle` exposes logits and labels, :class:`DecisionOracle`
exposes labels only. Both count queries.
"""

from __future__ import annotations

import csv
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from . import tensor as tn
from .model import Model, forward, predict, trace, write_tensor
from .tensor import Tape

AttackKind = Literal["fgsm", "pgd", "cw_l2", "square", "boundary", "zoo"]
LINF_KINDS = ("fgsm", "pgd", "square", "zoo")
BLACK_BOX = ("square", "boundary", "zoo")


class AttackConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: AttackKind
    epsilon: float = 0.3
    alpha: float | None = None  # pgd / zoo step; pgd defaults to epsilon / 4
    max_iter: int = 10
    norm: Literal["inf", "l2"] = "inf"
    random_start: bool = False
    cw_confidence: float = 0.0
    cw_c: float = 1.0
    cw_lr: float = 0.01
    cw_search_steps: int = 1  # >1 turns on binary search over c
    query_budget: int = 0  # 0 = limited by max_iter only
    p_init: float = 0.05  # square: initial fraction of pixels per patch
    zoo_h: float = 1e-4
    zoo_coords: int = 128
    seed: int = 0
    input_bounds: tuple[float, float] = (0.0, 1.0)
    # multiplier applied to epsilon and alpha, e.g. 255 for inputs scaled to [-128, 127]
    eps_scale: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.kind == "pgd" and self.alpha is not None and self.alpha > self.epsilon:
            raise ValueError(f"pgd step alpha={self.alpha} exceeds epsilon={self.epsilon}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.cw_c > 0:
            raise ValueError("cw_c must be > 0")
        if self.cw_confidence < 0:
            raise ValueError("cw_confidence must be >= 0")
        if self.cw_search_steps < 1:
            raise ValueError("cw_search_steps must be >= 1")
        if self.query_budget < 0:
            raise ValueError("query_budget must be >= 0")
        if not 0 < self.p_init <= 1:
            raise ValueError("p_init must lie in (0, 1]")
        if not self.zoo_h > 0 or self.zoo_coords < 1:
            raise ValueError("zoo_h must be > 0 and zoo_coords >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        lo, hi = self.input_bounds
        if not lo < hi:
            raise ValueError("input_bounds must satisfy lo < hi")
        if not self.eps_scale > 0:
            raise ValueError("eps_scale must be > 0")
        if self.kind in LINF_KINDS and self.norm != "inf":
            raise ValueError(f"{self.kind} is implemented for the l-inf ball only")
        return self

    @property
    def eps(self) -> float:
        return self.epsilon * self.eps_scale

    @property
    def step(self) -> float:
        if self.alpha is not None:
            return self.alpha * self.eps_scale
        if self.kind == "zoo":
            return 2.5 * self.eps / self.max_iter
        return self.eps / 4.0


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    success: np.ndarray  # bool, prediction on x_adv differs from the true label
    queries: np.ndarray  # int, model evaluations spent per sample
    norms: np.ndarray  # achieved perturbation size (l-inf or l2, see norm)
    norm: str = "inf"
    history: list = field(default_factory=list)  # per-sample traces (loss or distance)

    def __len__(self):
        return len(self.x_adv)


def _norms(x_adv: np.ndarray, x: np.ndarray, norm: str) -> np.ndarray:
    d = (x_adv - x).reshape(len(x), -1)
    if norm == "inf":
        return np.abs(d).max(axis=1) if d.shape[1] else np.zeros(len(x))
    return np.sqrt((d**2).sum(axis=1))


def _per_sample_seed(seed: int, index: int) -> int:
    return (int(seed) ^ int(index)) & (2**64 - 1)


def _project(x_new: np.ndarray, x: np.ndarray, eps: float, bounds) -> np.ndarray:
    lo, hi = bounds
    return np.clip(np.clip(x_new, x - eps, x + eps), lo, hi)


# ---------------------------------------------------------------------------
# oracles


class DecisionOracle:
    """Top-1 label access to a model (or any batch -> labels callable)."""

    def __init__(self, model: Model | Callable, mode: str = "quantized"):
        if isinstance(model, Model):
            self._labels = lambda x: predict(model, x, mode)
        else:
            self._labels = model
        self._lock = threading.Lock()
        self.queries = 0

    def _count(self, n: int):
        with self._lock:
            self.queries += n

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._count(len(x))
        return np.asarray(self._labels(x))


class ScoreOracle(DecisionOracle):
    """Logit access to a model (or any batch -> logits callable)."""

    def __init__(self, model: Model | Callable, mode: str = "quantized"):
        if isinstance(model, Model):
            scores = lambda x: forward(model, x, mode)  # noqa: E731
        else:
            scores = model
        self._scores = scores
        super().__init__(lambda x: np.argmax(scores(x), axis=1))

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._count(len(x))
        return np.asarray(self._scores(x), dtype=np.float64)


# ---------------------------------------------------------------------------
# white box


def loss_and_input_grad(model: Model, x, y, mode: str = "quantized"):
    """Per-sample cross-entropy and its gradient w.r.t. the input batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    tape = Tape()
    xv = tape.leaf(x)
    tr = trace(model, tape, xv, quantized=mode == "quantized", training=False)
    yh = np.zeros((len(y), model.num_classes))
    yh[np.arange(len(y)), y] = 1.0
    loss = tn.softmax_cross_entropy(tr.logits, yh, reduction="sum")
    (g,) = tape.grad(loss, [xv])
    p = tn.softmax(tr.logits.value)
    per = -np.log(np.maximum(p[np.arange(len(y)), y], tn.LOG_FLOOR))
    return per, g


def _finish(model, x, y, x_adv, queries, norm, history=None, mode="quantized") -> AdversarialBatch:
    success = predict(model, x_adv, mode) != np.asarray(y)
    return AdversarialBatch(
        x_adv, success, np.asarray(queries, dtype=np.int64), _norms(x_adv, x, norm), norm, history or []
    )


def fgsm(model: Model, x, y, config: AttackConfig, mode: str = "quantized") -> AdversarialBatch:
    """x' = clip(x + eps * sign(grad_x L)); sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    _, g = loss_and_input_grad(model, x, y, mode)
    x_adv = np.clip(x + config.eps * np.sign(g), *config.input_bounds)
    return _finish(model, x, y, x_adv, np.ones(len(x)), "inf", mode=mode)


def pgd(model: Model, x, y, config: AttackConfig, mode: str = "quantized") -> AdversarialBatch:
    """Signed-gradient ascent projected onto the l-inf ball intersected with the bounds.

    ``history`` holds the summed loss at every iterate, the last one included.
    """
    x = np.asarray(x, dtype=np.float64)
    eps, alpha = config.eps, config.step
    if alpha > eps * (1 + 1e-12) and eps > 0:
        raise ValueError(f"pgd step {alpha} exceeds epsilon {eps}")
    x_adv = x.copy()
    if config.random_start and eps > 0:
        for i in range(len(x)):
            rng = np.random.default_rng(_per_sample_seed(config.seed, i))
            x_adv[i] = x[i] + rng.uniform(-eps, eps, size=x[i].shape)
        x_adv = _project(x_adv, x, eps, config.input_bounds)
    losses = []
    for _ in range(config.max_iter):
        per, g = loss_and_input_grad(model, x_adv, y, mode)
        losses.append(float(per.sum()))
        x_adv = _project(x_adv + alpha * np.sign(g), x, eps, config.input_bounds)
    per, _ = loss_and_input_grad(model, x_adv, y, mode)
    losses.append(float(per.sum()))
    return _finish(model, x, y, x_adv, np.full(len(x), config.max_iter), "inf", losses, mode)


def _cw_round(model, x, y, c, config, mode):
    """Adam on the tanh-space variable for fixed per-sample constants ``c``."""
    lo, hi = config.input_bounds
    half = (hi - lo) / 2.0
    kappa = config.cw_confidence
    k = model.num_classes
    yh = np.zeros((len(y), k))
    yh[np.arange(len(y)), y] = 1.0
    u = np.clip((x - lo) / half - 1.0, -1 + 1e-9, 1 - 1e-9)
    w = np.arctanh(u)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2 = 0.9, 0.999
    n = len(x)
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, dtype=bool)
    cshape = (n,) + (1,) * (x.ndim - 1)
    for it in range(1, config.max_iter + 1):
        tape = Tape()
        wv = tape.leaf(w)
        xa = tn.add_const(tn.scale(tn.add_const(tn.tanh(wv), 1.0), half), lo)
        d = tn.sub(xa, tape.const(x))
        l2 = tn.reduce_sum(tn.square(d))
        z = trace(model, tape, xa, quantized=mode == "quantized", training=False).logits
        margin = tn.sub(tn.reduce_sum(tn.mul_const(z, yh), axis=1), tn.masked_max(z, yh.astype(bool), axis=1))
        hinge = tn.relu(tn.add_const(margin, kappa))
        total = tn.add(l2, tn.reduce_sum(tn.mul_const(hinge, c)))
        (g,) = tape.grad(total, [wv])
        # bookkeeping on the iterate that was just evaluated
        xv = xa.value
        dist = np.sqrt(((xv - x) ** 2).reshape(n, -1).sum(axis=1))
        ok = (np.argmax(z.value, axis=1) != y) & (margin.value <= -kappa)
        better = ok & (dist < best_l2)
        best[better] = xv[better]
        best_l2[better] = dist[better]
        found |= ok
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**it)
        vh = v / (1 - b2**it)
        w = w - config.cw_lr * mh / (np.sqrt(vh) + 1e-8)
    final = np.clip(lo + half * (np.tanh(w) + 1.0), lo, hi)
    # the last Adam update produced an iterate the loop never scored
    z = forward(model, final, mode)
    zt = z[np.arange(n), y]
    margin = zt - np.where(yh.astype(bool), -np.inf, z).max(axis=1)
    ok = (np.argmax(z, axis=1) != y) & (margin <= -kappa)
    dist = np.sqrt(((final - x) ** 2).reshape(n, -1).sum(axis=1))
    better = ok & (dist < best_l2)
    best[better] = final[better]
    found |= ok
    return best, found, final


def cw_l2(model: Model, x, y, config: AttackConfig, mode: str = "quantized") -> AdversarialBatch:
    """Minimize ||delta||^2 + c * max(z_t - max_{j != t} z_j, -kappa) in tanh space.

    Returns the smallest successful iterate per sample, else the last iterate.
    Samples already misclassified are returned untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    lo, hi = config.input_bounds
    clean_wrong = predict(model, x, mode) != y
    x_out = x.copy()
    todo = np.flatnonzero(~clean_wrong)
    if len(todo):
        xs, ys = x[todo], y[todo]
        c = np.full(len(todo), config.cw_c)
        lower = np.zeros(len(todo))
        upper = np.full(len(todo), np.inf)
        best = np.full(xs.shape, np.nan)
        best_l2 = np.full(len(todo), np.inf)
        last = xs.copy()
        for _ in range(config.cw_search_steps):
            cand, ok, final = _cw_round(model, xs, ys, c, config, mode)
            dist = np.sqrt(((cand - xs) ** 2).reshape(len(xs), -1).sum(axis=1))
            take = ok & (dist < best_l2)
            best[take] = cand[take]
            best_l2[take] = dist[take]
            last = np.where(np.isfinite(best_l2).reshape((-1,) + (1,) * (xs.ndim - 1)), last, final)
            upper = np.where(ok, np.minimum(upper, c), upper)
            lower = np.where(ok, lower, np.maximum(lower, c))
            c = np.where(np.isfinite(upper), (lower + upper) / 2.0, c * 10.0)
        won = np.isfinite(best_l2)
        res = np.where(won.reshape((-1,) + (1,) * (xs.ndim - 1)), best, last)
        x_out[todo] = np.clip(res, lo, hi)
    q = np.where(clean_wrong, 1, 1 + (config.max_iter + 1) * config.cw_search_steps)
    return _finish(model, x, y, x_out, q, "l2", mode=mode)


# ---------------------------------------------------------------------------
# black box


def _fan_out(fn, n: int, threads: int):
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def _margin(z: np.ndarray, y: int) -> float:
    """max_{j != y} z_j - z_y; positive means misclassified."""
    others = np.delete(z, y)
    return float(others.max() - z[y]) if others.size else float(-z[y])


def _as_image(shape):
    if len(shape) == 3:
        return shape
    if len(shape) == 2:
        return shape + (1,)
    return (1, int(np.prod(shape)), 1)


def square_schedule(p_init: float, progress: float) -> float:
    """Patch fraction halves each time ``progress`` passes 0.05, 0.1, 0.2 and 0.5."""
    halvings = sum(progress >= f for f in (0.05, 0.1, 0.2, 0.5))
    return p_init / 2**halvings


def _square_one(oracle: ScoreOracle, x: np.ndarray, y: int, config: AttackConfig, rng):
    eps = config.eps
    bounds = config.input_bounds
    budget = config.query_budget or config.max_iter + 1
    h, w, c = _as_image(x.shape)
    xi = x.reshape(h, w, c)
    q = 1
    z = oracle.logits(x[None])[0]
    if np.argmax(z) != y:
        return x.copy(), q, []
    stripes = eps * rng.choice([-1.0, 1.0], size=(1, w, c))
    best = _project(xi + stripes, xi, eps, bounds)
    q += 1
    best_loss = _margin(oracle.logits(best.reshape((1,) + x.shape))[0], y)
    trace_ = [best_loss]
    it = 1
    while best_loss <= 0 and it < config.max_iter and q < budget:
        p = square_schedule(config.p_init, it / config.max_iter)
        s = int(max(1, round(np.sqrt(p * h * w))))
        s = min(s, h, w)
        r0 = int(rng.integers(0, h - s + 1))
        c0 = int(rng.integers(0, w - s + 1))
        cand = best.copy()
        cand[r0 : r0 + s, c0 : c0 + s, :] = xi[r0 : r0 + s, c0 : c0 + s, :] + eps * rng.choice(
            [-1.0, 1.0], size=(1, 1, c)
        )
        cand = _project(cand, xi, eps, bounds)
        q += 1
        loss = _margin(oracle.logits(cand.reshape((1,) + x.shape))[0], y)
        if loss > best_loss:
            best, best_loss = cand, loss
            trace_.append(loss)
        it += 1
    return best.reshape(x.shape), q, trace_


def _decide(oracle, x_adv, x, y, queries, norm, history) -> AdversarialBatch:
    success = oracle.predict(x_adv) != np.asarray(y)
    return AdversarialBatch(
        x_adv, success, np.asarray(queries, dtype=np.int64), _norms(x_adv, x, norm), norm, history
    )


def square_attack(oracle: ScoreOracle, x, y, config: AttackConfig, threads: int = 1) -> AdversarialBatch:
    """Random-search l-inf attack: vertical-stripe init, then random square patches at +-eps.

    A proposal is kept only if the margin loss strictly improves.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def one(i):
        rng = np.random.default_rng(_per_sample_seed(config.seed, i))
        return _square_one(oracle, x[i], int(y[i]), config, rng)

    res = _fan_out(one, len(x), threads)
    x_adv = np.stack([r[0] for r in res]) if res else x.copy()
    return _decide(oracle, x_adv, x, y, [r[1] for r in res], "inf", [r[2] for r in res])


def _boundary_one(oracle: DecisionOracle, x: np.ndarray, y: int, config: AttackConfig, rng):
    lo, hi = config.input_bounds
    budget = config.query_budget or None
    q = 1
    if oracle.predict(x[None])[0] != y:
        return x.copy(), q, [0.0]
    start = None
    for _ in range(100):
        cand = rng.uniform(lo, hi, size=x.shape)
        q += 1
        if oracle.predict(cand[None])[0] != y:
            start = cand
            break
    if start is None:
        raise RuntimeError("cannot seed boundary attack")
    # pull the random start toward x along the straight line while it stays adversarial
    a, b = 0.0, 1.0
    for _ in range(10):
        mid = (a + b) / 2.0
        q += 1
        if oracle.predict((x + mid * (start - x))[None])[0] != y:
            b = mid
        else:
            a = mid
    adv = x + b * (start - x)
    dist = float(np.linalg.norm(adv - x))
    dists = [dist]
    orth = src = config.epsilon
    tried = accepted = 0
    for _ in range(config.max_iter):
        if budget is not None and q >= budget:
            break
        if dist == 0.0:
            break
        eta = rng.standard_normal(x.shape)
        eta *= orth * dist / np.linalg.norm(eta)
        cand = adv + eta
        # back onto the sphere of radius dist around x, then step toward x
        cand = x + (cand - x) * (dist / np.linalg.norm(cand - x))
        cand = cand + src * (x - cand)
        cand = np.clip(cand, lo, hi)
        new_dist = float(np.linalg.norm(cand - x))
        q += 1
        tried += 1
        if new_dist <= dist and oracle.predict(cand[None])[0] != y:
            adv, dist = cand, new_dist
            dists.append(dist)
            accepted += 1
        if tried == 10:
            rate = accepted / tried
            if rate > 0.5:
                orth, src = min(orth * 1.5, 1.0), min(src * 1.5, 0.5)
            elif rate < 0.2:
                orth, src = max(orth / 1.5, 1e-6), max(src / 1.5, 1e-6)
            tried = accepted = 0
    return adv, q, dists


def boundary_attack(oracle: DecisionOracle, x, y, config: AttackConfig, threads: int = 1) -> AdversarialBatch:
    """Decision-only l2 attack: start from misclassified noise and walk toward x
    along the decision boundary, keeping only misclassified, no-farther iterates.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def one(i):
        rng = np.random.default_rng(_per_sample_seed(config.seed, i))
        return _boundary_one(oracle, x[i], int(y[i]), config, rng)

    res = _fan_out(one, len(x), threads)
    x_adv = np.stack([r[0] for r in res]) if res else x.copy()
    return _decide(oracle, x_adv, x, y, [r[1] for r in res], "l2", [r[2] for r in res])


def zoo_gradient_estimate(loss_fn: Callable[[np.ndarray], np.ndarray], x, coords, h: float = 1e-4) -> np.ndarray:
    """Symmetric differences along the flat coordinates ``coords``.

    ``loss_fn`` maps a batch of inputs to a vector of losses and is called
    once with all 2 * len(coords) probes.
    """
    x = np.asarray(x, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64)
    m = len(coords)
    flat = x.reshape(-1)
    probes = np.repeat(flat[None], 2 * m, axis=0)
    probes[np.arange(m), coords] += h
    probes[m + np.arange(m), coords] -= h
    vals = np.asarray(loss_fn(probes.reshape((2 * m,) + x.shape)), dtype=np.float64)
    return (vals[:m] - vals[m:]) / (2.0 * h)


def _ce_from_logits(z: np.ndarray, y: int) -> np.ndarray:
    p = tn.softmax(z)
    return -np.log(np.maximum(p[:, y], tn.LOG_FLOOR))


def _zoo_one(oracle: ScoreOracle, x: np.ndarray, y: int, config: AttackConfig, rng):
    eps, alpha, h = config.eps, config.step, config.zoo_h
    bounds = config.input_bounds
    budget = config.query_budget or None
    q = 1
    z = oracle.logits(x[None])[0]
    if np.argmax(z) != y:
        return x.copy(), q, []
    d = x.size
    m = min(config.zoo_coords, d)
    adv = x.copy()
    losses = []
    if eps == 0:
        return adv, q, losses
    for _ in range(config.max_iter):
        if budget is not None and q + 2 * m + 1 > budget:
            break
        coords = np.sort(rng.choice(d, size=m, replace=False))
        g = zoo_gradient_estimate(lambda b: _ce_from_logits(oracle.logits(b), y), adv, coords, h)
        q += 2 * m
        flat = adv.reshape(-1).copy()
        flat[coords] += alpha * np.sign(g)
        adv = _project(flat.reshape(x.shape), x, eps, bounds)
        q += 1
        z = oracle.logits(adv[None])[0]
        losses.append(float(_ce_from_logits(z[None], y)[0]))
        if np.argmax(z) != y:
            break
    return adv, q, losses


def zoo_attack(oracle: ScoreOracle, x, y, config: AttackConfig, threads: int = 1) -> AdversarialBatch:
    """Zeroth-order signed ascent: symmetric-difference gradient estimates on a
    random coordinate subset per iteration, projected onto the l-inf ball.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def one(i):
        rng = np.random.default_rng(_per_sample_seed(config.seed, i))
        return _zoo_one(oracle, x[i], int(y[i]), config, rng)

    res = _fan_out(one, len(x), threads)
    x_adv = np.stack([r[0] for r in res]) if res else x.copy()
    return _decide(oracle, x_adv, x, y, [r[1] for r in res], "inf", [r[2] for r in res])


# ---------------------------------------------------------------------------
# dispatch, presets, persistence


def run_attack(model: Model, x, y, config: AttackConfig, threads: int = 1, mode: str = "quantized") -> AdversarialBatch:
    """Run ``config.kind`` against ``model``.

    A zero budget (epsilon 0) is the identity attack for every kind, so that
    accuracy at epsilon 0 always equals clean accuracy.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty batch")
    if config.epsilon == 0:
        norm = "inf" if config.kind in LINF_KINDS else "l2"
        return _finish(model, x, y, x.copy(), np.zeros(len(x)), norm, mode=mode)
    if config.kind == "fgsm":
        return fgsm(model, x, y, config, mode)
    if config.kind == "pgd":
        return pgd(model, x, y, config, mode)
    if config.kind == "cw_l2":
        return cw_l2(model, x, y, config, mode)
    if config.kind == "square":
        return square_attack(ScoreOracle(model, mode), x, y, config, threads)
    if config.kind == "boundary":
        return boundary_attack(DecisionOracle(model, mode), x, y, config, threads)
    if config.kind == "zoo":
        return zoo_attack(ScoreOracle(model, mode), x, y, config, threads)
    raise ValueError(f"unknown attack kind {config.kind!r}")


PRESETS: dict[str, AttackConfig] = {
    "fgsm": AttackConfig(kind="fgsm", epsilon=0.3),
    "pgd": AttackConfig(kind="pgd", epsilon=32 / 255, alpha=2 / 255, max_iter=7),
    "square": AttackConfig(kind="square", epsilon=0.3, max_iter=10),
    "square_long": AttackConfig(kind="square", epsilon=0.05, max_iter=10_000),
    "boundary": AttackConfig(kind="boundary", norm="l2", epsilon=0.01, max_iter=5000),
    "cw_l2": AttackConfig(kind="cw_l2", norm="l2", cw_c=1.0, max_iter=100),
    "zoo": AttackConfig(kind="zoo", epsilon=0.3, max_iter=10),
}
FGSM_SWEEP = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
PGD_SWEEP = (8 / 255, 16 / 255, 32 / 255)


def preset(name: str, **overrides) -> AttackConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return AttackConfig(**{**PRESETS[name].model_dump(), **overrides})


BATCH_HEADER = ["index", "success", "queries", "norm"]


def save_batch(batch: AdversarialBatch, prefix) -> tuple[str, str]:
    """Write ``<prefix>.bin`` (tensor payload) and ``<prefix>.csv`` (per-sample sidecar)."""
    prefix = str(prefix)
    with open(prefix + ".bin", "wb") as f:
        write_tensor(f, batch.x_adv)
    with open(prefix + ".csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BATCH_HEADER)
        for i in range(len(batch)):
            w.writerow([i, "true" if batch.success[i] else "false", int(batch.queries[i]), repr(float(batch.norms[i]))])
    return prefix + ".bin", prefix + ".csv"
