"""Input-output Jacobians of a model and sensitivity diagnostics built on them.

Quantized models are differentiated along the straight-through path (the
quantizers' true derivative is zero almost everywhere, which tells nothing).
Pass ``mode="full_precision"`` to bypass quantizers altogether.

Two independent routes are provided: reverse mode (one backward pass per
logit, giving rows) and forward tangents (one tangent per input coordinate,
giving columns). They share the forward trace and nothing else.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .model import Model, layer_jvp, propagate_tangents, trace
from .tensor import Tape


@dataclass(frozen=True)
class JacobianMatrix:
    matrix: np.ndarray  # (out_dim, in_dim)
    point: np.ndarray  # evaluation point, flattened
    layer: int  # 1-based layer index, or L for the full network

    @property
    def shape(self):
        return self.matrix.shape


def _single(model: Model, x) -> np.ndarray:
    x = np.asarray(tn.as_array(x), dtype=np.float64)
    if x.shape == model.input_shape:
        return x[None]
    if x.shape == (1,) + model.input_shape:
        return x
    if x.ndim == len(model.input_shape) + 1:
        raise ValueError(f"single sample required, got batch of {x.shape[0]}")
    raise ValueError(f"input shape {x.shape} does not match model input {model.input_shape}")


def _quantized(mode: str) -> bool:
    if mode not in ("quantized", "full_precision"):
        raise ValueError(f"unknown mode {mode!r}")
    return mode == "quantized"


def _softmax_jacobian(p: np.ndarray) -> np.ndarray:
    return np.diag(p) - np.outer(p, p)


def jacobian_full(model: Model, x, mode: str = "quantized", post_softmax: bool = False) -> JacobianMatrix:
    """K x D Jacobian of the logits by reverse mode, one backward pass per output."""
    x = _single(model, x)
    tape = Tape()
    xv = tape.leaf(x)
    tr = trace(model, tape, xv, quantized=_quantized(mode), training=False)
    z = tn.reshape(tr.logits, (1, -1))
    k = z.shape[1]
    rows = []
    for j in range(k):
        sel = np.zeros((1, k))
        sel[0, j] = 1.0
        root = tn.reduce_sum(tn.mul_const(z, sel))
        (g,) = tape.grad(root, [xv])
        rows.append(g.reshape(-1))
    J = np.stack(rows) if rows else np.zeros((0, x.size))
    if post_softmax:
        J = _softmax_jacobian(tn.softmax(z.value)[0]) @ J
    return JacobianMatrix(J, x.reshape(-1).copy(), len(model.layers))


def jacobian_columns(model: Model, x, mode: str = "quantized") -> JacobianMatrix:
    """Same matrix as :func:`jacobian_full`, built column by column from forward tangents."""
    x = _single(model, x)
    d = x.size
    tape = Tape()
    tr = trace(model, tape, tape.const(x), quantized=_quantized(mode), training=False)
    t0 = tape.const(np.eye(d).reshape((d,) + model.input_shape))
    t = propagate_tangents(model, tr, t0, d)
    J = t.value.reshape(d, -1).T.copy()
    return JacobianMatrix(J, x.reshape(-1).copy(), len(model.layers))


def jr_frobenius(model: Model, x, mode: str = "quantized", form: str = "rows") -> float:
    """Squared Frobenius norm of the logit Jacobian at one input.

    ``form="rows"`` sums squared logit gradients (reverse mode);
    ``form="entries"`` sums squared partials coordinate by coordinate (forward tangents).
    """
    if form == "rows":
        J = jacobian_full(model, x, mode).matrix
        return float(sum(float(np.dot(r, r)) for r in J))
    if form == "entries":
        J = jacobian_columns(model, x, mode).matrix
        total = 0.0
        for d in range(J.shape[1]):
            for k in range(J.shape[0]):
                total += J[k, d] ** 2
        return float(total)
    raise ValueError(f"unknown form {form!r}")


def layer_inputs(model: Model, x, mode: str = "quantized") -> list[np.ndarray]:
    """Input activation of every layer at ``x`` (batch axis kept)."""
    tape = Tape()
    tr = trace(model, tape, tape.const(np.asarray(x, dtype=np.float64)), quantized=_quantized(mode))
    return [v.value for v in tr.inputs]


def jacobian_per_layer(model: Model, x, l: int, mode: str = "quantized") -> JacobianMatrix:
    """Jacobian of layer ``l``'s output w.r.t. its own input (1-based ``l``).

    Residual adds count their main operand only; the skip branch is held fixed.
    """
    if not isinstance(l, (int, np.integer)) or not 1 <= l <= len(model.layers):
        raise ValueError(f"layer index must lie in [1, {len(model.layers)}], got {l}")
    x = _single(model, x)
    i = int(l) - 1
    tape = Tape()
    tr = trace(model, tape, tape.const(x), quantized=_quantized(mode), training=False)
    in_shape = model.layer_input_shape(i)
    n = int(np.prod(in_shape))
    t0 = tape.const(np.eye(n).reshape((n,) + in_shape))
    t = layer_jvp(model, tr, i, t0, n)
    J = t.value.reshape(n, -1).T.copy()
    return JacobianMatrix(J, tr.inputs[i].value.reshape(-1).copy(), int(l))


def chain_product(model: Model, x, mode: str = "quantized") -> np.ndarray:
    """J_L ... J_1 from the per-layer Jacobians.

    A residual add contributes the cumulative Jacobian of its skip source on
    top of the product along the main path.
    """
    x = _single(model, x)
    cum: list[np.ndarray] = []
    eye = np.eye(x.size)
    out = eye
    for l in range(1, len(model.layers) + 1):
        out = jacobian_per_layer(model, x, l, mode).matrix @ out
        spec = model.layers[l - 1]
        if spec.kind == "residual_add":
            out = out + (eye if spec.source == -1 else cum[spec.source])
        cum.append(out)
    return out


@dataclass(frozen=True)
class SensitivityRecord:
    ratio: float
    max_frob: float
    holds: bool

    def csv_row(self) -> list[str]:
        return [repr(self.ratio), repr(self.max_frob), "true" if self.holds else "false"]


PROBE_HEADER = ["ratio", "max_frob", "holds"]


def _sub_model(model: Model, l: int) -> Model:
    spec = model.layers[l - 1]
    if spec.kind == "residual_add":
        raise ValueError("per-layer probe is undefined for residual adds")
    return Model([spec], model.layer_input_shape(l - 1), [model.params[l - 1]], [model.state[l - 1]])


def sensitivity_probe(
    model: Model,
    x,
    x_p,
    n_segment_samples: int = 16,
    mode: str = "quantized",
    layer: int | None = None,
) -> SensitivityRecord:
    """Output/input squared distance ratio against the largest sampled ||J||_F^2 on [x, x_p].

    With ``layer`` set, the same probe runs on that single layer between the
    activations that ``x`` and ``x_p`` induce at its input.
    """
    if n_segment_samples < 2:
        raise ValueError("n_segment_samples must be >= 2")
    x = _single(model, x)
    x_p = _single(model, x_p)
    if layer is not None:
        if not 1 <= layer <= len(model.layers):
            raise ValueError(f"layer index must lie in [1, {len(model.layers)}], got {layer}")
        sub = _sub_model(model, layer)
        x = layer_inputs(model, x, mode)[layer - 1]
        x_p = layer_inputs(model, x_p, mode)[layer - 1]
        model = sub
    delta = x_p - x
    den = float(np.sum(delta**2))
    if den == 0.0:
        raise ValueError("x and x_p coincide; ratio undefined")
    tape = Tape()
    both = tape.const(np.concatenate([x, x_p]))
    z = trace(model, tape, both, quantized=_quantized(mode)).logits.value.reshape(2, -1)
    ratio = float(np.sum((z[1] - z[0]) ** 2)) / den
    max_frob = max(
        jr_frobenius(model, x + s * delta, mode) for s in np.linspace(0.0, 1.0, n_segment_samples)
    )
    # slack for round-off when the bound is tight (rank-one linear maps)
    holds = ratio <= max_frob * (1.0 + 1e-12)
    return SensitivityRecord(ratio, float(max_frob), bool(holds))


def write_probe_csv(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PROBE_HEADER)
        for r in records:
            w.writerow(r.csv_row())
