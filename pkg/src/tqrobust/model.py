"""Layer graphs with per-layer quantization.

A :class:`Model` is an ordered list of :class:`LayerSpec` plus full-precision
master parameters. :func:`trace` runs the layers on a tape, quantizing each
layer's weights before use and each layer's output before the next layer, and
keeps every intermediate around so that gradients, Jacobians and moving
statistics can be read off afterwards.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from . import tensor as tn
from .quantize import QuantizerSpec, StochasticSchedule, quantize_var, ste_mask
from .tensor import Tape, Var

LayerKind = Literal[
    "dense",
    "conv2d",
    "depthwise_conv2d",
    "separable_conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "residual_add",
    "flatten",
    "softmax_out",
]

QUANTIZED_PARAMS = ("kernel", "depthwise", "pointwise")


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: LayerKind
    units: int | None = None
    filters: int | None = None
    kernel_size: int = 3
    stride: int = 1
    padding: Literal["same", "valid"] = "same"
    use_bias: bool = True
    # residual_add: index of the earlier layer whose output is added (-1 = model input)
    source: int | None = None
    momentum: float = 0.99
    epsilon: float = 1e-5
    weight_quantizer: QuantizerSpec = QuantizerSpec()
    activation_quantizer: QuantizerSpec = QuantizerSpec()


class ShapeError(ValueError):
    pass


def _conv_out(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - k) // stride + 1


def infer_shapes(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> list[tuple[int, ...]]:
    """Output shape (without batch axis) of every layer; raises naming the bad layer."""
    shapes: list[tuple[int, ...]] = []
    cur = tuple(int(s) for s in input_shape)
    for i, spec in enumerate(layers):
        where = f"layer {i} ({spec.kind})"
        k = spec.kind
        if k == "dense":
            if len(cur) != 1:
                raise ShapeError(f"{where}: expects flat features, got {cur}")
            if not spec.units or spec.units < 1:
                raise ShapeError(f"{where}: units must be positive")
            cur = (spec.units,)
        elif k in ("conv2d", "depthwise_conv2d", "separable_conv2d"):
            if len(cur) != 3:
                raise ShapeError(f"{where}: expects (H, W, C) input, got {cur}")
            h, w, c = cur
            ho = _conv_out(h, spec.kernel_size, spec.stride, spec.padding)
            wo = _conv_out(w, spec.kernel_size, spec.stride, spec.padding)
            if ho < 1 or wo < 1:
                raise ShapeError(f"{where}: kernel does not fit input {cur}")
            if k == "depthwise_conv2d":
                cur = (ho, wo, c)
            else:
                if not spec.filters or spec.filters < 1:
                    raise ShapeError(f"{where}: filters must be positive")
                cur = (ho, wo, spec.filters)
        elif k == "residual_add":
            src = spec.source
            if src is None or not -1 <= src < i:
                raise ShapeError(f"{where}: source must index an earlier layer or -1")
            other = tuple(input_shape) if src == -1 else shapes[src]
            if other != cur:
                raise ShapeError(f"{where}: operand shapes differ {cur} vs {other}")
        elif k == "flatten":
            cur = (int(np.prod(cur)),)
        elif k == "softmax_out":
            if len(cur) != 1:
                raise ShapeError(f"{where}: expects flat logits, got {cur}")
        shapes.append(cur)
    return shapes


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_layer(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator):
    """Fresh (trainable, non-trainable) parameter dicts for one layer."""
    k = spec.kind
    ks = spec.kernel_size
    params: dict[str, np.ndarray] = {}
    state: dict[str, np.ndarray] = {}
    if k == "dense":
        n_in = in_shape[0]
        params["kernel"] = _glorot(rng, (n_in, spec.units), n_in, spec.units)
        if spec.use_bias:
            params["bias"] = np.zeros(spec.units)
    elif k == "conv2d":
        c = in_shape[2]
        params["kernel"] = _glorot(rng, (ks, ks, c, spec.filters), ks * ks * c, ks * ks * spec.filters)
        if spec.use_bias:
            params["bias"] = np.zeros(spec.filters)
    elif k == "depthwise_conv2d":
        c = in_shape[2]
        params["kernel"] = _glorot(rng, (ks, ks, c), ks * ks * c, ks * ks)
        if spec.use_bias:
            params["bias"] = np.zeros(c)
    elif k == "separable_conv2d":
        c = in_shape[2]
        params["depthwise"] = _glorot(rng, (ks, ks, c), ks * ks * c, ks * ks)
        params["pointwise"] = _glorot(rng, (1, 1, c, spec.filters), c, spec.filters)
        if spec.use_bias:
            params["bias"] = np.zeros(spec.filters)
    elif k == "batch_norm":
        c = in_shape[-1]
        params["gamma"] = np.ones(c)
        params["beta"] = np.zeros(c)
        state["moving_mean"] = np.zeros(c)
        state["moving_var"] = np.ones(c)
    return params, state


class Model:
    """Ordered layer stack with full-precision master parameters.

    ``params[i]`` holds the trainable tensors of layer ``i`` and ``state[i]``
    the non-trainable ones (batch-norm moving statistics).
    """

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        input_shape: Sequence[int],
        params: list[dict[str, np.ndarray]] | None = None,
        state: list[dict[str, np.ndarray]] | None = None,
        seed: int = 0,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        if params is None or state is None:
            rng = np.random.default_rng(seed)
            params, state = [], []
            for i, spec in enumerate(self.layers):
                p, s = init_layer(spec, self.layer_input_shape(i), rng)
                params.append(p)
                state.append(s)
        if len(params) != len(self.layers) or len(state) != len(self.layers):
            raise ValueError("need one parameter dict per layer")
        self.params = [{k: np.array(v, dtype=np.float64) for k, v in p.items()} for p in params]
        self.state = [{k: np.array(v, dtype=np.float64) for k, v in s.items()} for s in state]

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][-1] if self.layers else 0

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_input_shape(self, i: int) -> tuple[int, ...]:
        return self.input_shape if i == 0 else self.shapes[i - 1]

    def copy(self) -> "Model":
        return Model(self.layers, self.input_shape, self.params, self.state)

    def with_layers(self, layers: Sequence[LayerSpec]) -> "Model":
        """Same parameters under different layer specs (e.g. swapped quantizers)."""
        return Model(layers, self.input_shape, self.params, self.state)

    def __repr__(self):
        kinds = ", ".join(s.kind for s in self.layers)
        return f"Model(input={self.input_shape}, layers=[{kinds}])"


@dataclass
class Trace:
    """Everything recorded while running a model on a tape."""

    tape: Tape
    x: Var
    inputs: list[Var] = field(default_factory=list)
    pre: list[Var] = field(default_factory=list)  # layer outputs before the activation quantizer
    outputs: list[Var] = field(default_factory=list)
    params: list[dict[str, Var]] = field(default_factory=list)
    weights: list[dict[str, Var]] = field(default_factory=list)  # quantized copies actually used
    bn_stats: list[tuple[np.ndarray, np.ndarray] | None] = field(default_factory=list)
    quantized: bool = True
    training: bool = False

    @property
    def logits(self) -> Var:
        return self.outputs[-1] if self.outputs else self.x


def _check_input(model: Model, x: np.ndarray):
    if x.shape[1:] != model.input_shape or x.ndim != len(model.input_shape) + 1:
        first = model.layers[0].kind if model.layers else "input"
        raise ShapeError(
            f"layer 0 ({first}): expected input of shape (batch, {', '.join(map(str, model.input_shape))}), got {x.shape}"
        )


def trace(
    model: Model,
    tape: Tape,
    x: Var,
    *,
    quantized: bool = True,
    training: bool = False,
    step: int = 0,
    schedule: StochasticSchedule | None = None,
    rng: np.random.Generator | None = None,
    param_grad: bool = False,
    noise_std: float = 0.0,
) -> Trace:
    """Run ``model`` on tape value ``x``.

    Outside training, stochastic quantizers collapse to their deterministic
    images and batch norm uses the moving statistics. ``noise_std`` > 0 adds
    Gaussian noise to every layer output while training (off by default).
    """
    _check_input(model, x.value)
    tr = Trace(tape=tape, x=x, quantized=quantized, training=training)
    h = x
    for i, spec in enumerate(model.layers):
        pv = {k: tape.leaf(v, requires_grad=param_grad) for k, v in model.params[i].items()}
        wq = {}
        for k, v in pv.items():
            if quantized and k in QUANTIZED_PARAMS:
                q = spec.weight_quantizer if training else spec.weight_quantizer.deterministic()
                wq[k] = quantize_var(q, v, step, schedule, rng)
            else:
                wq[k] = v
        tr.inputs.append(h)
        stats = None
        kind = spec.kind
        if kind == "dense":
            out = tn.matmul(h, wq["kernel"])
        elif kind == "conv2d":
            out = tn.conv2d(h, wq["kernel"], spec.stride, spec.padding)
        elif kind == "depthwise_conv2d":
            out = tn.depthwise_conv2d(h, wq["kernel"], spec.stride, spec.padding)
        elif kind == "separable_conv2d":
            out = tn.depthwise_conv2d(h, wq["depthwise"], spec.stride, spec.padding)
            out = tn.conv2d(out, wq["pointwise"], 1, "same")
        elif kind == "batch_norm":
            st = model.state[i]
            out, mu, var = tn.batch_norm(
                h, wq["gamma"], wq["beta"], st["moving_mean"], st["moving_var"], spec.epsilon, training
            )
            stats = (mu, var)
        elif kind == "relu":
            out = tn.relu(h)
        elif kind == "sigmoid":
            out = tn.sigmoid(h)
        elif kind == "residual_add":
            other = x if spec.source == -1 else tr.outputs[spec.source]
            out = tn.add(h, other)
        elif kind == "flatten":
            out = tn.reshape(h, (h.shape[0], -1))
        elif kind == "softmax_out":
            out = h
        else:  # pragma: no cover - guarded by LayerSpec validation
            raise ValueError(f"layer {i}: unknown kind {kind!r}")
        if "bias" in wq:
            out = tn.bias_add(out, wq["bias"])
        tr.pre.append(out)
        aq = spec.activation_quantizer
        if quantized and aq.kind != "identity":
            out = quantize_var(aq if training else aq.deterministic(), out, step, schedule, rng)
        if training and noise_std > 0:
            if rng is None:
                raise ValueError("output noise needs a random generator")
            out = tn.add_const(out, rng.normal(0.0, noise_std, out.shape))
        tr.outputs.append(out)
        tr.params.append(pv)
        tr.weights.append(wq)
        tr.bn_stats.append(stats)
        h = out
    return tr


def forward(
    model: Model,
    x,
    mode: Literal["quantized", "full_precision"] = "quantized",
    step: int = 0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    schedule: StochasticSchedule | None = None,
) -> np.ndarray:
    """Pre-softmax logits of shape (batch, K)."""
    if mode not in ("quantized", "full_precision"):
        raise ValueError(f"unknown mode {mode!r}")
    tape = Tape()
    xv = tape.const(np.asarray(tn.as_array(x), dtype=np.float64))
    tr = trace(
        model,
        tape,
        xv,
        quantized=mode == "quantized",
        training=training,
        step=step,
        schedule=schedule,
        rng=rng,
    )
    return tr.logits.value


def predict(model: Model, x, mode: str = "quantized", batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    chunks = [forward(model, x[i : i + batch_size], mode) for i in range(0, len(x), batch_size)]
    return np.argmax(np.concatenate(chunks), axis=1)


def softmax_with_temperature(logits, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise ValueError("temperature must be positive")
    return tn.softmax(np.asarray(tn.as_array(logits), dtype=np.float64), T)


# ---------------------------------------------------------------------------
# tangent propagation (forward-mode Jacobian products recorded on the tape)


def layer_jvp(
    model: Model,
    tr: Trace,
    i: int,
    t: Var,
    n_dirs: int,
    tangents: Sequence[Var | None] | None = None,
    sample: int | None = None,
) -> Var:
    """Push tangent rows ``t`` through layer ``i`` at the primal point of ``tr``.

    ``t`` stacks ``n_dirs`` tangent rows per primal sample (sample-major).
    Everything is recorded on the trace's tape, so the result is
    differentiable with respect to the layer parameters. For residual adds,
    ``tangents[source]`` (or the input tangent for source -1, passed as
    ``tangents[-1]`` via index ``len(model.layers)``) is added when given;
    otherwise the skip branch is held constant. With ``sample`` set, the layer
    is linearized at that one row of the traced batch only.
    """
    spec = model.layers[i]
    wq = tr.weights[i]
    kind = spec.kind

    def rows(a: np.ndarray) -> np.ndarray:
        return a if sample is None else a[sample : sample + 1]

    def rep(a: np.ndarray) -> np.ndarray:
        a = rows(a)
        return a if n_dirs == 1 else np.repeat(a, n_dirs, axis=0)

    if kind == "dense":
        out = tn.matmul(t, wq["kernel"])
    elif kind == "conv2d":
        out = tn.conv2d(t, wq["kernel"], spec.stride, spec.padding)
    elif kind == "depthwise_conv2d":
        out = tn.depthwise_conv2d(t, wq["kernel"], spec.stride, spec.padding)
    elif kind == "separable_conv2d":
        out = tn.depthwise_conv2d(t, wq["depthwise"], spec.stride, spec.padding)
        out = tn.conv2d(out, wq["pointwise"], 1, "same")
    elif kind == "batch_norm":
        _, var = tr.bn_stats[i]
        inv = 1.0 / np.sqrt(var + spec.epsilon)
        factor = tn.broadcast_to(tn.mul_const(wq["gamma"], inv), t.shape)
        out = tn.mul(t, factor)
    elif kind == "relu":
        out = tn.mul_const(t, rep((tr.inputs[i].value > 0).astype(np.float64)))
    elif kind == "sigmoid":
        s = tr.pre[i] if sample is None else tn.take_rows(tr.pre[i], [sample])
        ds = tn.mul(s, tn.add_const(tn.scale(s, -1.0), 1.0))
        out = tn.mul(t, ds if n_dirs == 1 else tn.repeat_rows(ds, n_dirs))
    elif kind == "residual_add":
        out = t
        if tangents is not None:
            src = spec.source if spec.source >= 0 else len(model.layers)
            skip = tangents[src] if src < len(tangents) else None
            if skip is not None:
                out = tn.add(t, skip)
    elif kind == "flatten":
        out = tn.reshape(t, (t.shape[0], -1))
    else:
        out = t
    aq = spec.activation_quantizer
    if tr.quantized and aq.kind != "identity":
        out = tn.mul_const(out, rep(ste_mask(aq, tr.pre[i].value)))
    return out


def propagate_tangents(model: Model, tr: Trace, t0: Var, n_dirs: int) -> Var:
    """Jacobian-vector products of the logits for tangent rows ``t0`` at the traced inputs."""
    tangents: list[Var | None] = [None] * (len(model.layers) + 1)
    tangents[len(model.layers)] = t0
    t = t0
    for i in range(len(model.layers)):
        t = layer_jvp(model, tr, i, t, n_dirs, tangents)
        tangents[i] = t
    return t


# ---------------------------------------------------------------------------
# accounting


def count_params(model: Model) -> tuple[int, int, int]:
    trainable = sum(int(v.size) for p in model.params for v in p.values())
    fixed = sum(int(v.size) for s in model.state for v in s.values())
    return trainable + fixed, trainable, fixed


def layer_param_count(model: Model, i: int) -> int:
    return sum(int(v.size) for v in model.params[i].values()) + sum(int(v.size) for v in model.state[i].values())


def flash_footprint(model: Model) -> int:
    """Parameter storage in bytes: per layer ceil(params * bits / 8), summed."""
    total = 0
    for i, spec in enumerate(model.layers):
        n = layer_param_count(model, i)
        total += -(-n * spec.weight_quantizer.storage_bits // 8)
    return total


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"TQRM"
VERSION = 1
_KINDS = list(LayerKind.__args__)
_QKINDS = ["identity", "binary", "stochastic_binary", "ternary", "stochastic_ternary", "fixed_point", "quantized_relu"]


def write_tensor(f, arr: np.ndarray):
    arr = np.asarray(arr, dtype="<f8")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise ValueError("truncated file")
    return b


def read_tensor(f) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    n = int(np.prod(shape, dtype=np.int64))
    return np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def _write_q(f, q: QuantizerSpec):
    f.write(struct.pack("<BIdd", _QKINDS.index(q.kind), q.bits, q.threshold, q.ste_clip))


def _read_q(f) -> QuantizerSpec:
    kind, bits, thr, clip = struct.unpack("<BIdd", _read_exact(f, struct.calcsize("<BIdd")))
    return QuantizerSpec(kind=_QKINDS[kind], bits=bits, threshold=thr, ste_clip=clip)


_LAYER_INTS = "<7i"


def save_checkpoint(model: Model, path):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(model.layers)))
        f.write(struct.pack("<I", len(model.input_shape)))
        f.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
        for i, spec in enumerate(model.layers):
            f.write(struct.pack("<B", _KINDS.index(spec.kind)))
            f.write(
                struct.pack(
                    _LAYER_INTS,
                    spec.units or 0,
                    spec.filters or 0,
                    spec.kernel_size,
                    spec.stride,
                    0 if spec.padding == "same" else 1,
                    int(spec.use_bias),
                    -2 if spec.source is None else spec.source,
                )
            )
            f.write(struct.pack("<dd", spec.momentum, spec.epsilon))
            _write_q(f, spec.weight_quantizer)
            _write_q(f, spec.activation_quantizer)
            tensors = [(k, v) for k, v in model.params[i].items()] + [(k, v) for k, v in model.state[i].items()]
            f.write(struct.pack("<II", len(model.params[i]), len(model.state[i])))
            for name, arr in tensors:
                nb = name.encode()
                f.write(struct.pack("<B", len(nb)) + nb)
                write_tensor(f, arr)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError("not a TQRM checkpoint")
        version, n_layers = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        input_shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
        layers, params, state = [], [], []
        for _ in range(n_layers):
            (kind,) = struct.unpack("<B", _read_exact(f, 1))
            units, filters, ks, stride, pad, bias, source = struct.unpack(
                _LAYER_INTS, _read_exact(f, struct.calcsize(_LAYER_INTS))
            )
            momentum, eps = struct.unpack("<dd", _read_exact(f, 16))
            wq = _read_q(f)
            aq = _read_q(f)
            layers.append(
                LayerSpec(
                    kind=_KINDS[kind],
                    units=units or None,
                    filters=filters or None,
                    kernel_size=ks,
                    stride=stride,
                    padding="same" if pad == 0 else "valid",
                    use_bias=bool(bias),
                    source=None if source == -2 else source,
                    momentum=momentum,
                    epsilon=eps,
                    weight_quantizer=wq,
                    activation_quantizer=aq,
                )
            )
            n_p, n_s = struct.unpack("<II", _read_exact(f, 8))
            tensors = {}
            for _ in range(n_p + n_s):
                (ln,) = struct.unpack("<B", _read_exact(f, 1))
                name = _read_exact(f, ln).decode()
                tensors[name] = read_tensor(f)
            names = list(tensors)
            params.append({k: tensors[k] for k in names[:n_p]})
            state.append({k: tensors[k] for k in names[n_p:]})
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint")
    return Model(layers, input_shape, params, state)
