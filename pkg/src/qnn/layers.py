"""Fully-connected and LSTM-with-projection layers, float and quantized.

Quantized layers keep float biases and activations.  Only the matrix
products go through 8-bit codes: the weight shadow is quantized offline,
the operand vector is quantized on the fly from its own min/max, the
product is accumulated in integers and recovered to float.

Activations flow through the model as row-major batches, shape
``(batch, features)``, or ``(time, batch, features)`` for sequences.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from qnn.errors import AccumulatorOverflowError, InvalidArgumentError, QuantStateError
from qnn.qgemm import INT32_MAX
from qnn.quant import (
    DEFAULT_SCALE,
    RANGE_EPS,
    diagnostics,
    quantize_matrix,
    recover_matrix,
    round_half_up,
)

ACTIVATIONS = ("sigmoid", "tanh", "softmax", "identity")
MODES = ("float", "quantized")
QUANT_SCOPES = ("none", "quant", "quant-all")

GATES = ("i", "f", "c", "o")
X_WEIGHTS = tuple(f"w_{g}x" for g in GATES)
R_WEIGHTS = tuple(f"w_{g}r" for g in GATES)
BIASES = tuple(f"b_{g}" for g in GATES)
PROJECTION = "w_rm"


def sigmoid(x):
    # tanh form: no overflow warnings, and sigmoid(0) is exactly 0.5
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def activation(kind, v):
    v = np.asarray(v, dtype=np.float64)
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "tanh":
        return np.tanh(v)
    if kind == "softmax":
        return softmax(v)
    if kind == "identity":
        return v.copy()
    raise InvalidArgumentError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# On-the-fly quantization of operand rows and packed weight shadows
# ---------------------------------------------------------------------------


@dataclass
class RowQuant:
    """Each row of a ``(batch, k)`` operand quantized with its own range.

    ``shifted`` holds the integers ``code + offset`` stored in float64; they
    are exact, and so is every partial sum of a product with another shifted
    operand as long as the int32 accumulator bound holds (far below 2**53).
    """

    shifted: np.ndarray
    q: np.ndarray
    degenerate: np.ndarray
    v_min: np.ndarray
    max_abs: int

    def recovered_row(self, b):
        if self.degenerate[b]:
            return np.full(self.shifted.shape[1], self.v_min[b])
        return self.shifted[b] / self.q[b]


def quantize_rows(x, scale_s=DEFAULT_SCALE):
    """Per-row equivalent of ``quantize_matrix(row[:, None])`` for every row."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("operand has non-finite entries")
    v_min = x.min(axis=1)
    v_max = x.max(axis=1)
    degenerate = (v_max - v_min) < RANGE_EPS * np.maximum(1.0, np.abs(v_max))
    q = np.where(degenerate, 1.0, scale_s / np.where(degenerate, 1.0, v_max - v_min))
    z = np.where(degenerate, 0, round_half_up(q * v_min))
    codes = round_half_up(q[:, None] * x) - z[:, None]
    bad = (codes < 0) | (codes > scale_s)
    if bad.any():
        diagnostics.add("saturated_codes", np.count_nonzero(bad))
        codes = np.clip(codes, 0, scale_s)
    codes[degenerate] = 0
    max_abs = int(np.maximum(np.abs(z), np.abs(z + scale_s)).max()) if len(z) else 0
    return RowQuant((codes + z[:, None]).astype(np.float64), q, degenerate, v_min, max_abs)


class PackedShadow:
    """Several quantized weight matrices stacked along the output axis.

    Each block keeps its own params; stacking only lets one matmul serve all
    four LSTM gates.  Results are bit-identical to separate ``qgemm`` calls.
    """

    def __init__(self, shadows):
        self.shadows = list(shadows)
        k = self.shadows[0].cols
        if any(s.cols != k for s in self.shadows):
            raise InvalidArgumentError("packed shadows must share the inner dimension")
        self.k = k
        self.shifted_t = np.concatenate([s.shifted() for s in self.shadows], axis=0).astype(np.float64).T
        self.q = np.concatenate([np.full(s.rows, s.params.q_factor) for s in self.shadows])
        self.blocks = []
        start = 0
        for s in self.shadows:
            self.blocks.append((start, start + s.rows, s))
            start += s.rows
        self.max_abs = max(max(abs(s.params.offset_code), abs(s.params.offset_code + s.params.scale_s)) for s in self.shadows)

    def matmul(self, xq, allow_wide=False):
        """``x @ W.T`` for every row of the quantized operand."""
        if xq.shifted.shape[1] != self.k:
            raise InvalidArgumentError(f"operand width {xq.shifted.shape[1]} != {self.k}")
        worst = self.k * self.max_abs * xq.max_abs
        if worst > INT32_MAX and not allow_wide:
            raise AccumulatorOverflowError(f"worst-case accumulator {worst} exceeds int32")
        if worst >= 2**53:
            raise AccumulatorOverflowError(f"worst-case accumulator {worst} is not exact in float64")
        with np.errstate(divide="ignore", invalid="ignore"):
            # degenerate rows or blocks have Q = 0; they are overwritten below
            out = (xq.shifted @ self.shifted_t) / (xq.q[:, None] * self.q[None, :])
        # Constant operands take the float route on recovered values, as qgemm does.
        deg_rows = np.flatnonzero(xq.degenerate)
        for start, stop, s in self.blocks:
            if s.params.degenerate:
                w = recover_matrix(s)
                for b in range(out.shape[0]):
                    out[b, start:stop] = (w @ xq.recovered_row(b)[:, None])[:, 0]
            elif deg_rows.size:
                w = recover_matrix(s)
                for b in deg_rows:
                    out[b, start:stop] = (w @ xq.recovered_row(b)[:, None])[:, 0]
        return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class FcLayer:
    w: np.ndarray
    b: np.ndarray
    activation: str = "softmax"
    quantize_enabled: bool = False
    w_quant: object = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise InvalidArgumentError(f"bad FC shapes w={self.w.shape} b={self.b.shape}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        self._pack = None

    @property
    def in_dim(self):
        return self.w.shape[1]

    @property
    def out_dim(self):
        return self.w.shape[0]

    def named_params(self):
        return {"w": self.w, "b": self.b}

    def quantize(self, scale_s=DEFAULT_SCALE):
        self.w_quant = quantize_matrix(self.w, scale_s)
        self._pack = None

    def invalidate(self):
        self.w_quant = None
        self._pack = None

    def packed(self):
        if self.w_quant is None:
            raise QuantStateError("FC layer has no quantized weights")
        if self._pack is None:
            self._pack = PackedShadow([self.w_quant])
        return self._pack

    def uses_quantized(self, mode):
        if mode == "float" or not self.quantize_enabled:
            return False
        if self.w_quant is None:
            raise QuantStateError("FC layer is flagged for quantization but has no shadow")
        return True


@dataclass(eq=False)
class LstmLayer:
    """Peephole-free LSTM with an optional recurrent projection.

    Gate weights are stored per gate so that each gets its own quantization
    range.  ``r_dim`` is the projection size when ``w_rm`` is present, else
    the cell count.
    """

    w_ix: np.ndarray
    w_fx: np.ndarray
    w_cx: np.ndarray
    w_ox: np.ndarray
    w_ir: np.ndarray
    w_fr: np.ndarray
    w_cr: np.ndarray
    w_or: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    w_rm: np.ndarray = None
    quantize_enabled: bool = False
    shadows: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.param_names():
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n, d = self.w_ix.shape
        r = self.r_dim
        for name in X_WEIGHTS:
            _expect(name, getattr(self, name), (n, d))
        for name in R_WEIGHTS:
            _expect(name, getattr(self, name), (n, r))
        for name in BIASES:
            _expect(name, getattr(self, name), (n,))
        self._packs = None

    @classmethod
    def init_random(cls, rng, input_dim, cells, proj=0, forget_bias=1.0):
        r = proj or cells
        sx = 1.0 / np.sqrt(input_dim + r)
        kw = {}
        for name in X_WEIGHTS:
            kw[name] = rng.uniform(-sx, sx, (cells, input_dim))
        for name in R_WEIGHTS:
            kw[name] = rng.uniform(-sx, sx, (cells, r))
        for name in BIASES:
            kw[name] = np.zeros(cells)
        kw["b_f"] = np.full(cells, float(forget_bias))
        if proj:
            sp = 1.0 / np.sqrt(cells)
            kw["w_rm"] = rng.uniform(-sp, sp, (proj, cells))
        return cls(**kw)

    @property
    def cells(self):
        return self.w_ix.shape[0]

    @property
    def input_dim(self):
        return self.w_ix.shape[1]

    @property
    def proj_dim(self):
        return 0 if self.w_rm is None else self.w_rm.shape[0]

    @property
    def r_dim(self):
        return self.proj_dim or self.cells

    def weight_names(self):
        names = X_WEIGHTS + R_WEIGHTS
        return names + (PROJECTION,) if self.w_rm is not None else names

    def param_names(self):
        names = X_WEIGHTS + R_WEIGHTS + BIASES
        return names + (PROJECTION,) if self.w_rm is not None else names

    def named_params(self):
        return {name: getattr(self, name) for name in self.param_names()}

    def quantize(self, scale_s=DEFAULT_SCALE):
        self.shadows = {name: quantize_matrix(getattr(self, name), scale_s) for name in self.weight_names()}
        self._packs = None

    def invalidate(self):
        self.shadows = {}
        self._packs = None

    def packed(self):
        if not self.shadows:
            raise QuantStateError("LSTM layer has no quantized shadows")
        if self._packs is None:
            packs = {
                "x": PackedShadow([self.shadows[n] for n in X_WEIGHTS]),
                "r": PackedShadow([self.shadows[n] for n in R_WEIGHTS]),
            }
            if self.w_rm is not None:
                packs["proj"] = PackedShadow([self.shadows[PROJECTION]])
            self._packs = packs
        return self._packs

    def uses_quantized(self, mode):
        if mode == "float" or not self.quantize_enabled:
            return False
        if not self.shadows:
            raise QuantStateError("LSTM layer is flagged for quantization but has no shadows")
        return True

    def stacked(self, names):
        return np.concatenate([getattr(self, n) for n in names], axis=0)


def _expect(name, arr, shape):
    if arr.shape != shape:
        raise InvalidArgumentError(f"{name} has shape {arr.shape}, expected {shape}")


@dataclass
class LstmState:
    c: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(cls, layer, batch=None):
        if batch is None:
            return cls(np.zeros(layer.cells), np.zeros(layer.r_dim))
        return cls(np.zeros((batch, layer.cells)), np.zeros((batch, layer.r_dim)))


@dataclass(eq=False)
class Model:
    lstm_layers: list = field(default_factory=list)
    fc: FcLayer = None
    input_dim: int = 0
    n_classes: int = 0
    seed: int = 0
    phase: int = 0
    masters_present: bool = True
    scale_s: int = DEFAULT_SCALE

    def __post_init__(self):
        dim = self.input_dim
        for k, layer in enumerate(self.lstm_layers):
            if layer.input_dim != dim:
                raise InvalidArgumentError(f"LSTM layer {k} expects input {layer.input_dim}, gets {dim}")
            dim = layer.r_dim
        if self.fc is not None:
            if self.fc.in_dim != dim:
                raise InvalidArgumentError(f"FC layer expects input {self.fc.in_dim}, gets {dim}")
            if self.n_classes and self.fc.out_dim != self.n_classes:
                raise InvalidArgumentError("FC output size does not match n_classes")
            self.n_classes = self.fc.out_dim

    @classmethod
    def init_random(cls, seed, input_dim, n_classes, layers, cells, proj=0):
        rng = np.random.default_rng(seed)
        lstm = []
        dim = input_dim
        for _ in range(layers):
            layer = LstmLayer.init_random(rng, dim, cells, proj)
            lstm.append(layer)
            dim = layer.r_dim
        s = 1.0 / np.sqrt(dim)
        fc = FcLayer(rng.uniform(-s, s, (n_classes, dim)), np.zeros(n_classes))
        return cls(lstm, fc, input_dim=input_dim, n_classes=n_classes, seed=seed)

    def named_params(self):
        out = {}
        for k, layer in enumerate(self.lstm_layers):
            for name, arr in layer.named_params().items():
                out[f"lstm{k}.{name}"] = arr
        if self.fc is not None:
            for name, arr in self.fc.named_params().items():
                out[f"fc.{name}"] = arr
        return out

    def n_params(self):
        return sum(a.size for a in self.named_params().values())

    def scope(self):
        """Which quantization scope the layer flags currently describe."""
        flags = [l.quantize_enabled for l in self.lstm_layers]
        fc_flag = self.fc.quantize_enabled if self.fc is not None else None
        if not any(flags) and not fc_flag:
            return "none"
        if all(flags) and fc_flag is not False:
            return "quant-all"
        if all(flags) and fc_flag is False:
            return "quant"
        return "mixed"

    def has_shadows(self):
        return any(l.shadows for l in self.lstm_layers) or (self.fc is not None and self.fc.w_quant is not None)

    def invalidate_shadows(self):
        for layer in self.lstm_layers:
            layer.invalidate()
        if self.fc is not None:
            self.fc.invalidate()

    def copy(self):
        return copy.deepcopy(self)


def param_count(input_dim, n_classes, layers, cells, proj=0):
    """Closed-form parameter count of :meth:`Model.init_random` models."""
    total = 0
    dim = input_dim
    r = proj or cells
    for _ in range(layers):
        total += 4 * cells * (dim + r) + 4 * cells + (proj * cells if proj else 0)
        dim = r
    return total + n_classes * dim + n_classes


def quantize_model(model, mode, scale_s=None):
    """Flag layers for ``mode`` and (re)build their shadows from the float masters.

    ``quant`` covers everything but the final softmax layer, ``quant-all``
    every layer, ``none`` clears all flags.  Returns the same model.
    """
    if mode not in QUANT_SCOPES:
        raise InvalidArgumentError(f"unknown quantization mode {mode!r}")
    if not model.masters_present:
        raise QuantStateError("model has no float masters to quantize from")
    if scale_s is None:
        scale_s = model.scale_s
    model.scale_s = scale_s
    enabled = mode != "none"
    for layer in model.lstm_layers:
        layer.quantize_enabled = enabled
        if enabled:
            layer.quantize(scale_s)
        else:
            layer.invalidate()
    if model.fc is not None:
        model.fc.quantize_enabled = mode == "quant-all"
        if model.fc.quantize_enabled:
            model.fc.quantize(scale_s)
        else:
            model.fc.invalidate()
    return model


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_mode(mode):
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")


def _product(x, w_float, pack, quantized, scale_s):
    """``x @ W.T`` for a ``(batch, k)`` operand, float or via 8-bit codes."""
    if quantized:
        return pack.matmul(quantize_rows(x, scale_s))
    return x @ w_float.T


def fc_forward(layer, x, mode="float", scale_s=DEFAULT_SCALE):
    """Apply a fully-connected layer to a ``(batch, in_dim)`` batch.

    A 1-D input is treated as a single row.
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != layer.in_dim:
        raise InvalidArgumentError(f"FC input width {x2.shape[1]} != {layer.in_dim}")
    quantized = mode == "quantized"
    if quantized and layer.w_quant is None:
        raise QuantStateError("quantized FC forward needs w_quant")
    pack = layer.packed() if quantized else None
    y = activation(layer.activation, _product(x2, layer.w, pack, quantized, scale_s) + layer.b)
    return y[0] if single else y


def _gates(pre, n):
    i = sigmoid(pre[:, :n])
    f = sigmoid(pre[:, n : 2 * n])
    g = np.tanh(pre[:, 2 * n : 3 * n])
    o = sigmoid(pre[:, 3 * n :])
    return i, f, g, o


def _lstm_scan(layer, xs, mode, scale_s, state=None, keep=False):
    """Run a layer over ``xs`` of shape ``(time, batch, input_dim)``."""
    quantized = layer.uses_quantized(mode)
    steps, batch, _ = xs.shape
    n = layer.cells
    packs = layer.packed() if quantized else {}
    bias = np.concatenate([layer.b_i, layer.b_f, layer.b_c, layer.b_o])
    w_x = None if quantized else layer.stacked(X_WEIGHTS)
    w_r = None if quantized else layer.stacked(R_WEIGHTS)
    # Input contributions do not depend on the recurrence: do all frames at once.
    flat = xs.reshape(steps * batch, -1)
    x_part = _product(flat, w_x, packs.get("x"), quantized, scale_s).reshape(steps, batch, 4 * n)

    if state is None:
        state = LstmState.zeros(layer, batch)
    c, r = state.c, state.r
    outs = np.empty((steps, batch, layer.r_dim))
    cache = None
    if keep:
        cache = {
            "x": xs,
            "r_prev": np.empty((steps, batch, layer.r_dim)),
            "c_prev": np.empty((steps, batch, n)),
            "i": np.empty((steps, batch, n)),
            "f": np.empty((steps, batch, n)),
            "g": np.empty((steps, batch, n)),
            "o": np.empty((steps, batch, n)),
            "tc": np.empty((steps, batch, n)),
            "m": np.empty((steps, batch, n)),
        }
    for t in range(steps):
        pre = x_part[t] + _product(r, w_r, packs.get("r"), quantized, scale_s) + bias
        i, f, g, o = _gates(pre, n)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        m = o * tc
        if layer.w_rm is not None:
            r_new = _product(m, layer.w_rm, packs.get("proj"), quantized, scale_s)
        else:
            r_new = m
        if keep:
            cache["r_prev"][t] = r
            cache["c_prev"][t] = c
            cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t] = i, f, g, o
            cache["tc"][t] = tc
            cache["m"][t] = m
        outs[t] = r_new
        c, r = c_new, r_new
    return outs, LstmState(c, r), cache


def lstm_step(layer, x_t, state, mode="float", scale_s=DEFAULT_SCALE):
    """One time step for a single input vector; returns ``(r_t, new_state)``."""
    _check_mode(mode)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (layer.input_dim,):
        raise InvalidArgumentError(f"input shape {x_t.shape} != ({layer.input_dim},)")
    s = LstmState(np.asarray(state.c, dtype=np.float64)[None, :], np.asarray(state.r, dtype=np.float64)[None, :])
    if not (np.all(np.isfinite(s.c)) and np.all(np.isfinite(s.r))):
        raise InvalidArgumentError("state has non-finite entries")
    outs, new, _ = _lstm_scan(layer, x_t[None, None, :], mode, scale_s, state=s)
    return outs[0, 0], LstmState(new.c[0], new.r[0])


def forward_batch(model, xs, mode="float", keep=False):
    """Posteriors for a batch of sequences.

    ``xs`` has shape ``(batch, time, input_dim)``; the result has shape
    ``(batch, time, n_classes)``.  With ``keep`` the per-layer activations
    needed for backpropagation are returned as well.
    """
    _check_mode(mode)
    if model.fc is None:
        raise InvalidArgumentError("model has no output layer")
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 3 or xs.shape[2] != model.input_dim:
        raise InvalidArgumentError(f"expected (batch, time, {model.input_dim}) input, got {xs.shape}")
    if not np.all(np.isfinite(xs)):
        raise InvalidArgumentError("input has non-finite entries")
    h = np.ascontiguousarray(xs.transpose(1, 0, 2))
    caches = []
    for layer in model.lstm_layers:
        h, _, cache = _lstm_scan(layer, h, mode, model.scale_s, keep=keep)
        caches.append(cache)
    steps, batch, dim = h.shape
    quantized = model.fc.uses_quantized(mode)
    flat = h.reshape(steps * batch, dim)
    pack = model.fc.packed() if quantized else None
    logits = _product(flat, model.fc.w, pack, quantized, model.scale_s) + model.fc.b
    probs = activation(model.fc.activation, logits).reshape(steps, batch, -1).transpose(1, 0, 2)
    if keep:
        return probs, {"lstm": caches, "top": h, "probs": probs, "mode": mode}
    return probs


def model_forward(model, inputs, mode="float"):
    """Per-frame posteriors for one sequence of input vectors, shape ``(T, C)``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a (time, input_dim) sequence, got {x.shape}")
    return forward_batch(model, x[None], mode)[0]
