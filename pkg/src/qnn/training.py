"""Backpropagation through time, plain SGD and quantization-aware SGD.

Quantization-aware steps run the forward pass through the 8-bit pipeline and
keep everything else in float64: errors are propagated with the float master
weights, gradients carry no quantization term, and updates land on the
masters.  Shadows are rebuilt from the masters at the start of every step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from qnn.errors import InvalidArgumentError, TrainingDivergenceError
from qnn.layers import PROJECTION, QUANT_SCOPES, R_WEIGHTS, X_WEIGHTS, forward_batch, quantize_model

log = logging.getLogger(__name__)

PROJ_SCHEDULES = ("none", "scheduled", "constant")


@dataclass(frozen=True)
class LrConfig:
    """Global decay ``c_g * 10**(-t/t_g)`` and the projection multiplier.

    ``t`` is schedule time: training steps divided by ``steps_per_unit``.
    """

    c_g: float = 0.5
    t_g: float = 20.0
    proj_schedule: str = "none"
    c_p: float = 1e-3
    t_p: float = 0.6
    c_p_const: float = 0.5
    steps_per_unit: float = 100.0

    def __post_init__(self):
        if not self.c_g > 0 or not self.t_g > 0:
            raise InvalidArgumentError("c_g and t_g must be positive")
        if self.proj_schedule not in PROJ_SCHEDULES:
            raise InvalidArgumentError(f"unknown projection schedule {self.proj_schedule!r}")
        if self.proj_schedule == "scheduled" and not (self.c_p > 0 and self.t_p > 0):
            raise InvalidArgumentError("scheduled projection LR needs c_p > 0 and t_p > 0")
        if self.proj_schedule == "constant" and not self.c_p_const > 0:
            raise InvalidArgumentError("constant projection LR needs c_p_const > 0")
        if not self.steps_per_unit > 0:
            raise InvalidArgumentError("steps_per_unit must be positive")

    def schedule_time(self, step):
        return step / self.steps_per_unit


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    phase1_steps: int = 600
    phase2_steps: int = 200
    batch_size: int = 16
    bptt_len: int = 20
    quant_mode: str = "quant"
    lr1: LrConfig = field(default_factory=LrConfig)
    lr2: LrConfig = field(default_factory=lambda: LrConfig(c_g=0.05))
    grad_clip: float = 0.0
    eval_every: int = 0
    loss: str = "cross-entropy"

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise InvalidArgumentError("step counts must be non-negative")
        if self.batch_size < 1 or self.bptt_len < 1:
            raise InvalidArgumentError("batch_size and bptt_len must be positive")
        if self.quant_mode not in QUANT_SCOPES or (self.phase2_steps and self.quant_mode == "none"):
            raise InvalidArgumentError(f"phase 2 needs a quantization mode, got {self.quant_mode!r}")
        if self.loss != "cross-entropy":
            raise InvalidArgumentError(f"unsupported loss {self.loss!r}")


def lr_global(t, cfg):
    return cfg.c_g * 10.0 ** (-t / cfg.t_g)


def lr_proj_multiplier(t, cfg):
    if cfg.proj_schedule == "none":
        return 1.0
    if cfg.proj_schedule == "constant":
        return cfg.c_p_const
    return cfg.c_p ** (1.0 - min(t / cfg.t_p, 1.0))


def is_projection(name):
    return name.endswith("." + PROJECTION)


def effective_lrs(model, lr_global_value, lr_proj_value):
    """Per-tensor learning rate that :func:`sgd_step` will apply."""
    return {
        name: lr_global_value * lr_proj_value if is_projection(name) else lr_global_value
        for name in model.named_params()
    }


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def cross_entropy(probs, labels, weights=None):
    """Mean over frames of ``-weight * log p[label]``."""
    b, t, _ = probs.shape
    p = np.take_along_axis(probs, labels[..., None], axis=2)[..., 0]
    w = np.ones((b, t)) if weights is None else weights
    return float(-(w * np.log(np.maximum(p, 1e-300))).sum() / (b * t))


def backward(model, batch, activations):
    """Loss and float64 gradients for every parameter tensor.

    ``batch`` is ``(inputs, labels)`` or ``(inputs, labels, frame_weights)``
    with shapes ``(B, T, D)``, ``(B, T)``, ``(B, T)``.  ``activations`` is the
    cache from ``forward_batch(..., keep=True)``; it may come from a quantized
    forward, while errors always flow back through the float masters.
    """
    xs, labels = batch[0], np.asarray(batch[1])
    weights = batch[2] if len(batch) > 2 and batch[2] is not None else None
    probs = activations["probs"]
    b, t, c = probs.shape
    if labels.shape != (b, t) or np.asarray(xs).shape[:2] != (b, t):
        raise InvalidArgumentError("batch and activations disagree in shape")
    if labels.min() < 0 or labels.max() >= c:
        raise InvalidArgumentError("label out of range")
    w = np.ones((b, t)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b, t):
        raise InvalidArgumentError("frame weights must have shape (B, T)")
    loss = cross_entropy(probs, labels, w)

    grads = {}
    d_logits = probs.copy()
    np.put_along_axis(d_logits, labels[..., None], np.take_along_axis(d_logits, labels[..., None], 2) - 1.0, 2)
    d_logits *= w[..., None] / (b * t)
    d_logits = d_logits.transpose(1, 0, 2)  # time-major like the cache
    top = activations["top"]
    grads["fc.w"] = np.einsum("tbc,tbr->cr", d_logits, top)
    grads["fc.b"] = d_logits.sum(axis=(0, 1))
    d_h = d_logits @ model.fc.w

    for k in reversed(range(len(model.lstm_layers))):
        layer = model.lstm_layers[k]
        layer_grads, d_h = _lstm_backward(layer, activations["lstm"][k], d_h)
        for name, g in layer_grads.items():
            grads[f"lstm{k}.{name}"] = g
    ordered = {name: grads[name] for name in model.named_params()}
    return loss, ordered


def _lstm_backward(layer, cache, d_out):
    steps, batch, _ = d_out.shape
    n = layer.cells
    w_x = layer.stacked(X_WEIGHTS)
    w_r = layer.stacked(R_WEIGHTS)
    d_wx = np.zeros_like(w_x)
    d_wr = np.zeros_like(w_r)
    d_b = np.zeros(4 * n)
    d_wrm = None if layer.w_rm is None else np.zeros_like(layer.w_rm)
    d_x = np.empty(cache["x"].shape)
    d_r_next = np.zeros((batch, layer.r_dim))
    d_c_next = np.zeros((batch, n))
    for t in reversed(range(steps)):
        d_r = d_out[t] + d_r_next
        m = cache["m"][t]
        if d_wrm is not None:
            d_wrm += d_r.T @ m
            d_m = d_r @ layer.w_rm
        else:
            d_m = d_r
        i, f, g, o, tc = cache["i"][t], cache["f"][t], cache["g"][t], cache["o"][t], cache["tc"][t]
        d_o = d_m * tc
        d_c = d_c_next + d_m * o * (1.0 - tc * tc)
        d_pre = np.concatenate(
            [
                d_c * g * i * (1.0 - i),
                d_c * cache["c_prev"][t] * f * (1.0 - f),
                d_c * i * (1.0 - g * g),
                d_o * o * (1.0 - o),
            ],
            axis=1,
        )
        d_c_next = d_c * f
        d_wx += d_pre.T @ cache["x"][t]
        d_wr += d_pre.T @ cache["r_prev"][t]
        d_b += d_pre.sum(axis=0)
        d_x[t] = d_pre @ w_x
        d_r_next = d_pre @ w_r
    grads = {}
    for j, name in enumerate(X_WEIGHTS):
        grads[name] = d_wx[j * n : (j + 1) * n]
    for j, name in enumerate(R_WEIGHTS):
        grads[name] = d_wr[j * n : (j + 1) * n]
    for j, name in enumerate(("b_i", "b_f", "b_c", "b_o")):
        grads[name] = d_b[j * n : (j + 1) * n]
    if d_wrm is not None:
        grads[PROJECTION] = d_wrm
    return grads, d_x


# ---------------------------------------------------------------------------
# Updates and train steps
# ---------------------------------------------------------------------------


def clip_gradients(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def sgd_step(model, grads, lr_global_value, lr_proj_value=1.0):
    """In-place ``w -= lr * grad`` on the float masters; shadows are dropped.

    Projection matrices use ``lr_global_value * lr_proj_value``.
    """
    params = model.named_params()
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise InvalidArgumentError(f"gradient {name} does not match the model")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {name}")
    updated = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for name, g in grads.items():
            lr = lr_global_value * lr_proj_value if is_projection(name) else lr_global_value
            updated[name] = params[name] - lr * g
            if not np.all(np.isfinite(updated[name])):
                raise TrainingDivergenceError(f"update overflowed parameter {name}")
    for name, value in updated.items():
        params[name][...] = value
    model.invalidate_shadows()
    return model


def _step(model, batch, cfg, t, mode, grad_clip):
    probs, acts = forward_batch(model, batch[0], mode, keep=True)
    loss, grads = backward(model, batch, acts)
    if not math.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss at schedule time {t}")
    if grad_clip:
        grads = clip_gradients(grads, grad_clip)
    sgd_step(model, grads, lr_global(t, cfg), lr_proj_multiplier(t, cfg))
    return loss


def float_train_step(model, batch, cfg, t, grad_clip=0.0):
    """Float forward, float backward, SGD.  Returns the pre-update loss."""
    return _step(model, batch, cfg, t, "float", grad_clip)


def qat_train_step(model, batch, cfg, t, quant_mode, grad_clip=0.0):
    """One quantization-aware SGD step.  Returns the pre-update loss.

    Shadows are re-derived from the current masters, the forward pass runs
    quantized, and the update goes to the masters.
    """
    quantize_model(model, quant_mode)
    return _step(model, batch, cfg, t, "quantized", grad_clip)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def sample_batch(rng, inputs, labels, batch_size, length):
    """Random windows of ``length`` frames from the training sequences."""
    n, total, _ = inputs.shape
    length = min(length, total)
    seq = rng.integers(0, n, batch_size)
    start = rng.integers(0, total - length + 1, batch_size)
    idx = start[:, None] + np.arange(length)[None, :]
    return inputs[seq[:, None], idx], labels[seq[:, None], idx]


class MetricsWriter:
    """JSON-lines metrics stream: one object per training step or evaluation."""

    def __init__(self, stream=None):
        self.stream = stream
        self.records = []

    def write(self, **record):
        self.records.append(record)
        if self.stream is not None:
            self.stream.write(json.dumps(record, sort_keys=True) + "\n")


def train_phase(model, data, cfg, lr, steps, mode="float", quant_mode="quant", seed=0,
                grad_clip=0.0, metrics=None, phase=1, evaluate=None, eval_every=0):
    """Run ``steps`` SGD steps; ``mode`` is ``float`` or ``qat``.

    ``data`` is ``(inputs, labels)`` for the training split.  ``evaluate``, if
    given, is called as ``evaluate(model)`` every ``eval_every`` steps and at
    the end; it returns a dict of held-out metrics that goes into the stream.
    Returns the list of per-step losses.
    """
    rng = np.random.default_rng([seed, phase])
    losses = []
    for step in range(steps):
        t = lr.schedule_time(step)
        batch = sample_batch(rng, data[0], data[1], cfg.batch_size, cfg.bptt_len)
        if mode == "qat":
            loss = qat_train_step(model, batch, lr, t, quant_mode, grad_clip)
        else:
            loss = float_train_step(model, batch, lr, t, grad_clip)
        losses.append(loss)
        if metrics is not None:
            record = dict(phase=phase, step=step, time=t, lr_global=lr_global(t, lr),
                          lr_proj=lr_proj_multiplier(t, lr), loss=loss)
            if evaluate is not None and eval_every and (step + 1) % eval_every == 0:
                record.update(evaluate(model))
            metrics.write(**record)
    model.phase = phase
    return losses


def train(model, data, cfg, metrics=None, evaluate=None):
    """Float pre-training followed by quantization-aware fine-tuning.

    Returns ``(phase1_losses, phase2_losses)``.  After a non-empty phase 2 the
    model's shadows are refreshed from the final masters.
    """
    log.info("phase 1: %d float steps", cfg.phase1_steps)
    l1 = train_phase(model, data, cfg, cfg.lr1, cfg.phase1_steps, "float", seed=cfg.seed,
                     grad_clip=cfg.grad_clip, metrics=metrics, phase=1, evaluate=evaluate,
                     eval_every=cfg.eval_every)
    l2 = []
    if cfg.phase2_steps:
        log.info("phase 2: %d %s QAT steps", cfg.phase2_steps, cfg.quant_mode)
        l2 = train_phase(model, data, cfg, cfg.lr2, cfg.phase2_steps, "qat", cfg.quant_mode,
                         seed=cfg.seed, grad_clip=cfg.grad_clip, metrics=metrics, phase=2,
                         evaluate=evaluate, eval_every=cfg.eval_every)
        quantize_model(model, cfg.quant_mode)
    return l1, l2


def config_dict(cfg):
    return asdict(cfg)
