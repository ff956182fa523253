"""Synthetic frame-labelled sequence task and the four-condition protocol.

Inputs are a sticky Markov chain over Gaussian mixture components.  A frame's
label bins a decaying weighted sum of a fixed projection of the last five
frames, so it can only be predicted with temporal context.  The noisy
evaluation split is the clean one plus seeded Gaussian noise on the inputs.

Conditions:

* ``match``     float-trained model, float evaluation
* ``mismatch``  float-trained model, quantized after training
* ``quant``     quantization-aware fine-tuned, softmax layer left in float
* ``quant-all`` quantization-aware fine-tuned, every layer quantized
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from qnn.errors import InvalidArgumentError, QuantStateError, TrainingDivergenceError
from qnn.layers import Model, forward_batch, param_count, quantize_model
from qnn.training import TrainConfig, train_phase

log = logging.getLogger(__name__)

CONDITIONS = ("match", "mismatch", "quant", "quant-all")
EVAL_SPLITS = ("eval-clean", "eval-noisy")
WINDOW = 5


@dataclass(frozen=True)
class TaskParams:
    seed: int = 0
    n_sequences: int = 256
    seq_len: int = 60
    input_dim: int = 16
    n_classes: int = 6
    noise_level: float = 0.5
    n_eval: int = 64
    n_components: int = 8
    spread: float = 2.0
    stickiness: float = 0.6
    scale_spread: float = 0.0
    offset: float = 0.0


@dataclass
class Split:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class Dataset:
    splits: dict
    params: TaskParams

    def __getitem__(self, name):
        return self.splits[name]


def _window_weights():
    return 0.75 ** np.arange(WINDOW)


def _sequences(rng, n, seq_len, means, sigma, stickiness):
    k, d = means.shape
    comp = np.empty((n, seq_len), dtype=np.int64)
    comp[:, 0] = rng.integers(0, k, n)
    for t in range(1, seq_len):
        stay = rng.random(n) < stickiness
        comp[:, t] = np.where(stay, comp[:, t - 1], rng.integers(0, k, n))
    return means[comp] + sigma * rng.standard_normal((n, seq_len, d))


def _window_score(x, u):
    proj = x @ u
    alpha = _window_weights()
    score = np.zeros_like(proj)
    for j, a in enumerate(alpha):
        score[:, j:] += a * proj[:, : proj.shape[1] - j]
    return score


def generate_task(seed, n_sequences, seq_len, input_dim, n_classes, noise_level, **extra):
    """Build a :class:`Dataset` with train, held-out, eval-clean and eval-noisy splits.

    Extra keyword arguments override the remaining :class:`TaskParams`
    fields (``n_eval``, ``n_components``, ``spread``, ``stickiness``).
    """
    params = TaskParams(seed, n_sequences, seq_len, input_dim, n_classes, noise_level, **extra)
    for name in ("n_sequences", "seq_len", "input_dim", "n_eval", "n_components"):
        if getattr(params, name) < 1:
            raise InvalidArgumentError(f"{name} must be positive")
    if n_classes < 2:
        raise InvalidArgumentError("need at least two classes")
    if not (noise_level >= 0 and math.isfinite(noise_level)):
        raise InvalidArgumentError("noise_level must be a finite non-negative number")
    if not 0 <= params.stickiness < 1:
        raise InvalidArgumentError("stickiness must be in [0, 1)")

    gen = np.random.default_rng([seed, 0])
    means = params.spread * gen.standard_normal((params.n_components, input_dim))
    sigma = 0.5 + gen.random(input_dim)
    u = gen.standard_normal(input_dim)
    u /= np.linalg.norm(u)
    dim_scale = np.exp(params.scale_spread * gen.standard_normal(input_dim))

    # Class thresholds: quantiles of the score on a reference sample, so
    # classes come out roughly balanced.
    ref = _sequences(np.random.default_rng([seed, 1]), 256, 64, means, sigma, params.stickiness)
    ref_score = _window_score(ref, u)[:, WINDOW - 1 :].ravel()
    edges = np.quantile(ref_score, np.arange(1, n_classes) / n_classes)

    def make(stream, n):
        x = _sequences(np.random.default_rng([seed, stream]), n, seq_len, means, sigma, params.stickiness)
        y = np.searchsorted(edges, _window_score(x, u)).astype(np.int64)
        return Split(x * dim_scale + params.offset, y)

    splits = {
        "train": make(2, n_sequences),
        "held-out": make(3, params.n_eval),
        "eval-clean": make(4, params.n_eval),
    }
    clean = splits["eval-clean"]
    noise = np.random.default_rng([seed, 5]).standard_normal(clean.inputs.shape)
    splits["eval-noisy"] = Split(clean.inputs + noise_level * noise, clean.labels.copy())
    return Dataset(splits, params)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def frame_accuracy(model, split, mode, batch=64):
    correct = 0
    for s in range(0, len(split), batch):
        probs = forward_batch(model, split.inputs[s : s + batch], mode)
        correct += int(np.sum(probs.argmax(axis=2) == split.labels[s : s + batch]))
    return correct / split.labels.size


def evaluate(model, split, condition, mismatch_scope="quant"):
    """Frame accuracy of ``model`` on ``split`` under an evaluation condition.

    ``match`` runs the float masters and never touches shadows.  ``mismatch``
    quantizes a copy of the model post hoc (scope ``mismatch_scope``).
    ``quant``/``quant-all`` expect a fine-tuned model whose flags and
    shadows already cover that scope.
    """
    if condition == "match":
        if not model.masters_present:
            raise QuantStateError("match condition needs float masters")
        return frame_accuracy(model, split, "float")
    if condition == "mismatch":
        if model.masters_present:
            qmodel = quantize_model(model.copy(), mismatch_scope)
        elif model.scope() == mismatch_scope:
            qmodel = model
        else:
            raise QuantStateError("mismatch needs float masters or matching shadows")
        return frame_accuracy(qmodel, split, "quantized")
    if condition in ("quant", "quant-all"):
        if model.scope() != condition:
            raise QuantStateError(f"model is quantized for {model.scope()!r}, not {condition!r}")
        return frame_accuracy(model, split, "quantized")
    raise InvalidArgumentError(f"unknown condition {condition!r}")


def relative_loss(acc_match, acc_cond):
    """``(err_cond - err_match) / err_match`` with ``err = 1 - accuracy``."""
    err_match = 1.0 - acc_match
    if err_match == 0:
        return math.nan
    return ((1.0 - acc_cond) - err_match) / err_match


def relative_loss_from_errors(err_match, err_cond):
    return (err_cond - err_match) / err_match


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    layers: int
    cells: int
    proj: int = 0

    @property
    def name(self):
        base = f"{self.layers}x{self.cells}"
        return f"{base}p{self.proj}" if self.proj else base

    @classmethod
    def parse(cls, text):
        """``"2x64"`` or ``"2x64p32"``."""
        text = text.strip().lower()
        try:
            layers, rest = text.split("x", 1)
            cells, _, proj = rest.partition("p")
            arch = cls(int(layers), int(cells), int(proj or 0))
        except ValueError:
            raise InvalidArgumentError(f"bad architecture {text!r}, expected e.g. 2x64 or 2x64p32") from None
        if arch.layers < 1 or arch.cells < 1 or arch.proj < 0:
            raise InvalidArgumentError(f"bad architecture {text!r}")
        return arch


@dataclass
class ProtocolRow:
    name: str
    n_params: int
    accuracy: dict = field(default_factory=dict)
    relative_loss: dict = field(default_factory=dict)
    per_seed: list = field(default_factory=list)
    failed: str = ""

    def error(self, split, condition):
        return 1.0 - self.accuracy[split][condition]


@dataclass
class ProtocolReport:
    rows: list
    average: dict
    seeds: list
    mismatch_scope: str = "quant"

    def to_dict(self):
        return {
            "conditions": list(CONDITIONS),
            "splits": list(EVAL_SPLITS),
            "seeds": list(self.seeds),
            "mismatch_scope": self.mismatch_scope,
            "rows": [asdict(r) for r in self.rows],
            "average_relative_loss": self.average,
        }

    def to_json(self):
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_table(self):
        """Error rates (%) with relative loss in parentheses, per split and condition."""
        head = ["System (Params.)"] + [f"{s.split('-')[1]} {c}" for s in EVAL_SPLITS for c in CONDITIONS]
        lines = []
        for row in self.rows:
            cells = [f"{row.name} (~{row.n_params})"]
            if row.failed:
                cells += ["failed"] * len(EVAL_SPLITS) * len(CONDITIONS)
            else:
                for s in EVAL_SPLITS:
                    for c in CONDITIONS:
                        err = 100.0 * row.error(s, c)
                        if c == "match":
                            cells.append(f"{err:.1f}")
                        else:
                            cells.append(f"{err:.1f} ({100.0 * row.relative_loss[s][c]:.1f}%)")
            lines.append(cells)
        avg = ["Avg. Relative Loss"]
        for s in EVAL_SPLITS:
            for c in CONDITIONS:
                v = self.average.get(s, {}).get(c)
                avg.append("-" if c == "match" or v is None else f"{100.0 * v:.1f}%")
        lines.append(avg)
        widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
        fmt = " | ".join(f"{{:>{w}}}" for w in widths)
        rule = "-+-".join("-" * w for w in widths)
        out = [fmt.format(*head), rule] + [fmt.format(*r) for r in lines[:-1]] + [rule, fmt.format(*lines[-1])]
        return "\n".join(out) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def run_single(arch, cfg, task, seed, mismatch_scope="quant"):
    """One architecture, one seed: accuracies per split and condition."""
    data = generate_task(**{**asdict(task), "seed": task.seed})
    train = (data["train"].inputs, data["train"].labels)
    model = Model.init_random(seed, task.input_dim, task.n_classes, arch.layers, arch.cells, arch.proj)
    cfg = replace(cfg, seed=seed)
    train_phase(model, train, cfg, cfg.lr1, cfg.phase1_steps, "float", seed=seed,
                grad_clip=cfg.grad_clip, phase=1)
    acc = {s: {} for s in EVAL_SPLITS}
    for s in EVAL_SPLITS:
        acc[s]["match"] = evaluate(model, data[s], "match")
        acc[s]["mismatch"] = evaluate(model, data[s], "mismatch", mismatch_scope)
    for scope in ("quant", "quant-all"):
        tuned = model.copy()
        train_phase(tuned, train, cfg, cfg.lr2, cfg.phase2_steps, "qat", scope, seed=seed,
                    grad_clip=cfg.grad_clip, phase=2)
        quantize_model(tuned, scope)
        for s in EVAL_SPLITS:
            acc[s][scope] = evaluate(tuned, data[s], scope)
    return acc


def _run_cell(args):
    arch, cfg, task, seed, mismatch_scope = args
    try:
        return run_single(arch, cfg, task, seed, mismatch_scope), ""
    except (TrainingDivergenceError, FloatingPointError, OverflowError) as exc:
        return None, f"seed {seed}: {type(exc).__name__}: {exc}"


def run_protocol(architectures, cfg, task, seeds=(0,), mismatch_scope="quant", workers=1):
    """Train and evaluate every architecture under every condition.

    Each cell of the report is the median accuracy over ``seeds``; relative
    losses are derived from those medians.  A row whose runs diverge is
    marked failed instead of aborting the protocol.
    """
    if not architectures:
        raise InvalidArgumentError("no architectures given")
    seeds = list(seeds)
    jobs = [(arch, cfg, task, seed, mismatch_scope) for arch in architectures for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    rows = []
    for a, arch in enumerate(architectures):
        chunk = results[a * len(seeds) : (a + 1) * len(seeds)]
        row = ProtocolRow(arch.name, param_count(task.input_dim, task.n_classes, arch.layers, arch.cells, arch.proj))
        failures = [msg for acc, msg in chunk if msg]
        if failures:
            row.failed = "; ".join(failures)
            log.warning("row %s failed: %s", arch.name, row.failed)
            rows.append(row)
            continue
        row.per_seed = [acc for acc, _ in chunk]
        for s in EVAL_SPLITS:
            row.accuracy[s] = {c: statistics.median(r[s][c] for r in row.per_seed) for c in CONDITIONS}
            row.relative_loss[s] = {
                c: relative_loss(row.accuracy[s]["match"], row.accuracy[s][c]) for c in CONDITIONS if c != "match"
            }
        rows.append(row)

    ok = [r for r in rows if not r.failed]
    average = {}
    for s in EVAL_SPLITS:
        average[s] = {}
        for c in CONDITIONS[1:]:
            vals = [r.relative_loss[s][c] for r in ok]
            average[s][c] = sum(vals) / len(vals) if vals else math.nan
    return ProtocolReport(rows, average, seeds, mismatch_scope)
