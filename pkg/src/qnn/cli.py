"""``qnn`` command line: train, quantize, eval, protocol, bench.

Exit codes: 0 success, 2 runtime failure (divergence, unreadable model,
condition/model mismatch, every protocol row failed), 64 invalid flags.
Data goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict

import numpy as np

from qnn.errors import (
    AccumulatorOverflowError,
    InvalidArgumentError,
    ModelFormatError,
    QuantStateError,
    TrainingDivergenceError,
)
from qnn.layers import Model, forward_batch, param_count, quantize_model
from qnn.modelio import load_model, save_model, snap_to_float32
from qnn.toytask import EVAL_SPLITS, Architecture, TaskParams, evaluate, generate_task, relative_loss, run_protocol
from qnn.training import LrConfig, MetricsWriter, TrainConfig, train

log = logging.getLogger("qnn")

EXIT_FAILURE = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Shared flag groups
# ---------------------------------------------------------------------------


def _add_task_flags(p):
    d = TaskParams()
    g = p.add_argument_group("toy task")
    g.add_argument("--task-seed", type=int, default=d.seed)
    g.add_argument("--n-sequences", type=int, default=d.n_sequences)
    g.add_argument("--seq-len", type=int, default=d.seq_len)
    g.add_argument("--input-dim", type=int, default=d.input_dim)
    g.add_argument("--n-classes", type=int, default=d.n_classes)
    g.add_argument("--noise-level", type=float, default=d.noise_level)
    g.add_argument("--n-eval", type=int, default=d.n_eval)


def _task_from(args):
    return TaskParams(seed=args.task_seed, n_sequences=args.n_sequences, seq_len=args.seq_len,
                      input_dim=args.input_dim, n_classes=args.n_classes, noise_level=args.noise_level,
                      n_eval=args.n_eval)


def _task_data(task):
    return generate_task(**asdict(task))


def _phase2_lr(phase1, c_g2, c_p_const):
    """Fine-tuning keeps the global decay and, with projections, a constant multiplier."""
    sched = "none" if phase1.proj_schedule == "none" else "constant"
    return LrConfig(c_g=c_g2, t_g=phase1.t_g, proj_schedule=sched, c_p_const=c_p_const,
                    steps_per_unit=phase1.steps_per_unit)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(args):
    lr1 = LrConfig(c_g=args.c_g, t_g=args.t_g, proj_schedule=args.proj_lr if args.proj else "none",
                   c_p=args.c_p, t_p=args.t_p, c_p_const=args.c_p_const, steps_per_unit=args.steps_per_unit)
    return TrainConfig(seed=args.seed, phase1_steps=args.phase1_steps, phase2_steps=args.phase2_steps,
                       batch_size=args.batch_size, bptt_len=args.bptt_len, quant_mode=args.quant_mode,
                       lr1=lr1, lr2=_phase2_lr(lr1, args.c_g2, args.c_p_const), grad_clip=args.grad_clip,
                       eval_every=args.eval_every)


def cmd_train(args):
    if args.layers < 0 or args.cells < 1 or args.proj < 0:
        raise UsageError("--layers must be >= 0, --cells >= 1 and --proj >= 0")
    cfg = _train_config(args)
    task = _task_from(args)
    data = _task_data(task)
    model = Model.init_random(args.seed, task.input_dim, task.n_classes, args.layers, args.cells, args.proj)
    expected = param_count(task.input_dim, task.n_classes, args.layers, args.cells, args.proj)
    if model.n_params() != expected:
        raise RuntimeError(f"parameter count {model.n_params()} disagrees with formula {expected}")
    print(f"parameters: {model.n_params()}", file=sys.stderr)

    held = data["held-out"]

    def held_out(m):
        out = {"held_out_error": 1.0 - evaluate(m, held, "match")}
        out["held_out_error_quantized"] = 1.0 - evaluate(m, held, "mismatch", cfg.quant_mode if cfg.phase2_steps else "quant")
        return out

    stream = open(args.metrics, "w") if args.metrics else None
    try:
        metrics = MetricsWriter(stream)
        losses = train(model, (data["train"].inputs, data["train"].labels), cfg, metrics,
                       held_out if cfg.eval_every else None)
    finally:
        if stream is not None:
            stream.close()

    snap_to_float32(model)
    n_bytes = save_model(model, args.out)
    summary = {
        "out": args.out,
        "bytes": n_bytes,
        "params": model.n_params(),
        "phase1_final_loss": losses[0][-1] if losses[0] else None,
        "phase2_final_loss": losses[1][-1] if losses[1] else None,
        "scope": model.scope(),
        **held_out(model),
    }
    if args.plot:
        from qnn.plotting import curves_from_metrics, plot_error_curves, plot_loss

        base = args.plot
        paths = [plot_loss(metrics.records, f"{base}_loss.png")]
        curves = curves_from_metrics(metrics.records)
        if curves:
            paths.append(plot_error_curves(curves, f"{base}_held_out.png"))
        summary["plots"] = paths
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# quantize
# ---------------------------------------------------------------------------


def cmd_quantize(args):
    model = load_model(args.model)
    if not model.masters_present:
        raise QuantStateError("model file has no float masters to quantize")
    quantize_model(model, args.mode)
    n_bytes = save_model(model, args.out, store_masters=args.keep_masters)
    print(json.dumps({"out": args.out, "mode": args.mode, "bytes": n_bytes, "masters": args.keep_masters},
                     sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args):
    task = _task_from(args)
    model = load_model(args.model)
    baseline = load_model(args.baseline) if args.baseline else None
    data = _task_data(task)
    splits = EVAL_SPLITS if args.split == "all" else (args.split,)
    results = []
    for split in splits:
        acc = evaluate(model, data[split], args.condition, args.mismatch_scope)
        rel = None
        if baseline is not None:
            rel = relative_loss(evaluate(baseline, data[split], "match"), acc)
        results.append({"condition": args.condition, "split": split, "accuracy": acc, "error": 1.0 - acc,
                        "relative_loss": rel})
    if args.report == "json":
        payload = results[0] if len(results) == 1 else {"condition": args.condition, "results": results}
        print(json.dumps(payload, sort_keys=True, indent=2))
    else:
        print(f"{'split':<12} {'condition':<10} {'error %':>8} {'relative':>9}")
        for r in results:
            rel = "-" if r["relative_loss"] is None else f"{100 * r['relative_loss']:.1f}%"
            print(f"{r['split']:<12} {r['condition']:<10} {100 * r['error']:>8.2f} {rel:>9}")
    return 0


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------

PROTOCOL_KEYS = {
    "architectures": str, "seeds": str, "mismatch_scope": str, "workers": int,
    "task_seed": int, "n_sequences": int, "seq_len": int, "input_dim": int, "n_classes": int,
    "noise_level": float, "n_eval": int,
    "phase1_steps": int, "phase2_steps": int, "batch_size": int, "bptt_len": int, "grad_clip": float,
    "c_g": float, "t_g": float, "proj_lr": str, "c_p": float, "t_p": float, "c_p_const": float,
    "c_g2": float, "steps_per_unit": float,
}


def read_protocol_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment.  Lists are comma separated."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip().replace("-", "_"), value.strip()
            if not sep or key not in PROTOCOL_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
            try:
                values[key] = PROTOCOL_KEYS[key](value)
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    for required in ("architectures", "seeds"):
        if required not in values:
            raise UsageError(f"{path}: missing required key {required!r}")
    return values


def protocol_setup(values):
    """Turn config values into ``(architectures, TrainConfig, TaskParams, seeds, scope, workers)``."""
    try:
        seeds = [int(s) for s in values["seeds"].split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seeds list {values['seeds']!r}") from None
    if not seeds:
        raise UsageError("seeds list is empty")
    archs = [Architecture.parse(a) for a in values["architectures"].split(",") if a.strip()]
    td, tc, ld = TaskParams(), TrainConfig(), LrConfig()
    task = TaskParams(seed=values.get("task_seed", td.seed),
                      **{k: values.get(k, getattr(td, k)) for k in
                         ("n_sequences", "seq_len", "input_dim", "n_classes", "noise_level", "n_eval")})
    lr1 = LrConfig(c_g=values.get("c_g", ld.c_g), t_g=values.get("t_g", ld.t_g),
                   proj_schedule=values.get("proj_lr", ld.proj_schedule), c_p=values.get("c_p", ld.c_p),
                   t_p=values.get("t_p", ld.t_p), c_p_const=values.get("c_p_const", ld.c_p_const),
                   steps_per_unit=values.get("steps_per_unit", ld.steps_per_unit))
    cfg = TrainConfig(seed=seeds[0], **{k: values.get(k, getattr(tc, k)) for k in
                                        ("phase1_steps", "phase2_steps", "batch_size", "bptt_len", "grad_clip")},
                      lr1=lr1, lr2=_phase2_lr(lr1, values.get("c_g2", tc.lr2.c_g), lr1.c_p_const))
    scope = values.get("mismatch_scope", "quant")
    if scope not in ("quant", "quant-all"):
        raise UsageError(f"mismatch_scope must be quant or quant-all, got {scope!r}")
    return archs, cfg, task, seeds, scope, max(1, values.get("workers", 1))


def cmd_protocol(args):
    archs, cfg, task, seeds, scope, workers = protocol_setup(read_protocol_config(args.config))
    report = run_protocol(archs, cfg, task, seeds, scope, workers)
    text = report.to_json() if args.report == "json" else report.to_table()
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    if args.plot:
        from qnn.plotting import plot_protocol

        if any(not r.failed for r in report.rows):
            plot_protocol(report, args.plot)
    for row in report.rows:
        if row.failed:
            print(f"row {row.name} failed: {row.failed}", file=sys.stderr)
    return 0 if any(not r.failed for r in report.rows) else EXIT_FAILURE


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _time_forward(model, xs, mode, reps):
    times = []
    out = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = forward_batch(model, xs, mode)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def cmd_bench(args):
    if args.reps < 1 or args.frames < 1:
        raise UsageError("--reps and --frames must be positive")
    model = load_model(args.model)
    if model.scope() == "none":
        if not model.masters_present:
            raise QuantStateError("model has neither masters nor shadows")
        quantize_model(model, args.mode)
    xs = np.random.default_rng(args.seed).standard_normal((1, args.frames, model.input_dim))
    float_t, float_out = _time_forward(model, xs, "float", args.reps)
    quant_t, quant_out = _time_forward(model, xs, "quantized", args.reps)
    result = {
        "frames": args.frames,
        "reps": args.reps,
        "scope": model.scope(),
        "float_s_per_frame": float_t / args.frames,
        "quantized_s_per_frame": quant_t / args.frames,
        "ratio": quant_t / float_t,
        "max_abs_diff": float(np.abs(quant_out - float_out).max()),
    }
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="qnn", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d, l = TrainConfig(), LrConfig()
    p = sub.add_parser("train", help="float training followed by quantization-aware fine-tuning")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--cells", type=int, default=64)
    p.add_argument("--proj", type=int, default=0, help="projection size, 0 for none")
    p.add_argument("--phase1-steps", type=int, default=d.phase1_steps)
    p.add_argument("--phase2-steps", type=int, default=d.phase2_steps)
    p.add_argument("--quant-mode", choices=("quant", "quant-all"), default="quant")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--bptt-len", type=int, default=d.bptt_len)
    p.add_argument("--c-g", type=float, default=l.c_g)
    p.add_argument("--t-g", type=float, default=l.t_g)
    p.add_argument("--c-g2", type=float, default=d.lr2.c_g, help="global LR constant for phase 2")
    p.add_argument("--proj-lr", choices=("none", "scheduled", "constant"), default="scheduled")
    p.add_argument("--c-p", type=float, default=l.c_p)
    p.add_argument("--t-p", type=float, default=l.t_p)
    p.add_argument("--c-p-const", type=float, default=l.c_p_const)
    p.add_argument("--steps-per-unit", type=float, default=l.steps_per_unit)
    p.add_argument("--grad-clip", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--metrics", help="write the JSON-lines metrics stream here")
    p.add_argument("--plot", metavar="PREFIX", help="write PREFIX_loss.png (and PREFIX_held_out.png)")
    _add_task_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="post-training quantization of a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("quant", "quant-all"), default="quant")
    p.add_argument("--out", required=True)
    p.add_argument("--keep-masters", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate a model under one condition")
    p.add_argument("--model", required=True)
    p.add_argument("--condition", choices=("match", "mismatch", "quant", "quant-all"), required=True)
    p.add_argument("--split", choices=EVAL_SPLITS + ("held-out", "all"), default="eval-clean")
    p.add_argument("--mismatch-scope", choices=("quant", "quant-all"), default="quant")
    p.add_argument("--baseline", help="float model for the match baseline of the relative loss")
    p.add_argument("--report", choices=("json", "table"), default="json")
    _add_task_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="run the four-condition protocol from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--report", choices=("json", "table"), default="table")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--plot", metavar="PNG", help="bar chart of error rates")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("bench", help="time float vs quantized inference")
    p.add_argument("--model", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--mode", choices=("quant", "quant-all"), default="quant-all",
                   help="scope used when the model has no shadows")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qnn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergenceError, AccumulatorOverflowError, QuantStateError, ModelFormatError, OSError) as exc:
        print(f"qnn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except InvalidArgumentError as exc:
        print(f"qnn {args.command}: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
