"""Figures for training runs and protocol reports, written straight to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from qnn.toytask import CONDITIONS, EVAL_SPLITS  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.75),
    "figure.dpi": 110,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_error_curves(curves, path, title="Held-out label error vs training time"):
    """One line per learning-rate schedule.

    ``curves`` maps a label to ``(times, errors)`` with errors as fractions.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (times, errors) in curves.items():
            ax.plot(times, 100.0 * np.asarray(errors), marker="o", markersize=2.5, label=label)
        ax.set_xlabel("schedule time")
        ax.set_ylabel("label error (%)")
        ax.set_title(title)
        if curves:
            ax.legend()
        return _save(fig, path)


def curves_from_metrics(records, key="held_out_error"):
    """Pull ``(time, value)`` pairs for ``key`` out of a metrics stream, one curve per phase."""
    curves = {}
    for rec in records:
        if key in rec:
            times, values = curves.setdefault(f"phase {rec['phase']}", ([], []))
            times.append(rec["time"])
            values.append(rec[key])
    return curves


def plot_loss(records, path):
    """Per-step training loss with both phases on one axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        offset = 0
        for phase in sorted({r["phase"] for r in records}):
            steps = [offset + r["step"] for r in records if r["phase"] == phase]
            ax.plot(steps, [r["loss"] for r in records if r["phase"] == phase], label=f"phase {phase}")
            offset = steps[-1] + 1 if steps else offset
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.legend()
        return _save(fig, path)


def plot_protocol(report, path):
    """Grouped bars of error rate per architecture, one panel per evaluation split."""
    rows = [r for r in report.rows if not r.failed]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(EVAL_SPLITS), sharey=True, figsize=(8.0, 3.5))
        width = 0.8 / len(CONDITIONS)
        x = np.arange(len(rows))
        for ax, split in zip(axes, EVAL_SPLITS):
            for j, cond in enumerate(CONDITIONS):
                errs = [100.0 * r.error(split, cond) for r in rows]
                ax.bar(x + (j - (len(CONDITIONS) - 1) / 2) * width, errs, width, label=cond)
            ax.set_xticks(x, [r.name for r in rows])
            ax.set_title(split)
        axes[0].set_ylabel("frame error (%)")
        axes[-1].legend(loc="lower right")
        return _save(fig, path)
