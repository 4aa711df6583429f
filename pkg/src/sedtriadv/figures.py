"""Report figures, rendered headlessly to files.

PNG date metadata is suppressed so repeated runs produce identical bytes."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first

from .errors import ConfigError  # noqa: E402
from .evaluator import MetricsReport  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Date": None}}


def _finish(fig, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)
    return out_path


def render_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    """Per-step training losses from a JSONL log, with the phase boundary
    marked when a second phase exists."""
    records = []
    with open(log_path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    if not records:
        raise ConfigError(f"empty training log {log_path}")
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key, label in [("loss_y", "classification"),
                       ("loss_d", "domain"),
                       ("loss_orth", "labeler orthogonality")]:
        values = [r[key] for r in records]
        if any(v != 0.0 for v in values):
            ax.plot(steps, values, label=label, linewidth=1.0)
    phase2 = [r["step"] for r in records if r["phase"] == 2]
    if phase2:
        ax.axvline(phase2[0] - 0.5, color="gray", linestyle="--",
                   linewidth=0.8, label="phase boundary")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training losses")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _finish(fig, out_path)


def render_f1_bars(report: MetricsReport, out_path: str | Path) -> Path:
    """Grouped per-class bars for event-based and segment-based F1."""
    names = [m.class_name for m in report.per_class]
    event = [100.0 * m.event.f1 for m in report.per_class]
    segment = [100.0 * m.segment.f1 for m in report.per_class]
    x = range(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 4))
    ax.bar([i - width / 2 for i in x], event, width, label="event F1")
    ax.bar([i + width / 2 for i in x], segment, width, label="segment F1")
    ax.axhline(100.0 * report.macro_event_f1, color="C0", linestyle=":",
               linewidth=0.9, label="macro event")
    ax.axhline(100.0 * report.macro_segment_f1, color="C1", linestyle=":",
               linewidth=0.9, label="macro segment")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("F1 (%)")
    ax.set_ylim(0, 105)
    ax.set_title("per-class F1")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _finish(fig, out_path)


def render_mask_coverage(stats: list[dict[str, float]],
                         class_names: list[str],
                         out_path: str | Path) -> Path:
    """Stacked bars of decided-present / decided-absent / undecided frame
    percentages per class."""
    if len(stats) != len(class_names):
        raise ConfigError(
            f"{len(stats)} stat rows for {len(class_names)} classes")
    pos = [s["pos_pct"] for s in stats]
    neg = [s["neg_pct"] for s in stats]
    ignore = [s["ignore_pct"] for s in stats]
    x = range(len(class_names))
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(class_names)), 4))
    ax.bar(x, pos, label="present", color="C2")
    ax.bar(x, neg, bottom=pos, label="absent", color="C0")
    ax.bar(x, ignore, bottom=[p + n for p, n in zip(pos, neg)],
           label="undecided", color="C7")
    ax.set_xticks(list(x))
    ax.set_xticklabels(class_names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("frame coverage (%)")
    ax.set_ylim(0, 100)
    ax.set_title("pseudo-label coverage")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _finish(fig, out_path)
