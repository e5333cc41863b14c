"""PNG figures rendered from summary metric rows.

``metadata`` is written into the PNG text chunks (see ``Figure.savefig``).
"""
from __future__ import annotations

import re
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_task_rates", "plot_condition_bars", "plot_interval_sweep"]


def _interval(condition: str) -> int:
    m = re.fullmatch(r"F=(\d+)", condition)
    if m is None:
        raise ValueError(f"not an interval condition: {condition!r}")
    return int(m.group(1))


def _save(fig, path, metadata) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=metadata)
    plt.close(fig)


def plot_task_rates(rows, path, title: str = "success rate per task", metadata=None) -> None:
    """Horizontal bars of per-task success with standard-error whiskers."""
    rows = [r for r in rows if r.row_type == "task_summary"]
    rows.sort(key=lambda r: (r.suite, r.task_id))
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(rows) + 1.2))
    y = range(len(rows))
    ax.barh(list(y), [r.success_rate for r in rows], xerr=[r.success_rate_se for r in rows],
            color="tab:blue", capsize=3)
    ax.set_yticks(list(y))
    ax.set_yticklabels([f"{r.task_id} ({r.suite})" for r in rows])
    ax.invert_yaxis()
    ax.set_xlim(0, 1.05)
    ax.set_xlabel("success rate")
    ax.set_title(title)
    _save(fig, path, metadata)


def plot_condition_bars(rows, path, title: str = "success rate by condition",
                        metadata=None) -> None:
    """Grouped bars: one group per suite, one bar per condition."""
    rows = [r for r in rows if r.row_type == "suite_summary"]
    conditions = list(dict.fromkeys(r.condition for r in rows))
    suites = list(dict.fromkeys(r.suite for r in rows))
    table = {(r.condition, r.suite): r for r in rows}
    width = 0.8 / max(1, len(conditions))
    fig, ax = plt.subplots(figsize=(1.6 * len(suites) + 3, 4))
    for k, c in enumerate(conditions):
        xs, ys, es = [], [], []
        for j, s in enumerate(suites):
            r = table.get((c, s))
            if r is not None:
                xs.append(j + (k - (len(conditions) - 1) / 2) * width)
                ys.append(r.success_rate)
                es.append(r.success_rate_se)
        ax.bar(xs, ys, width, yerr=es, capsize=3, label=c)
    ax.set_xticks(range(len(suites)))
    ax.set_xticklabels(suites)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_title(title)
    ax.legend(fontsize="small", loc="lower right")
    _save(fig, path, metadata)


def plot_interval_sweep(rows, path, metadata=None) -> None:
    """Success rate and verifier calls against the verification interval."""
    series = defaultdict(list)
    for r in rows:
        if r.row_type == "suite_summary":
            series[r.suite].append((_interval(r.condition), r))
    fig, (ax_sr, ax_calls) = plt.subplots(1, 2, figsize=(9, 3.8))
    for suite, pts in sorted(series.items()):
        pts.sort(key=lambda p: p[0])
        fs = [f for f, _ in pts]
        ax_sr.errorbar(fs, [r.success_rate for _, r in pts],
                       yerr=[r.success_rate_se for _, r in pts], marker="o", capsize=3,
                       label=suite)
        ax_calls.plot(fs, [r.mean_verifier_calls for _, r in pts], marker="o", label=suite)
    for ax in (ax_sr, ax_calls):
        ax.set_xlabel("verification interval F (ticks)")
        ax.legend(fontsize="small")
    ax_sr.set_ylabel("success rate")
    ax_calls.set_ylabel("mean verifier calls per episode")
    _save(fig, path, metadata)
