"""CSV exports and matplotlib figures for training runs.

Every CSV has a header row and a fixed column order. Figures are rendered with
the Agg backend and saved without timestamped metadata, so identical inputs
produce identical files.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

EXCHANGE_COLUMNS = ["iteration", "agent", "neighbor", "bytes"]
COMM_COLUMNS = ["agent", "comm_frequency", "bytes_per_comm_iteration", "comm_iterations", "total_bytes",
                "centralized_bytes"]
METRIC_COLUMNS = ["agent", "image", "psnr", "ssim"]

STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
PNG_META = {"Software": None}


def trace_columns(n_layers: int) -> list[str]:
    return ["iteration", "agent", "loss", "disagreement"] + [f"grad_norm_layer_{i + 1}" for i in range(n_layers)]


def _fmt(v) -> str:
    # repr round-trips floats exactly and is stable across runs
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_trace_csv(path, trace, n_layers: int = 8):
    rows = []
    for r in trace:
        norms = list(r.layer_grad_norms) or [""] * n_layers
        if len(norms) != n_layers:
            raise ValueError(f"trace row has {len(norms)} layer norms, expected {n_layers}")
        rows.append([r.iteration, r.agent, r.loss, r.disagreement, *norms])
    return _write(path, trace_columns(n_layers), rows)


def write_exchange_log_csv(path, log):
    return _write(path, EXCHANGE_COLUMNS, [[r.iteration, r.agent, r.neighbor, r.bytes] for r in log.records])


def write_comm_report_csv(path, report_rows):
    return _write(path, COMM_COLUMNS, [[row[c] for c in COMM_COLUMNS] for row in report_rows])


def write_metrics_csv(path, rows):
    """``rows`` are dicts with METRIC_COLUMNS keys; ``image`` is a frame id or ``"mean"``."""
    return _write(path, METRIC_COLUMNS, [[row[c] for c in METRIC_COLUMNS] for row in rows])


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def read_exchange_log_csv(path, n_agents: int | None = None):
    from .consensus import ExchangeLog

    rows = read_csv(path)
    if rows and list(rows[0]) != EXCHANGE_COLUMNS:
        raise ValueError(f"{path}: expected columns {EXCHANGE_COLUMNS}")
    agents = {int(r["agent"]) for r in rows} | {int(r["neighbor"]) for r in rows}
    log = ExchangeLog(n_agents if n_agents is not None else (max(agents) + 1 if agents else 1))
    for r in rows:
        log.add(int(r["iteration"]), int(r["agent"]), int(r["neighbor"]), int(r["bytes"]))
    return log


def _per_agent(trace, attr):
    series = defaultdict(list)
    for r in trace:
        series[r.agent].append((r.iteration, getattr(r, attr)))
    return {a: np.array(v, dtype=float).T for a, v in sorted(series.items())}


def _smooth(y, window=20):
    if y.size < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_trace(trace, path):
    """Loss (window-20 mean) and neighbour disagreement per agent over iterations."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_d) = plt.subplots(1, 2)
        for agent, (it, loss) in _per_agent(trace, "loss").items():
            sm = _smooth(loss)
            ax_l.plot(it[it.size - sm.size:], sm, lw=1, label=f"agent {agent}")
        for agent, (it, dis) in _per_agent(trace, "disagreement").items():
            ax_d.plot(it, dis, lw=1)
        ax_l.set(xlabel="iteration", ylabel="batch loss", title="local loss")
        if all(r.loss > 0 for r in trace):
            ax_l.set_yscale("log")
        ax_d.set(xlabel="iteration", ylabel=r"max $\|\Theta_i-\Theta_j\|_2$", title="disagreement")
        ax_l.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)


def plot_grad_norms(trace, path, agent: int = 0):
    """Per-layer trunk gradient norms for one agent, input layer first."""
    rows = [r for r in trace if r.agent == agent and r.layer_grad_norms]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        if rows:
            it = np.array([r.iteration for r in rows])
            norms = np.array([r.layer_grad_norms for r in rows])
            colors = plt.cm.viridis(np.linspace(0, 0.9, norms.shape[1]))
            for j in range(norms.shape[1]):
                ax.plot(it, norms[:, j], lw=0.8, color=colors[j], label=f"layer {j + 1}")
            if np.any(norms > 0):
                ax.set_yscale("log")
            ax.legend(ncol=4, fontsize=7)
        ax.set(xlabel="iteration", ylabel="gradient L2 norm", title=f"trunk gradient norms, agent {agent}")
        fig.tight_layout()
        return _save(fig, path)


def plot_comm_report(report_rows, path):
    """Bytes received per agent next to the raw-image baseline."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        agents = [r["agent"] for r in report_rows]
        totals = [r["total_bytes"] / 1e6 for r in report_rows]
        ax.bar(agents, totals, color="tab:blue", label="weights received")
        if report_rows and report_rows[0]["centralized_bytes"]:
            ax.axhline(report_rows[0]["centralized_bytes"] / 1e6, color="tab:red", ls="--",
                       label="raw images (centralized)")
        ax.set_xticks(agents)
        ax.set(xlabel="agent", ylabel="MB", title="communication per agent")
        ax.legend(fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
