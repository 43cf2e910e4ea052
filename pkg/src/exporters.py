"""
Result files for solver runs: controls CSV, JSON summary, optional SVG plot and
sweep tables.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple

import numpy as np
import pandas as pd

from .models import RunSummary

logger = logging.getLogger(__name__)

try:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    HAS_MATPLOTLIB = True
except ImportError:
    HAS_MATPLOTLIB = False

CSV_FLOAT_FORMAT = "%.17g"
SWEEP_COLUMNS = ["tau_1", "tau_2", "tau_3"]


def write_controls_csv(path: Path, midpoints: np.ndarray, u: np.ndarray) -> Path:
    """One row per interval: midpoint time, then u_1..u_N (raw values)."""
    frame = pd.DataFrame(u, columns=[f"u_{i + 1}" for i in range(u.shape[1])])
    frame.insert(0, "t", midpoints)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def read_controls_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    frame = pd.read_csv(path, float_precision="round_trip")
    return frame["t"].to_numpy(), frame.drop(columns="t").to_numpy()


def write_summary(path: Path, summary: RunSummary) -> Path:
    payload = summary.model_dump(mode="json")
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_controls_svg(path: Path, midpoints: np.ndarray, u: np.ndarray, d: np.ndarray) -> Path | None:
    """Step plot of the active components; intervals with d >= 2 are marked on the t-axis."""
    if not HAS_MATPLOTLIB:
        logger.warning("matplotlib not available; skipping %s", path)
        return None

    plt.rcParams["svg.hashsalt"] = "switching-control"
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for i in range(u.shape[1]):
        column = u[:, i]
        if not np.any(column != 0.0):
            continue
        shown = np.where(column != 0.0, column, np.nan)
        ax.step(midpoints, shown, where="mid", label=f"$u_{{{i + 1}}}$")
    ax.step(midpoints, signed_envelope(u), where="mid", color="0.3", linewidth=0.6, linestyle=":",
            label="signed $|u|_1$")
    marked = midpoints[d >= 2]
    if marked.size:
        ax.plot(marked, np.zeros_like(marked), "k|", markersize=8, label="no perfect switching")
    ax.axhline(0.0, color="0.6", linewidth=0.5)
    ax.set_xlabel("t")
    ax.legend(loc="upper right", fontsize="small", ncol=2)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_sweep_table(path: Path, rows: Sequence[Dict[str, Any]], param: str) -> Path:
    """CSV with one row per sweep value, columns in table order."""
    last = "gamma_bar" if param == "alpha" else "converged"
    columns = [param, *SWEEP_COLUMNS, last, "ssn", "cg"]
    pd.DataFrame(list(rows), columns=columns).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def sweep_row(param: str, value: float, tau: Dict[int, int], extra: Dict[str, Any]) -> Dict[str, Any]:
    row: Dict[str, Any] = {param: value}
    for j, column in enumerate(SWEEP_COLUMNS, start=1):
        row[column] = tau.get(j, 0)
    row.update(extra)
    return row


def signed_envelope(u: np.ndarray) -> np.ndarray:
    """|u(t)|_1 carrying the sign of the dominant component."""
    dominant = np.argmax(np.abs(u), axis=1)
    sign = np.sign(u[np.arange(u.shape[0]), dominant])
    return sign * np.abs(u).sum(axis=1)
