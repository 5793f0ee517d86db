"""Replayable plots built from a run's log and eval reports only."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cotrain import read_log  # noqa: E402

CURVES = {
    "precision": ("pl_precision", "pseudo-label foreground precision"),
    "recall": ("pl_recall", "pseudo-label foreground recall"),
    "win_conf": ("win_conf", "mean winning foreground confidence"),
}
SMOOTH = 25


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(y, np.nan)
    for i in range(len(y)):
        window = y[max(0, i - k + 1) : i + 1]
        window = window[~np.isnan(window)]
        if window.size:
            out[i] = window.mean()
    return out


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def curve_data(header: list[str], data: np.ndarray, column: str) -> tuple[np.ndarray, list[str], np.ndarray]:
    cols = [i for i, h in enumerate(header) if h.endswith("_" + column) and h.startswith("m")]
    names = [header[i].split("_", 1)[0] for i in cols]
    return data[:, 0], names, data[:, cols]


def plot_run(run_dir) -> list[Path]:
    run = Path(run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"missing run directory {run}")
    header, data = read_log(run / "log.csv")
    out_dir = run / "plots"
    out_dir.mkdir(exist_ok=True)
    written = []
    for name, (column, title) in CURVES.items():
        iters, models, values = curve_data(header, data, column)
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter"] + models)
            for i, it in enumerate(iters):
                w.writerow([int(it)] + [_fmt(v) for v in values[i]])
        fig, ax = plt.subplots(figsize=(6, 4))
        for j, model in enumerate(models):
            ax.plot(iters, _smooth(values[:, j], SMOOTH), label=model, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(title)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        png = out_dir / f"{name}.png"
        fig.savefig(png, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written += [png, out_dir / f"{name}.csv"]
    written.append(dice_table(run, out_dir / "dice_table.csv"))
    return written


def dice_table(run: Path, path: Path) -> Path:
    rows = [["report", "class", "dice_mean", "dice_std", "jaccard_mean", "asd_mean", "hd95_mean"]]
    for report in sorted((run / "eval").glob("*.json")) if (run / "eval").is_dir() else []:
        agg = json.loads(report.read_text())["aggregate"]
        for key, block in agg.items():
            rows.append(
                [report.stem, key]
                + [block["dice"]["mean"], block["dice"]["std"]]
                + [block[m]["mean"] for m in ("jaccard", "asd", "hd95")]
            )
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([["" if v is None else v for v in r] for r in rows])
    return path
