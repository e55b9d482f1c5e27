"""PNG figures from the plot-data CSVs; the only module that imports matplotlib."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_cdf(rows, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    groups = defaultdict(list)
    for r in rows:
        groups[r["method"]].append(float(r["error"]))
    for method, errs in sorted(groups.items()):
        errs = np.sort(errs)
        ax.step(errs, np.arange(1, len(errs) + 1) / len(errs), where="post", label=method)
    ax.set_xlabel("positioning error (m)")
    ax.set_ylabel("CDF")
    ax.grid(alpha=0.3)
    if groups:
        ax.legend()
    return _save(fig, path)


def plot_convergence(rows, path, window: int = 10):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["method"], r["seed"])].append(r)
    for (method, seed), rs in sorted(groups.items()):
        ep = np.array([int(r["episode"]) for r in rs])
        for ax, key in zip(axes, ("reward_positioning", "reward_correction")):
            y = np.array([float(r[key]) for r in rs])
            w = max(1, min(window, len(y)))
            ax.plot(ep[w - 1:], np.convolve(y, np.ones(w) / w, mode="valid"), label=f"{method} s{seed}")
    for ax, title in zip(axes, ("positioning reward", "correction reward")):
        ax.set_xlabel("episode")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    if groups:
        axes[0].legend(fontsize=7)
    return _save(fig, path)


def plot_rmse_vs(rows, axis: str, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    groups = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r[axis] not in ("", "None"):
            groups[r["method"]][float(r[axis])].append(float(r["rmse"]))
    for method, by_x in sorted(groups.items()):
        xs = sorted(by_x)
        ax.plot(xs, [np.mean(by_x[x]) for x in xs], marker="o", label=method)
    ax.set_xlabel(axis)
    ax.set_ylabel("average RMSE (m)")
    ax.grid(alpha=0.3)
    if groups:
        ax.legend()
    return _save(fig, path)


def plot_heatgrid(rows, path):
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    if rows:
        x = np.array([float(r["x"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        xs, ys = np.unique(x), np.unique(y)
        for ax, key in zip(axes, ("angle", "distance_normalized", "joint")):
            v = np.array([float(r[key]) for r in rows])
            if key == "joint":
                v = np.log10(v)
            grid = np.full((len(ys), len(xs)), np.nan)
            grid[np.searchsorted(ys, y), np.searchsorted(xs, x)] = v
            im = ax.imshow(grid, origin="lower", extent=(xs[0], xs[-1], ys[0], ys[-1]), aspect="equal")
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_title("log10 joint" if key == "joint" else key)
    return _save(fig, path)


def render_all(data_dir, out_dir=None) -> list[Path]:
    """One PNG per CSV family found in ``data_dir``."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir) if out_dir is not None else data_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    made = [
        plot_cdf(_rows(data_dir / "cdf.csv"), out_dir / "cdf.png"),
        plot_convergence(_rows(data_dir / "convergence.csv"), out_dir / "convergence.png"),
        plot_heatgrid(_rows(data_dir / "heatgrid.csv"), out_dir / "heatgrid.png"),
    ]
    for axis in ("M", "N", "L"):
        made.append(plot_rmse_vs(_rows(data_dir / f"rmse_vs_{axis}.csv"), axis, out_dir / f"rmse_vs_{axis}.png"))
    return made
