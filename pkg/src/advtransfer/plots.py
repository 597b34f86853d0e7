"""Figures plus the CSV of exactly the values drawn."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import write_csv  # noqa: E402


class PlotWriter:
    """Writes ``<id>.png`` and ``<id>.csv``; each id at most once per writer."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def _claim(self, pid):
        if pid in self.written:
            raise ValueError(f"plot {pid!r} already written")
        self.written.append(pid)

    def _save(self, pid, fig, rows):
        fig.tight_layout()
        fig.savefig(self.out / f"{pid}.png", dpi=100)
        plt.close(fig)
        write_csv(self.out / f"{pid}.csv", rows)
        return self.out / f"{pid}.png"

    def lines(self, pid, rows, x, y, series, title="", xlabel=None, ylabel=None, categorical_x=False):
        """One line per distinct ``series`` value; the CSV is read back from the drawn artists."""
        self._claim(pid)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        groups = {}
        for r in rows:
            groups.setdefault(r.get(series, ""), []).append(r)
        xticks = None
        for name, rs in groups.items():
            xs = [r[x] for r in rs]
            if categorical_x:
                xticks = xs
                xs = list(range(len(xs)))
            ax.plot(xs, [float(r[y]) for r in rs], marker="o", label=str(name))
        if xticks is not None:
            ax.set_xticks(range(len(xticks)), [str(t) for t in xticks])
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(ylabel or y)
        ax.set_title(title)
        if len(groups) > 1 or series:
            ax.legend(fontsize=7)
        drawn = []
        for line in ax.lines:
            for xv, yv in zip(line.get_xdata(), line.get_ydata()):
                drawn.append({series or "series": line.get_label(), x: xv if not categorical_x else xticks[int(xv)],
                              y: float(yv)})
        return self._save(pid, fig, drawn)

    def heatmap(self, pid, matrix, row_labels, col_labels, title="", fmt="{:.2f}"):
        self._claim(pid)
        m = np.asarray(matrix, dtype=float)
        fig, ax = plt.subplots(figsize=(max(4, 0.35 * len(col_labels) + 2), max(3, 0.3 * len(row_labels) + 1.5)))
        im = ax.imshow(m, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(col_labels)), [str(c) for c in col_labels], rotation=90, fontsize=7)
        ax.set_yticks(range(len(row_labels)), [str(r) for r in row_labels], fontsize=7)
        if m.size <= 64:
            for i in range(m.shape[0]):
                for j in range(m.shape[1]):
                    ax.text(j, i, fmt.format(m[i, j]), ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax)
        ax.set_title(title)
        drawn = np.asarray(im.get_array())
        rows = [{"row": str(r), **{str(c): float(v) for c, v in zip(col_labels, drawn[i])}}
                for i, r in enumerate(row_labels)]
        return self._save(pid, fig, rows)

    def bars(self, pid, labels, values, title=""):
        self._claim(pid)
        fig, ax = plt.subplots(figsize=(4, 3))
        cont = ax.bar([str(l) for l in labels], values)
        ax.set_title(title)
        rows = [{"label": str(l), "value": float(p.get_height())} for l, p in zip(labels, cont.patches)]
        return self._save(pid, fig, rows)


def emit_plots(results_dir, out_dir=None) -> list[Path]:
    """Plot everything found in a results directory (sweeps, transfer table, traceback)."""
    results_dir = Path(results_dir)
    w = PlotWriter(out_dir or results_dir / "plots")
    paths = []
    sweeps_file = results_dir / "sweeps.json"
    if sweeps_file.exists():
        for sid, s in json.loads(sweeps_file.read_text()).items():
            rows, kind = s["rows"], s["kind"]
            if not rows:
                continue
            if kind == "iterations":
                paths.append(w.lines(sid, rows, "iteration", "success", "attack", "Transfer success vs iterations"))
            elif kind == "window":
                paths.append(w.lines(sid, rows, "window", "success", "", "Look-ahead window", categorical_x=True))
            elif kind == "copies":
                paths.append(w.lines(sid, rows, "copies", "success", "attack", "Success vs input copies"))
            elif kind == "layers":
                paths.append(w.lines(sid, rows, "layer", "success", "variant", "Success per layer", categorical_x=True))
            elif kind == "eps":
                tr = sorted({r["eps_train"] for r in rows})
                te = sorted({r["eps_test"] for r in rows})
                lookup = {(r["eps_train"], r["eps_test"]): r["success"] for r in rows}
                m = [[lookup[(a, b)] for b in te] for a in tr]
                paths.append(w.heatmap(sid, m, [f"{a * 255:.0f}" for a in tr], [f"{b * 255:.0f}" for b in te],
                                       "Success: eps_train (rows) x eps_test (cols)"))
            elif kind == "diversity":
                paths.append(w.bars(sid, [r["transform"] for r in rows], [r["diversity"] for r in rows],
                                    "Input diversity"))
    res_file = results_dir / "results.json"
    if res_file.exists():
        grid = json.loads(res_file.read_text())["transfer"]
        cols = [k for k in grid[0] if k.endswith(":mean")] if grid else []
        if cols:
            m = [[r[c] for c in cols] for r in grid]
            paths.append(w.heatmap("transfer", m, [r["attack"] for r in grid], [c[:-5] for c in cols],
                                   "Transfer success"))
    tb_file = results_dir / "traceback.json"
    if tb_file.exists():
        t = json.loads(tb_file.read_text())
        paths.append(w.heatmap("traceback_confusion", t["confusion"], t["attack_names"], t["attack_names"],
                               "Traceback confusion", fmt="{:.0f}"))
        for name, f in t["class_frequency"].items():
            paths.append(w.bars(f"class_frequency_{name}", [e["class"] for e in f["top"]],
                                [e["frequency"] for e in f["top"]], f"{name}: top predicted classes"))
    return paths
