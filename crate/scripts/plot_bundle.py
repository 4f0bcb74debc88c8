#!/usr/bin/env python3
"""Render the plot_data.csv written by `phenoctl` into one PNG per panel.

Usage: plot_bundle.py OUT_DIR
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

XLABEL = {"n_H": "x", "n_C": "x"}


def main(out_dir: Path) -> None:
    panels = defaultdict(lambda: defaultdict(lambda: ([], [])))
    with open(out_dir / "plot_data.csv", newline="") as f:
        for row in csv.DictReader(f):
            xs, ys = panels[row["panel"]][row["series"]]
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
    for panel, series in panels.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        many = len(series) > 8
        for name, (xs, ys) in series.items():
            ax.plot(xs, ys, lw=0.8, label=None if many else name)
        ax.set_xlabel(XLABEL.get(panel, "t"))
        ax.set_ylabel(panel)
        if not many:
            ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / f"plot_{panel}.png", dpi=120)
        plt.close(fig)


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(Path(sys.argv[1]))
