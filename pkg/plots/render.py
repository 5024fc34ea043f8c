#!/usr/bin/env python3
"""Render paper-style figures from the experiment CSVs.

Reads the metric tables the `krecycle` CLI writes (replay.csv,
sweep.csv, similarity.csv) and produces multi-panel PNG figures:

  replay      four panels vs system index: iterations, cumulative
              iterations, relative hypergradient error (log y), and
              proposed one-step upper cost; one line per strategy
  sweep       four panels vs recycle dimension: total iterations,
              total FLOPs, max and mean relative hypergradient error
  similarity  three panels vs system index: relative differences of
              consecutive Hessians, right-hand sides, and solutions

Usage:
    python plots/render.py --in <csv dir> --out <figure dir> [--kind replay|sweep|similarity]

Rendering is read-only over the CSVs and deterministic (fixed figure
size and DPI); re-running overwrites the outputs.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

FIGSIZE_PER_PANEL = 3.2
DPI = 120

REPLAY_COLUMNS = [
    "strategy",
    "system",
    "iterations",
    "cum_iterations",
    "hg_rel_error",
    "one_step_cost",
]
SWEEP_COLUMNS = [
    "strategy",
    "recycle_dim",
    "total_iterations",
    "total_flops",
    "max_hg_rel_error",
    "mean_hg_rel_error",
]
SIMILARITY_COLUMNS = ["system", "h_rel_diff", "g_rel_diff", "w_rel_diff"]


class SchemaError(ValueError):
    """The CSV does not carry the columns a figure needs."""


class EmptyTableError(ValueError):
    """The CSV has a header but no data rows."""


@dataclass
class MetricsTable:
    """Parsed CSV rows with the original column order preserved."""

    columns: list[str]
    rows: list[dict]

    @classmethod
    def read(cls, path, required: list[str]) -> "MetricsTable":
        path = Path(path)
        with path.open(newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise EmptyTableError(f"{path}: no header row")
            missing = [c for c in required if c not in reader.fieldnames]
            if missing:
                raise SchemaError(f"{path}: missing columns {missing}")
            rows = list(reader)
        if not rows:
            raise EmptyTableError(f"{path}: no data rows")
        return cls(columns=list(reader.fieldnames), rows=rows)

    def numeric(self, row: dict, key: str) -> float | None:
        text = row[key]
        if text == "":
            return None
        value = float(text)
        if not math.isfinite(value):
            raise SchemaError(f"non-finite value {text!r} in column {key!r}")
        return value

    def series_keys(self, key: str) -> list[str]:
        """Distinct values of a column, in first-appearance order."""
        seen: dict[str, None] = {}
        for row in self.rows:
            seen.setdefault(row[key], None)
        return list(seen)


@dataclass
class RenderInfo:
    path: Path
    panels: int
    series_per_panel: int


def _new_figure(panels: int):
    fig, axes = plt.subplots(
        1, panels, figsize=(FIGSIZE_PER_PANEL * panels, 3.0), dpi=DPI
    )
    return fig, list(axes) if panels > 1 else [axes]


def _save(fig, out_path: Path):
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


def plot_replay(csv_path, out_dir) -> RenderInfo:
    table = MetricsTable.read(csv_path, REPLAY_COLUMNS)
    strategies = table.series_keys("strategy")
    panels = [
        ("iterations", "iterations", False),
        ("cum_iterations", "cumulative iterations", False),
        ("hg_rel_error", "relative hypergradient error", True),
        ("one_step_cost", "proposed upper cost", False),
    ]
    fig, axes = _new_figure(len(panels))
    for ax, (column, label, logscale) in zip(axes, panels):
        for name in strategies:
            xs, ys = [], []
            for row in table.rows:
                if row["strategy"] != name:
                    continue
                value = table.numeric(row, column)
                if value is None:
                    continue
                xs.append(int(row["system"]))
                ys.append(value)
            ax.plot(xs, ys, marker=".", label=name)
        ax.set_xlabel("system index")
        ax.set_ylabel(label)
        if logscale:
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    out_path = Path(out_dir) / "replay.png"
    _save(fig, out_path)
    return RenderInfo(out_path, len(panels), len(strategies))


def plot_sweep(csv_path, out_dir) -> RenderInfo:
    table = MetricsTable.read(csv_path, SWEEP_COLUMNS)
    strategies = table.series_keys("strategy")
    panels = [
        ("total_iterations", "total iterations", False),
        ("total_flops", "total FLOPs", False),
        ("max_hg_rel_error", "max relative hg error", True),
        ("mean_hg_rel_error", "mean relative hg error", True),
    ]
    fig, axes = _new_figure(len(panels))
    for ax, (column, label, logscale) in zip(axes, panels):
        for name in strategies:
            xs, ys = [], []
            for row in table.rows:
                if row["strategy"] != name:
                    continue
                value = table.numeric(row, column)
                if value is None:
                    continue
                xs.append(int(row["recycle_dim"]))
                ys.append(value)
            ax.plot(xs, ys, marker=".", label=name)
        ax.set_xlabel("recycle dimension")
        ax.set_ylabel(label)
        if logscale:
            ax.set_yscale("log")
        ax.legend(fontsize=7)
    out_path = Path(out_dir) / "sweep.png"
    _save(fig, out_path)
    return RenderInfo(out_path, len(panels), len(strategies))


def plot_similarity(csv_path, out_dir) -> RenderInfo:
    table = MetricsTable.read(csv_path, SIMILARITY_COLUMNS)
    panels = [
        ("h_rel_diff", "Hessian rel. difference"),
        ("g_rel_diff", "right-hand-side rel. difference"),
        ("w_rel_diff", "solution rel. difference"),
    ]
    fig, axes = _new_figure(len(panels))
    for ax, (column, label) in zip(axes, panels):
        xs = [int(row["system"]) for row in table.rows]
        ys = [table.numeric(row, column) for row in table.rows]
        positive = [y for y in ys if y is not None and y > 0]
        ax.plot(xs, ys, marker=".")
        ax.set_xlabel("system index")
        ax.set_ylabel(label)
        if positive and len(positive) == len(ys):
            ax.set_yscale("log")
    out_path = Path(out_dir) / "similarity.png"
    _save(fig, out_path)
    return RenderInfo(out_path, len(panels), 1)


KINDS = {
    "replay": ("replay.csv", plot_replay),
    "sweep": ("sweep.csv", plot_sweep),
    "similarity": ("similarity.csv", plot_similarity),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--in", dest="in_dir", required=True, help="directory with CSVs")
    parser.add_argument("--out", dest="out_dir", required=True, help="directory for PNGs")
    parser.add_argument(
        "--kind",
        choices=sorted(KINDS) + ["all"],
        default="all",
        help="which figure(s) to render",
    )
    args = parser.parse_args(argv)

    kinds = sorted(KINDS) if args.kind == "all" else [args.kind]
    rendered = 0
    for kind in kinds:
        filename, renderer = KINDS[kind]
        csv_path = Path(args.in_dir) / filename
        if not csv_path.exists():
            if args.kind != "all":
                print(f"error: {csv_path} not found", file=sys.stderr)
                return 1
            continue
        try:
            info = renderer(csv_path, args.out_dir)
        except (SchemaError, EmptyTableError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"wrote {info.path} ({info.panels} panels, {info.series_per_panel} series)")
        rendered += 1
    if rendered == 0:
        print(f"error: no known CSVs found in {args.in_dir}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
