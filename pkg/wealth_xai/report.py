"""Markdown tables and the consolidated run report.

Nothing here reads the clock: rerunning the pipeline with the same seed reproduces the
report byte for byte.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .metrics import DICHOTOMIES, CrossPeriodGrid, EvalReport


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "n/a" if not np.isfinite(value) else f"{value:.3f}"
    return str(value)


def markdown_table(df: pd.DataFrame, index: bool = True) -> str:
    header = ([df.index.name or ""] if index else []) + [str(c) for c in df.columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for key, *values in df.itertuples(index=True, name=None):
        cells = ([_fmt(key)] if index else []) + [_fmt(v) for v in values]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def table1(reports: Mapping[str, EvalReport]) -> str:
    """Wealth estimation from the CNN features, one row per input variant."""
    df = pd.DataFrame(
        {"R²": [r.r2 for r in reports.values()], "rank corr.": [r.spearman for r in reports.values()],
         "sites": [r.n for r in reports.values()]},
        index=pd.Index(list(reports), name="input"),
    )
    return markdown_table(df)


def table2(grid: CrossPeriodGrid) -> str:
    """Across-period grid, R² and rank correlation side by side."""
    out = ["R² (rows: training phase, columns: test phase)\n", markdown_table(grid.frame("r2")),
           "\nRank correlation\n", markdown_table(grid.frame("spearman"))]
    return "\n".join(out)


def table3(comparison: pd.DataFrame) -> str:
    """Dichotomy MCCs per grouping source."""
    return markdown_table(comparison[list(DICHOTOMIES)])


def table4(correlations: Mapping[str, float]) -> str:
    df = pd.DataFrame({"Pearson r": list(correlations.values())}, index=pd.Index(list(correlations), name="method"))
    return markdown_table(df)


def confusion_markdown(report: EvalReport) -> str:
    labels = [f"q{g}" for g in range(1, report.confusion.shape[0] + 1)]
    df = pd.DataFrame(report.confusion, index=pd.Index(labels, name="true \\ predicted"), columns=labels)
    return markdown_table(df)


class ReportBuilder:
    """Accumulates sections; artifact paths are written relative to the report directory."""

    def __init__(self, root: Path, title: str):
        self.root = Path(root)
        self.parts: list[str] = [f"# {title}\n"]
        self.artifacts: list[Path] = []

    def rel(self, path: Path) -> str:
        return Path(os.path.relpath(path, self.root)).as_posix()

    def section(self, heading: str, body: str = "") -> None:
        self.parts.append(f"\n## {heading}\n")
        if body:
            self.parts.append(body if body.endswith("\n") else body + "\n")

    def text(self, body: str) -> None:
        self.parts.append(body if body.endswith("\n") else body + "\n")

    def figure(self, path: Path, caption: str) -> None:
        self.artifacts.append(path)
        self.parts.append(f"\n![{caption}]({self.rel(path)})\n")

    def files(self, paths: Iterable[Path]) -> None:
        listed = sorted(paths)
        self.artifacts.extend(listed)
        self.parts.append("".join(f"- [`{p.name}`]({self.rel(p)})\n" for p in listed))

    def render(self) -> str:
        return "".join(self.parts)

    def write(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


def missing_list(names: Sequence[str]) -> str:
    return "".join(f"- {n}: not run\n" for n in names)
