"""Filter to Action Unit correlation and the dead-filter census.

For each active filter the top-N images by activation are collected and,
for every AU, the number of those images with the AU present is counted.
The correlation score is ``count / N``; only pairs with a full count are
kept.  Scores stay as integer counts so they are exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .model import Model
from .viz import filter_scores, rank_top

DEAD_EPS = 1e-6


class CorrelationError(ValueError):
    pass


@dataclass
class CorrelationReport:
    layer: str
    n: int
    counts: np.ndarray  # (J, U) present-counts among each filter's top-N; rows of dead filters are 0
    top: dict[int, list[str]]  # image ids ranked for each active filter
    active: list[int]
    dead: list[int]

    @property
    def n_filters(self) -> int:
        return self.counts.shape[0]

    def p(self, j: int, u: int) -> Fraction:
        return Fraction(int(self.counts[j, u]), self.n)

    @property
    def evaluated(self) -> list[tuple[int, int]]:
        return [(j, u) for j in self.active for u in range(self.counts.shape[1])]

    @property
    def kept(self) -> list[tuple[int, int]]:
        return [(j, u) for j, u in self.evaluated if self.counts[j, u] == self.n]

    @property
    def rejected(self) -> list[tuple[int, int]]:
        return [(j, u) for j, u in self.evaluated if self.counts[j, u] < self.n]


def neuron_census(model: Model, dataset, layer: str, eps: float = DEAD_EPS,
                  scores: np.ndarray | None = None) -> tuple[list[int], list[int]]:
    """Split filters into (active, dead); dead means the post-ReLU maximum over the dataset is <= eps."""
    if eps < 0:
        raise ValueError("census threshold must be non-negative")
    if scores is None:
        scores = filter_scores(model, dataset.pixels, layer)
    peak = scores.max(axis=0)
    active = [j for j in range(len(peak)) if peak[j] > eps]
    dead = [j for j in range(len(peak)) if peak[j] <= eps]
    return active, dead


def correlate(model: Model, dataset, layer: str = "conv3", n: int = 5, eps: float = DEAD_EPS) -> CorrelationReport:
    if dataset.au is None:
        raise CorrelationError("dataset has no AU annotations")
    if not 1 <= n <= len(dataset):
        raise CorrelationError(f"N must be in 1..{len(dataset)}, got {n}")
    present = (np.asarray(dataset.au) > 0).astype(int)
    scores = filter_scores(model, dataset.pixels, layer)
    active, dead = neuron_census(model, dataset, layer, eps, scores=scores)
    counts = np.zeros((scores.shape[1], present.shape[1]), dtype=int)
    top = {}
    for j in active:
        idx = rank_top(scores[:, j], dataset.ids, n)
        top[j] = [dataset.ids[i] for i in idx]
        counts[j] = present[idx].sum(axis=0)
    return CorrelationReport(layer, n, counts, top, active, dead)


def export_report(report: CorrelationReport, path) -> None:
    """Correlation rows ``layer,filter,au,P,kept`` then a blank line and ``filter,active`` census rows.

    AU columns use FACS numbering (index + 1); P is written as ``count/N``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "filter", "au", "P", "kept"])
        for j, u in report.evaluated:
            c = int(report.counts[j, u])
            w.writerow([report.layer, j, u + 1, f"{c}/{report.n}", int(c == report.n)])
        w.writerow([])
        w.writerow(["filter", "active"])
        dead = set(report.dead)
        for j in range(report.n_filters):
            w.writerow([j, int(j not in dead)])


def read_report(path) -> dict:
    """Parse an exported report back into exact fractions and the census."""
    pairs: dict[tuple[int, int], Fraction] = {}
    kept: set[tuple[int, int]] = set()
    census: dict[int, bool] = {}
    layer = None
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    section = None
    for row in rows:
        if not row:
            continue
        if row[0] == "layer":
            section = "pairs"
            continue
        if row[0] == "filter" and row[1] == "active":
            section = "census"
            continue
        if section == "pairs":
            layer = row[0]
            key = (int(row[1]), int(row[2]) - 1)
            num, den = row[3].split("/")
            pairs[key] = Fraction(int(num), int(den))
            if row[4] == "1":
                kept.add(key)
        elif section == "census":
            census[int(row[0])] = row[1] == "1"
    return {"layer": layer, "P": pairs, "kept": kept, "census": census}
