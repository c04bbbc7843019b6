"""Transferability scoring from dummy-label distributions.

Given a matrix of source-class probability rows N(x_i) and target labels
y_i, the score is the mean log expected prediction:

    L = (1/n) * sum_i log( sum_z P(y_i | z) * N(x_i)_z )

with P(y|z) estimated from the empirical joint (1/n) sum_i N(x_i)_z * 1[y_i=y].
L is never positive; values closer to zero predict easier transfer.

All accumulations use exactly rounded summation (math.fsum), which makes the
score bit-for-bit invariant under duplicating the dataset and independent of
row order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataIOError

ROW_SUM_TOL = 1e-6
MARGINAL_EPS = 1e-12


@dataclass
class LeepInput:
    """n rows of source-class probabilities plus n target labels."""

    dummy_dist: np.ndarray
    target_labels: np.ndarray

    def __post_init__(self):
        self.dummy_dist = np.asarray(self.dummy_dist, dtype=np.float64)
        self.target_labels = np.asarray(self.target_labels, dtype=np.int64)
        if self.dummy_dist.ndim != 2 or self.dummy_dist.shape[0] < 1:
            raise ContractError("dummy_dist must be a nonempty n x |Z| matrix")
        n = self.dummy_dist.shape[0]
        if self.target_labels.shape != (n,):
            raise ContractError("one target label per row required")
        if (self.dummy_dist < -1e-12).any():
            raise ContractError("dummy distributions must be nonnegative")
        sums = self.dummy_dist.sum(axis=1)
        if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
            raise ContractError("each dummy-distribution row must sum to 1")
        if self.target_labels.min() < 0:
            raise ContractError("target labels must be nonnegative indices")

    @property
    def n(self) -> int:
        return self.dummy_dist.shape[0]

    @property
    def num_source_classes(self) -> int:
        return self.dummy_dist.shape[1]

    @property
    def num_target_classes(self) -> int:
        return int(self.target_labels.max()) + 1


@dataclass
class ConditionalTable:
    """P(y|z) columns over the target classes, plus the source marginal."""

    cond: np.ndarray      # |Y| x |Z|
    marginal: np.ndarray  # |Z|


def empirical_conditional(inp: LeepInput) -> ConditionalTable:
    """Empirical joint -> conditional, with eps-smoothing of tiny marginals."""
    n, nz = inp.dummy_dist.shape
    ny = inp.num_target_classes
    joint = np.zeros((ny, nz))
    for y in range(ny):
        rows = inp.dummy_dist[inp.target_labels == y]
        for z in range(nz):
            joint[y, z] = math.fsum(rows[:, z]) / n
    marginal = np.array([math.fsum(joint[:, z]) for z in range(nz)])
    denom = np.where(marginal < MARGINAL_EPS, MARGINAL_EPS, marginal)
    return ConditionalTable(cond=joint / denom, marginal=marginal)


def leep_score(inp: LeepInput) -> float:
    """Mean log expected prediction; always <= 0 on valid input.

    Each inner sum is a convex combination of conditional probabilities and
    cannot exceed 1 mathematically; it is clamped at 1 so that row sums a few
    ulps above 1 (inside the validation tolerance) cannot flip the sign.
    """
    table = empirical_conditional(inp)
    terms = []
    for i in range(inp.n):
        row = inp.dummy_dist[i]
        cond_row = table.cond[inp.target_labels[i]]
        inner = math.fsum(cond_row[z] * row[z] for z in range(row.size))
        terms.append(math.log(min(inner, 1.0)))
    return math.fsum(terms) / inp.n


def leep_report(inp: LeepInput) -> dict:
    return {
        "leep": leep_score(inp),
        "n": inp.n,
        "num_source_classes": inp.num_source_classes,
        "num_target_classes": inp.num_target_classes,
    }


# ---------------------------------------------------------------------
# CSV interface: header z0..zK,label
# ---------------------------------------------------------------------


def read_leep_csv(path) -> LeepInput:
    p = Path(path)
    if not p.exists():
        raise DataIOError(f"no such file: {p}")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataIOError(f"empty csv: {p}") from None
        if header[-1] != "label" or not all(
                c == f"z{i}" for i, c in enumerate(header[:-1])):
            raise DataIOError("expected header z0..zK,label")
        k = len(header) - 1
        rows, labels = [], []
        for line in reader:
            if not line:
                continue
            if len(line) != k + 1:
                raise DataIOError("csv row width does not match header")
            rows.append([float(v) for v in line[:k]])
            labels.append(int(line[k]))
    if not rows:
        raise DataIOError(f"no data rows in {p}")
    try:
        return LeepInput(np.array(rows), np.array(labels))
    except ContractError as exc:
        raise DataIOError(f"invalid LEEP csv {p}: {exc}") from exc


def write_leep_csv(path, inp: LeepInput) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(inp.num_source_classes)] + ["label"])
        for row, label in zip(inp.dummy_dist, inp.target_labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def write_leep_report(path, inp: LeepInput) -> dict:
    report = leep_report(inp)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
