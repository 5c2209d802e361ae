"""Metrics, threshold search, mask cleanup and fold summary reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .morphology import fill_holes

ALGORITHMS = ("1A", "1B", "2")


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def overlap_counts(a, b):
    a, b = _pair(a, b)
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def jaccard(a, b):
    inter, na, nb = overlap_counts(a, b)
    union = na + nb - inter
    return 1.0 if union == 0 else inter / union


def dice(a, b):
    inter, na, nb = overlap_counts(a, b)
    return 1.0 if na + nb == 0 else 2 * inter / (na + nb)


def optimize_threshold(probs, truths):
    """Grid threshold in {0.01, ..., 0.99} maximizing mean Jaccard of ``prob > t``.

    Ties go to the threshold nearest 0.5, then to the smaller one. Means
    are taken with ``math.fsum`` so the answer does not depend on the
    order of the inputs.
    """
    probs, truths = list(probs), list(truths)
    if not probs or len(probs) != len(truths):
        raise ValueError("optimize_threshold needs non-empty, equally long lists")
    best_key, best_t = None, None
    for k in range(1, 100):
        t = k / 100
        score = math.fsum(jaccard(np.asarray(p) > t, m) for p, m in zip(probs, truths)) / len(probs)
        key = (-score, abs(k - 50), k)
        if best_key is None or key < best_key:
            best_key, best_t = key, t
    return best_t


def binarize_and_clean(p, tau, algorithm):
    """1A: fixed 0.5 threshold, nothing else. 1B: ``p > tau`` then hole filling."""
    p = np.asarray(p, dtype=np.float64)
    if algorithm == "1A":
        return p > 0.5
    if algorithm == "1B":
        if not 0.0 < tau < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return fill_holes(p > tau)
    raise ValueError(f"unknown U-Net algorithm {algorithm!r}")


@dataclass(frozen=True)
class EvalRow:
    fold: int
    algorithm: str
    jaccard: float
    dice: float


def evaluate_fold(fold, algorithm, predictions, truths, ids=None):
    """Mean Jaccard and Dice over one fold's validation samples.

    ``predictions`` maps sample id (or index) to a predicted mask;
    ``truths`` maps the same keys to truth masks.
    """
    keys = list(ids) if ids is not None else list(truths)
    if not keys:
        raise ValueError("fold has no validation samples")
    js, ds = [], []
    for key in keys:
        if key not in predictions:
            raise KeyError(f"missing prediction for sample {key!r}")
        js.append(jaccard(predictions[key], truths[key]))
        ds.append(dice(predictions[key], truths[key]))
    return EvalRow(fold, algorithm, math.fsum(js) / len(js), math.fsum(ds) / len(ds))


@dataclass
class ReportTable:
    rows: list
    summary: dict  # algorithm -> {"m": (J, D), "sigma": (J, D)}
    threshold_mode: str = "train-holdout"

    def algorithms(self):
        return [a for a in ALGORITHMS if a in self.summary] + \
            sorted(a for a in self.summary if a not in ALGORITHMS)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "algorithm", "jaccard", "dice"])
        for r in sorted(self.rows, key=lambda r: (r.fold, _algo_key(r.algorithm))):
            w.writerow([r.fold, r.algorithm, f"{r.jaccard:.6f}", f"{r.dice:.6f}"])
        for stat in ("m", "sigma"):
            for a in self.algorithms():
                j, d = self.summary[a][stat]
                w.writerow([stat, a, f"{j:.6f}", f"{d:.6f}"])
        return buf.getvalue()

    def to_text(self):
        algos = self.algorithms()
        folds = sorted({r.fold for r in self.rows})
        cell = {(r.fold, r.algorithm): r for r in self.rows}
        header = ["Fold"] + [f"Algorithm {a}" for a in algos]
        body = []
        for f in folds:
            line = [str(f)]
            for a in algos:
                r = cell.get((f, a))
                line.append("-" if r is None else f"{r.jaccard:.2f} ({r.dice:.2f})")
            body.append(line)
        for stat, label in (("m", "m"), ("sigma", "sigma")):
            body.append([label] + [
                "{:.2f} ({:.2f})".format(*self.summary[a][stat]) for a in algos])
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = " | ".join("{:<%d}" % w for w in widths)
        lines = [fmt.format(*header), "-" * (sum(widths) + 3 * (len(widths) - 1))]
        lines += [fmt.format(*row) for row in body]
        lines.append(f"threshold mode: {self.threshold_mode}")
        return "\n".join(lines) + "\n"


def _algo_key(a):
    return (ALGORITHMS.index(a), a) if a in ALGORITHMS else (len(ALGORITHMS), a)


def emit_report(rows, threshold_mode="train-holdout") -> ReportTable:
    """Per-algorithm mean and population standard deviation over fold rows."""
    rows = list(rows)
    summary = {}
    for a in sorted({r.algorithm for r in rows}, key=_algo_key):
        sel = [r for r in rows if r.algorithm == a]
        js = [r.jaccard for r in sel]
        ds = [r.dice for r in sel]
        summary[a] = {"m": (_mean(js), _mean(ds)), "sigma": (_pstd(js), _pstd(ds))}
    return ReportTable(rows, summary, threshold_mode)


def _mean(xs):
    return math.fsum(xs) / len(xs)


def _pstd(xs):
    if all(x == xs[0] for x in xs):
        return 0.0
    m = _mean(xs)
    return math.sqrt(math.fsum((x - m) ** 2 for x in xs) / len(xs))
