"""Classification metrics and run reporting.

AUC uses the rank formulation of the Mann-Whitney statistic with midranks
for ties, which equals (correctly ordered pairs + half the tied pairs)
divided by the number of positive/negative pairs.  F1 is the positive-class
binary F1 at a fixed 0.5 threshold, with F1 defined as 0 whenever there are
no true positives.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .validation import check_binary_labels, check_scores


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0])
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties half)."""
    s = check_scores(scores)
    y = check_binary_labels(labels, n=s.shape[0])
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs both classes present")
    ranks = _midranks(s)
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def f1_acc(scores, labels, threshold: float = 0.5) -> tuple[float, float]:
    """(positive-class F1, accuracy) of the thresholded scores."""
    s = check_scores(scores)
    y = check_binary_labels(labels, n=s.shape[0])
    pred = (s >= threshold).astype(np.int64)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    f1 = 0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
    acc = float((pred == y).mean())
    return f1, acc


@dataclass
class MetricsRecord:
    auc: float
    f1: float
    acc: float
    n_samples: int

    def to_dict(self) -> dict:
        return {"auc": self.auc, "f1": self.f1, "acc": self.acc,
                "n_samples": self.n_samples}


def evaluate(scores, labels) -> MetricsRecord:
    s = check_scores(scores)
    f1, acc = f1_acc(s, labels)
    return MetricsRecord(auc=auc(s, labels), f1=f1, acc=acc, n_samples=s.shape[0])


def mean_std(values: list[float]) -> tuple[float, float | None]:
    """Mean and population standard deviation; std is None below 2 values."""
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, None
    return mean, float(np.std(values))


def _group_key(run: dict) -> tuple:
    comp = run.get("components", {})
    return (run["strategy"], float(run.get("train_fraction", 1.0)),
            bool(comp.get("rps", True)), bool(comp.get("pvp", True)),
            bool(comp.get("amt", True)))


def report(runs: list[dict], out_dir) -> list[dict]:
    """Aggregate per-run payloads into table.csv + table.json.

    Each run dict is a metrics.json payload: strategy, seed, train_fraction,
    components, n_trainable_params, and per-split metric blocks.  Rows group
    runs by (strategy, fraction, component toggles) and report mean/std of
    the test metrics across seeds.
    """
    if not runs:
        raise DataError("report needs at least one run")
    groups: dict[tuple, list[dict]] = {}
    for run in runs:
        groups.setdefault(_group_key(run), []).append(run)

    rows = []
    for key in sorted(groups, key=repr):
        members = sorted(groups[key], key=lambda r: r.get("seed", 0))
        strategy, fraction, rps, pvp, amt = key
        row: dict = {
            "strategy": strategy, "train_fraction": fraction,
            "rps": rps, "pvp": pvp, "amt": amt,
            "n_runs": len(members),
            "seeds": [m.get("seed", 0) for m in members],
            "n_trainable_params": members[0].get("n_trainable_params"),
        }
        for metric in ("auc", "f1", "acc"):
            values = [m["test"][metric] for m in members]
            mean, std = mean_std(values)
            row[f"mean_{metric}"] = mean
            row[f"std_{metric}"] = std
        rows.append(row)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = ["strategy", "train_fraction", "rps", "pvp", "amt", "n_runs",
               "n_trainable_params", "mean_auc", "std_auc", "mean_f1", "std_f1",
               "mean_acc", "std_acc"]
    with open(out_dir / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else row[c] for c in columns])
    (out_dir / "table.json").write_text(json.dumps(rows, indent=2) + "\n")
    return rows


def fraction_curve(runs: list[dict], out_path) -> list[tuple[float, float, float | None]]:
    """(fraction, mean test AUC, std) points for limited-data sweeps."""
    by_fraction: dict[float, list[float]] = {}
    for run in runs:
        by_fraction.setdefault(float(run.get("train_fraction", 1.0)), []).append(
            run["test"]["auc"])
    points = []
    for fraction in sorted(by_fraction):
        mean, std = mean_std(by_fraction[fraction])
        points.append((fraction, mean, std))
    with open(Path(out_path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "mean_auc", "std_auc"])
        for fraction, mean, std in points:
            writer.writerow([fraction, mean, "" if std is None else std])
    return points
