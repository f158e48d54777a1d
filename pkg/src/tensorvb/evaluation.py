"""Held-out splits, ranking and error metrics, and the link-prediction protocol."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateSplit, EmptyTensor, SingleClass, SupportMismatch, UnknownIndex, ValidationError
from .model import ModelSpec
from .solvers import SolverConfig, fit, predict
from .tensor import SparseTensor, rng_for

REPORT_COLUMNS = ("algorithm", "model", "hide_fraction", "seed", "AUC", "RMSE", "iterations", "wall_time")


@dataclass(frozen=True)
class SplitSpec:
    hide_fraction: float
    seed: int = 0
    scope: str = "entries"
    slice_index: str | None = None

    def __post_init__(self):
        if not 0 < self.hide_fraction < 1:
            raise ValidationError(f"hide_fraction must lie strictly inside (0, 1), got {self.hide_fraction}")
        if self.scope not in ("entries", "slices"):
            raise ValidationError(f"scope must be 'entries' or 'slices', got {self.scope!r}")
        if self.scope == "slices" and self.slice_index is None:
            raise ValidationError("slice scope needs slice_index")


def make_split(tensor: SparseTensor, spec: SplitSpec):
    """Split the support of ``tensor`` into disjoint ``(train, test)`` tensors.

    ``entries`` hides ``round(hide_fraction * nnz)`` uniformly chosen entries.
    ``slices`` hides every entry whose ``slice_index`` coordinate falls in a
    random ``round(hide_fraction * cardinality)`` subset of that index's values.
    """
    if tensor.nnz == 0:
        raise EmptyTensor("cannot split an empty tensor")
    rng = rng_for(spec.seed, "mask")
    hide = np.zeros(tensor.nnz, dtype=bool)
    if spec.scope == "entries":
        n_test = int(round(spec.hide_fraction * tensor.nnz))
        hide[rng.choice(tensor.nnz, size=n_test, replace=False)] = True
    else:
        if spec.slice_index not in tensor.indices:
            raise UnknownIndex(f"tensor has no index {spec.slice_index!r}")
        axis = tensor.indices.index(spec.slice_index)
        card = tensor.shape[axis]
        chosen = rng.choice(card, size=int(round(spec.hide_fraction * card)), replace=False)
        hide = np.isin(tensor.coords[:, axis], chosen)
    train, test = tensor.select(~hide), tensor.select(hide)
    if train.nnz == 0 or test.nnz == 0:
        raise DegenerateSplit(f"split leaves {train.nnz} train and {test.nnz} test entries")
    return train, test


def auc(scores, labels) -> float:
    """Area under the ROC curve via midranks (Mann-Whitney U), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-d and of equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_bruteforce(scores, labels) -> float:
    """O(n^2) pairwise AUC; reference for :func:`auc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    p, n = scores[labels == 1], scores[labels == 0]
    if len(p) == 0 or len(n) == 0:
        raise SingleClass("AUC needs at least one positive and one negative label")
    diff = p[:, None] - n[None, :]
    return (float(np.sum(diff > 0)) + 0.5 * float(np.sum(diff == 0))) / (len(p) * len(n))


def rmse(predicted: SparseTensor, truth: SparseTensor) -> float:
    if not predicted.same_support(truth):
        raise SupportMismatch("prediction and truth must share the same support")
    if truth.nnz == 0:
        raise EmptyTensor("RMSE of an empty support is undefined")
    return float(np.sqrt(np.mean((predicted.values - truth.values) ** 2)))


@dataclass
class LinkPredictionReport:
    auc: float
    rmse: float
    objective_trace: list
    iterations: int
    wall_time: float
    algorithm: str
    termination: str
    scores: np.ndarray = field(repr=False, default=None)


def link_prediction_eval(spec: ModelSpec, config: SolverConfig, priors, train: Mapping[str, SparseTensor],
                         test: SparseTensor, target: str | None = None, init=None) -> LinkPredictionReport:
    """Fit on the training supports and score the held-out cells of ``target``.

    Side observations in ``train`` are used as given. Cells with a positive
    held-out value are the positives, observed zeros the negatives.
    """
    target = target or spec.observations[0].name
    result = fit(spec, train, config, priors, init=init)
    pred = predict(spec, result, target, test)
    labels = (test.values > 0).astype(int)
    return LinkPredictionReport(
        auc=auc(pred.values, labels),
        rmse=rmse(pred, test),
        objective_trace=list(result.objective_trace),
        iterations=result.iterations_run,
        wall_time=float(np.sum(result.wall_time)),
        algorithm=result.algorithm,
        termination=result.termination.value,
        scores=pred.values,
    )


def report_row(report: LinkPredictionReport, model: str, hide_fraction: float, seed) -> dict:
    return {
        "algorithm": report.algorithm, "model": model, "hide_fraction": hide_fraction,
        "seed": seed, "AUC": report.auc, "RMSE": report.rmse,
        "iterations": report.iterations, "wall_time": report.wall_time,
    }


def summary_row(rows) -> dict:
    """Mean and sample standard deviation over repeats, formatted ``mean ± std``."""
    out = {"algorithm": rows[0]["algorithm"], "model": rows[0]["model"],
           "hide_fraction": rows[0]["hide_fraction"], "seed": "summary"}
    for col in ("AUC", "RMSE", "iterations", "wall_time"):
        v = np.array([float(r[col]) for r in rows])
        sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out[col] = f"{v.mean():.4f} ± {sd:.4f}"
    return out


def write_report(path, rows, summary=True):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
        if summary and rows:
            w.writerow(summary_row(rows))
