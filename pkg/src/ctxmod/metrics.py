"""Tuning-curve evaluation: Pearson correlation, top-k peak attainment, SEM.

Peak attainment asks how many of the k strongest predictions reach the
k-th strongest real response.  "Joint" ordering takes the predictions at the
images with the k largest real responses; "separate" ordering takes the k
largest predictions regardless of which images they belong to, so it is
never stricter than the joint version.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MetricError, ShapeError

METRIC_NAMES = ("CORR", "PT_J", "PT_S")


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"real and predicted responses differ in length: {y.size} vs {y_hat.size}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
        raise MetricError("responses contain non-finite values")
    return y, y_hat


def pearson(y, y_hat) -> float:
    """Pearson correlation; raises :class:`MetricError` for constant input."""
    y, y_hat = _pair(y, y_hat)
    if y.size < 2:
        raise MetricError("pearson needs at least two responses")
    dy = y - y.mean()
    dp = y_hat - y_hat.mean()
    syy = float(dy @ dy)
    spp = float(dp @ dp)
    if syy == 0.0 or spp == 0.0:
        raise MetricError("pearson is undefined for a constant series")
    r = float(dp @ dy) / math.sqrt(spp * syy)
    return max(-1.0, min(1.0, r))


def _check_k(k: int, n: int) -> int:
    k = int(k)
    if not 1 <= k <= n:
        raise MetricError(f"k must satisfy 1 <= k <= N={n}, got {k}")
    return k


def _desc_order(a: np.ndarray) -> np.ndarray:
    # stable descending: equal values keep their original relative order
    return np.argsort(-a, kind="stable")


def lambda_jro(y, y_hat, k: int) -> float:
    y, y_hat = _pair(y, y_hat)
    k = _check_k(k, y.size)
    order = _desc_order(y)
    threshold = y[order[k - 1]]
    return float(np.count_nonzero(y_hat[order[:k]] >= threshold)) / k


def lambda_sro(y, y_hat, k: int) -> float:
    y, y_hat = _pair(y, y_hat)
    k = _check_k(k, y.size)
    threshold = np.sort(y)[::-1][k - 1]
    top_pred = np.sort(y_hat)[::-1][:k]
    return float(np.count_nonzero(top_pred >= threshold)) / k


def default_k(n: int) -> int:
    """Top 1% of ``n`` responses, at least one."""
    return max(1, int(round(n / 100)))


def peak_tuning(y, y_hat, k: int | None = None) -> tuple[float, float]:
    """(PT_J, PT_S) in percent."""
    y, y_hat = _pair(y, y_hat)
    k = default_k(y.size) if k is None else k
    return 100.0 * lambda_jro(y, y_hat, k), 100.0 * lambda_sro(y, y_hat, k)


def population_aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std, n-1) across neurons."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise MetricError("population aggregate needs at least two neurons")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def rank_order_curves(y, y_hat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Real responses sorted descending, predictions in that order, predictions sorted."""
    y, y_hat = _pair(y, y_hat)
    order = _desc_order(y)
    return y[order], y_hat[order], np.sort(y_hat)[::-1]


def population_rank_curves(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rank each neuron's curves first, then average per image rank."""
    curves = [rank_order_curves(y, p) for y, p in pairs]
    if not curves:
        raise MetricError("no neurons to average")
    n = {c[0].size for c in curves}
    if len(n) != 1:
        raise ShapeError("neurons have different numbers of validation responses")
    return tuple(np.mean([c[i] for c in curves], axis=0) for i in range(3))  # type: ignore[return-value]


@dataclass
class NeuronMetrics:
    neuron: int
    corr: float
    pt_j: float
    pt_s: float
    lambdas: dict[str, float] = field(default_factory=dict)


def evaluate_neuron(neuron: int, y, y_hat, ks: Sequence[int] = (), k: int | None = None) -> NeuronMetrics:
    y, y_hat = _pair(y, y_hat)
    k = default_k(y.size) if k is None else k
    try:
        corr = pearson(y, y_hat)
    except MetricError:
        corr = float("nan")
    pt_j, pt_s = peak_tuning(y, y_hat, k)
    lambdas = {}
    for kk in sorted(set(ks) | {k}):
        lambdas[f"JRO@{kk}"] = lambda_jro(y, y_hat, kk)
        lambdas[f"SRO@{kk}"] = lambda_sro(y, y_hat, kk)
    return NeuronMetrics(neuron, corr, pt_j, pt_s, lambdas)


@dataclass
class MetricsReport:
    """Per-neuron metrics for one model plus population mean and SEM.

    A constant prediction makes the correlation undefined; such neurons carry
    ``NaN`` for CORR. and are listed in ``undefined``; the population CORR.
    statistics are over the remaining neurons.
    """

    model: str
    n: int
    k: int
    neurons: list[NeuronMetrics]

    @property
    def undefined(self) -> list[int]:
        return [m.neuron for m in self.neurons if math.isnan(m.corr)]

    def values(self, metric: str) -> np.ndarray:
        attr = {"CORR": "corr", "PT_J": "pt_j", "PT_S": "pt_s"}.get(metric)
        if attr is not None:
            return np.array([getattr(m, attr) for m in self.neurons])
        return np.array([m.lambdas[metric] for m in self.neurons])

    def summary(self, metric: str) -> tuple[float, float]:
        v = self.values(metric)
        v = v[~np.isnan(v)]
        if v.size == 1:
            return float(v[0]), float("nan")
        if v.size == 0:
            return float("nan"), float("nan")
        return population_aggregate(v)

    def metric_names(self) -> list[str]:
        extra = sorted(self.neurons[0].lambdas) if self.neurons else []
        return list(METRIC_NAMES) + extra

    def to_dict(self) -> dict:
        out = {"model": self.model, "N": self.n, "k": self.k, "neurons": [m.neuron for m in self.neurons],
               "undefined_corr": self.undefined, "metrics": {}}
        for name in self.metric_names():
            mean_, sem = self.summary(name)
            out["metrics"][name] = {
                "per_neuron": [None if math.isnan(x) else float(x) for x in self.values(name)],
                "mean": None if math.isnan(mean_) else mean_,
                "sem": None if math.isnan(sem) else sem,
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.metric_names()
        w.writerow(["model", "neuron"] + names)
        for i, m in enumerate(self.neurons):
            w.writerow([self.model, m.neuron] + [_fmt(self.values(n)[i]) for n in names])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else repr(float(x))


def build_report(model: str, responses: Mapping[int, tuple[np.ndarray, np.ndarray]], k: int | None = None,
                 ks: Sequence[int] = ()) -> MetricsReport:
    """``responses`` maps neuron index to (real, predicted) validation series."""
    if not responses:
        raise MetricError("no neurons to evaluate")
    n = {np.asarray(y).size for y, _ in responses.values()}
    if len(n) != 1:
        raise ShapeError("all neurons must share the validation set size")
    (n_val,) = n
    k = default_k(n_val) if k is None else k
    rows = [evaluate_neuron(i, y, p, ks, k) for i, (y, p) in sorted(responses.items())]
    return MetricsReport(model, n_val, k, rows)


def comparison_table(reports: Sequence[MetricsReport], baseline: int = 0) -> list[dict]:
    """Rows of mean/SEM per model with the percent change against ``reports[baseline]``."""
    base = {m: reports[baseline].summary(m)[0] for m in METRIC_NAMES}
    rows = []
    for r in reports:
        row = {"model": r.model}
        for m in METRIC_NAMES:
            mean_, sem = r.summary(m)
            row[m] = mean_
            row[f"{m}_SEM"] = sem
            b = base[m]
            row[f"delta_{m}_pct"] = float("nan") if not b else 100.0 * (mean_ - b) / abs(b)
        rows.append(row)
    return rows
