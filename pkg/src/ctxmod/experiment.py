"""Synthetic end-to-end experiment: train every model family on ground-truth neurons.

The harness generates one dataset per seed, trains the simultaneous models and
the incremental pipeline for every neuron, scores them against the noise-free
validation responses and evaluates the directional checks:

(a) every model reaches a mean CORR. of at least ``min_corr``
(b) PT_J(ff+sa-CNN) >= PT_J(ff-CNN)
(c) PT_J(rf+sa-CNN*(Incr.)) >= PT_J(rf+sa-CNN*(Simul.))
(d) on surround-gated neurons rf-CNN's PT_J is below the best FCL model's

plus the data-efficiency check that CORR. at the smallest fraction does not
exceed CORR. on the full training split.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import peak_tuning
from .synth import SynthConfig, generate_dataset, load_dataset
from .training import STAGES, TrainConfig, _safe_corr, incremental_pipeline, job_seed, run_jobs, simultaneous

log = logging.getLogger(__name__)

SIMUL_MODELS = ("ff-CNN", "ff+sa-CNN", "rf-CNN", "rf+sa-CNN", "rf+sa-CNN*")
FRACTION_MODELS = ("ff-CNN", "ff+sa-CNN")
FCL_MODELS = ("ff-CNN(Simul.)", "ff+sa-CNN(Simul.)", STAGES[2], STAGES[3])


@dataclass
class ExperimentConfig:
    n_neurons: int = 20
    n_train: int = 8000
    n_val: int = 1000
    seeds: tuple[int, ...] = (1, 2, 3)
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 128
    lr: float = 1e-3
    fractions: tuple[float, ...] = (0.25, 1.0)
    surround_fraction: float = 0.7
    min_corr: float = 0.5
    jobs: int | None = None


@dataclass
class Row:
    seed: int
    neuron: int
    model: str
    fraction: float
    gated: bool
    corr: float
    pt_j: float
    pt_s: float
    epochs: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[Row] = field(default_factory=list)

    def _select(self, model: str, fraction: float = 1.0, gated: bool | None = None) -> list[Row]:
        return [r for r in self.rows if r.model == model and r.fraction == fraction
                and (gated is None or r.gated == gated)]

    def mean(self, model: str, metric: str, fraction: float = 1.0, gated: bool | None = None) -> float:
        """Population mean over neurons, then over seeds."""
        rows = self._select(model, fraction, gated)
        per_seed = []
        for s in sorted({r.seed for r in rows}):
            v = np.array([getattr(r, metric) for r in rows if r.seed == s], dtype=np.float64)
            v = v[~np.isnan(v)]
            if v.size:
                per_seed.append(v.mean())
        return float(np.mean(per_seed)) if per_seed else float("nan")

    @property
    def models(self) -> list[str]:
        return sorted({r.model for r in self.rows if r.fraction == 1.0})

    def checks(self) -> dict[str, tuple[bool, str]]:
        m = self.mean
        out = {}
        corrs = {name: m(name, "corr") for name in self.models}
        worst = min(corrs, key=lambda k: corrs[k])
        out["a_all_models_corr"] = (all(v >= self.config.min_corr for v in corrs.values()),
                                    f"min CORR. {corrs[worst]:.3f} ({worst}) vs {self.config.min_corr}")
        a, b = m("ff+sa-CNN(Simul.)", "pt_j"), m("ff-CNN(Simul.)", "pt_j")
        out["b_sa_peak"] = (a >= b, f"PT_J ff+sa-CNN {a:.2f} vs ff-CNN {b:.2f}")
        a, b = m(STAGES[1], "pt_j"), m("rf+sa-CNN*(Simul.)", "pt_j")
        out["c_incr_vs_simul"] = (a >= b, f"PT_J Incr. {a:.2f} vs Simul. {b:.2f}")
        rf = m("rf-CNN(Simul.)", "pt_j", gated=True)
        best_name = max(FCL_MODELS, key=lambda k: m(k, "pt_j", gated=True))
        best = m(best_name, "pt_j", gated=True)
        out["d_surround_necessity"] = (rf < best, f"gated PT_J rf-CNN {rf:.2f} vs {best_name} {best:.2f}")
        fr = sorted(self.config.fractions)
        parts, ok = [], True
        for name in FRACTION_MODELS:
            lo, hi = m(f"{name}(Simul.)", "corr", fr[0]), m(f"{name}(Simul.)", "corr", fr[-1])
            ok &= lo <= hi
            parts.append(f"{name} {lo:.3f}@{fr[0]} vs {hi:.3f}@{fr[-1]}")
        out["data_efficiency"] = (ok, "; ".join(parts))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(Row.__dataclass_fields__)
        w.writerow(names)
        for r in sorted(self.rows, key=lambda r: (r.seed, r.neuron, r.model, r.fraction)):
            w.writerow([getattr(r, n) for n in names])
        return buf.getvalue()

    def summary_table(self) -> list[dict]:
        rows = []
        for name in self.models:
            rows.append({"model": name, "CORR": self.mean(name, "corr"), "PT_J": self.mean(name, "pt_j"),
                         "PT_S": self.mean(name, "pt_s"), "PT_J_gated": self.mean(name, "pt_j", gated=True)})
        return rows


def _score(seed: int, neuron: int, name: str, fraction: float, gated: bool, y: np.ndarray, p: np.ndarray,
           epochs: int) -> Row:
    pt_j, pt_s = peak_tuning(y, p)
    return Row(seed, neuron, name, fraction, gated, _safe_corr(y, p), pt_j, pt_s, epochs)


def neuron_job(data_dir: str, seed: int, neuron: int, cfg: dict) -> list[Row]:
    """All models for one (dataset, neuron).  Top-level so worker processes can pickle it."""
    cfg = ExperimentConfig(**cfg)
    ds = load_dataset(data_dir, verify=False)
    gated = float(ds.neurons[neuron].get("gain", 0.0)) != 0.0
    y = ds.targets(neuron, "val", clean=True)
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience,
                       seed=job_seed(seed, neuron))
    rows = []
    for name in SIMUL_MODELS:
        fractions = cfg.fractions if name in FRACTION_MODELS else (1.0,)
        for frac in fractions:
            model, rep = simultaneous(name, ds, neuron, replace(tcfg, fraction=frac))
            rows.append(_score(seed, neuron, f"{name}(Simul.)", frac, gated, y, model.predict(ds.images_val),
                               rep.epochs_run))
    for stage, (model, rep) in incremental_pipeline(ds, neuron, tcfg).items():
        if stage == STAGES[0]:
            stage = "rf-CNN(Incr.stage1)"
        rows.append(_score(seed, neuron, stage, 1.0, gated, y, model.predict(ds.images_val), rep.epochs_run))
    log.info("seed %d neuron %d done", seed, neuron)
    return rows


def run_experiment(cfg: ExperimentConfig, workdir: str | Path, neurons: Sequence[int] | None = None) -> ExperimentResult:
    workdir = Path(workdir)
    jobs = []
    for seed in cfg.seeds:
        data = workdir / f"data_seed{seed}"
        if not (data / "meta.txt").exists():
            generate_dataset(cfg.n_train, cfg.n_val, cfg.n_neurons, seed, data,
                             config=SynthConfig(surround_fraction=cfg.surround_fraction))
        for i in (range(cfg.n_neurons) if neurons is None else neurons):
            jobs.append((str(data), seed, i, asdict(cfg)))
    result = ExperimentResult(cfg)
    for rows in run_jobs(neuron_job, jobs, cfg.jobs):
        result.rows.extend(rows)
    return result
