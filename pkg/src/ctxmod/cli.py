"""Command-line entry point: ``ctxmod <subcommand> ...``.

Every subcommand writes plain CSV/JSON plus a ``manifest.json`` into its
output directory.  Data files are byte-reproducible from the manifest; only
the manifest's wall-clock fields change between reruns.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure, 5 incomplete results (``report`` found a missing stage).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .analysis import (attention_matrices, attention_overlay, decomposition_curves, empirical_rf,
                       hypercolumn_heatmap, sa_block_index)
from .errors import ConfigError, CtxModError, DataError, MetricError, NumericError, ShapeError
from .experiment import ExperimentConfig, run_experiment
from .metrics import MetricsReport, build_report, comparison_table, population_rank_curves
from .synth import SynthConfig, generate_dataset, load_dataset
from .training import STAGES, TrainConfig, default_jobs, incremental_pipeline, job_seed, run_jobs, stage_slug, train
from .zoo import Model, build, load, resolve_model, save, spec_to_text

log = logging.getLogger("ctxmod")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INCOMPLETE = 0, 2, 3, 4, 5

# Table-style ordering for consolidated reports; anything else follows alphabetically.
REPORT_ORDER = ("ff-CNN(Simul.)", "ff+sa-CNN(Simul.)", "rf-CNN(Simul.)", "rf+sa-CNN(Simul.)",
                "rf+sa-CNN*(Simul.)", STAGES[1], "ff+sa-CNN*(Simul.)", STAGES[2], STAGES[3])
EXPECTED_INCREMENTAL = ("rf+sa-CNN*(Simul.)", STAGES[1], "ff+sa-CNN*(Simul.)", STAGES[2], STAGES[3])
MISSING = "MISSING"


class Incomplete(CtxModError):
    pass


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------
def _out_dir(path: str | Path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {p}: {e}") from None
    return p


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _clean(obj: Any) -> Any:
    """JSON-safe copy: tuples become lists, NaN becomes null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) or math.isinf(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def _write_csv(path: Path, header: Sequence[str], rows, comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _fmt(v: Any) -> Any:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return v.item()
    return v


def write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: list[str], started: float) -> None:
    cfg = _clean(config)
    run_id = hashlib.sha256(json.dumps([command, cfg], sort_keys=True).encode()).hexdigest()[:16]
    doc: dict[str, Any] = {}
    existing = out / "manifest.json"
    if existing.is_file():
        # a dataset's own generation record is folded in so the directory keeps one manifest
        prior = json.loads(existing.read_text())
        if "run_id" not in prior:
            doc["generation"] = prior
    _write_json(existing, {
        **doc,
        "run_id": run_id,
        "subcommand": command,
        "config": cfg,
        "seeds": {k: v for k, v in cfg.items() if "seed" in k},
        "inputs": inputs,
        "outputs": sorted(outputs),
        "tool_version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(timespec="seconds"),
        "wall_clock_seconds": round(time.time() - started, 3),
    })


def _neurons(arg: str, n: int) -> list[int]:
    if arg == "all":
        return list(range(n))
    try:
        idx = [int(x) for x in arg.split(",")]
    except ValueError:
        raise ConfigError(f"--neuron must be 'all' or comma-separated indices, got {arg!r}") from None
    bad = [i for i in idx if not 0 <= i < n]
    if bad:
        raise ConfigError(f"neuron indices {bad} out of range (dataset has {n})")
    return idx


def _train_config(a: argparse.Namespace, seed: int | None = None) -> TrainConfig:
    return TrainConfig(lr=a.lr, batch_size=a.batch, max_epochs=a.epochs, patience=a.patience,
                       seed=a.seed if seed is None else seed, fraction=getattr(a, "fraction", 1.0),
                       standardize=not a.no_standardize)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------
def cmd_synth(a: argparse.Namespace) -> tuple[dict, list[str]]:
    out = Path(a.out)
    if out.exists() and any(out.iterdir()):
        raise DataError(f"{out} exists and is not empty; refusing to overwrite a dataset")
    cfg = SynthConfig(surround_fraction=a.surround_fraction)
    generate_dataset(a.train, a.val, a.neurons, a.seed, out, image_dir=a.image_dir, config=cfg)
    return {"image_dir": a.image_dir}, sorted(p.name for p in out.iterdir())


def _train_job(data: str, model: str, neuron: int, cfg: dict, out: str) -> tuple[dict, list[float]]:
    ds = load_dataset(data, verify=False)
    spec = resolve_model(model)
    tcfg = TrainConfig(**cfg)
    net = build(spec, seed=tcfg.seed)
    net, report = train(net, ds, neuron, tcfg, stage=f"{spec.name}(Simul.)")
    path = Path(out) / f"neuron{neuron:03d}.ckpt"
    save(net, path)
    report.checkpoint = path.name
    return report.to_dict(), net.predict(ds.images_val).astype(np.float64).tolist()


def cmd_train(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    spec = resolve_model(a.model)
    neurons = _neurons(a.neuron, ds.n_neurons)
    out = _out_dir(a.out)
    (out / "reports").mkdir(exist_ok=True)
    jobs = []
    for i in neurons:
        cfg = asdict(_train_config(a, job_seed(a.seed, i)))
        jobs.append((str(a.data), a.model, i, cfg, str(out)))
    results = run_jobs(_train_job, jobs, a.jobs)
    pairs = {}
    for i, (rep, pred) in zip(neurons, results):
        _write_json(out / "reports" / f"neuron{i:03d}.json", rep)
        pairs[i] = (ds.targets(i, "val"), np.asarray(pred))
    report = build_report(f"{spec.name}(Simul.)", pairs, k=a.k)
    _emit_reports(out, [report])
    (out / "model.spec").write_text(spec_to_text(spec))
    return {"data": str(a.data)}, _listing(out)


def cmd_train_incremental(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    neurons = _neurons(a.neuron, ds.n_neurons)
    out = _out_dir(a.out)
    jobs = [(str(a.data), i, asdict(_train_config(a, job_seed(a.seed, i))), str(out), a.channels) for i in neurons]
    results = run_jobs(_incremental_job, jobs, a.jobs)
    per_stage: dict[str, dict[int, tuple]] = {s: {} for s in STAGES}
    audit = []
    for i, stages in zip(neurons, results):
        for stage, (rep, pred) in stages.items():
            per_stage[stage][i] = (ds.targets(i, "val"), np.asarray(pred))
            audit.append(f"neuron {i} {stage}: loaded {', '.join(rep['loaded']) or '-'}; "
                         f"frozen {len(rep['frozen'])} tensors")
    reports = [build_report(s, per_stage[s], k=a.k) for s in STAGES]
    _emit_reports(out, reports)
    (out / "frozen_audit.log").write_text("\n".join(audit) + "\n")
    return {"data": str(a.data)}, _listing(out)


def _incremental_job(data: str, neuron: int, cfg: dict, out: str, channels: int) -> dict:
    ds = load_dataset(data, verify=False)
    ndir = Path(out) / f"neuron{neuron:03d}"
    ndir.mkdir(parents=True, exist_ok=True)
    res = incremental_pipeline(ds, neuron, TrainConfig(**cfg), ndir, channels=channels)
    out_d = {}
    for stage, (model, rep) in res.items():
        rep.checkpoint = f"{ndir.name}/{Path(rep.checkpoint).name}"
        _write_json(ndir / f"{stage_slug(stage)}.json", rep.to_dict())
        out_d[stage] = (rep.to_dict(), model.predict(ds.images_val).astype(np.float64).tolist())
    return out_d


def _emit_reports(out: Path, reports: list[MetricsReport]) -> None:
    _write_json(out / "metrics.json", {"reports": [r.to_dict() for r in reports]})
    (out / "metrics.csv").write_text("".join(r.to_csv() if j == 0 else r.to_csv().split("\n", 1)[1]
                                             for j, r in enumerate(reports)))
    rows = comparison_table(reports)
    header = list(rows[0])
    _write_csv(out / "comparison.csv", header, [[r[h] for h in header] for r in rows])


def _listing(out: Path) -> list[str]:
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")


def _checkpoint_group(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.rglob("*.ckpt"))
        if not files:
            raise DataError(f"no checkpoints under {path}")
        return files
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return [path]


def _label(model: Model) -> str:
    stage = model.provenance.get("stage")
    return str(stage) if stage else model.spec.name


def _neuron_of(model: Model, path: Path) -> int:
    n = model.provenance.get("neuron")
    if n is None:
        raise DataError(f"{path} carries no neuron index in its provenance")
    return int(n)


def cmd_eval(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    out = _out_dir(a.out)
    reports = []
    curves_rows = []
    for group in a.checkpoints:
        files = _checkpoint_group(Path(group))
        by_label: dict[str, dict[int, tuple]] = {}
        for f in files:
            m = load(f)
            i = _neuron_of(m, f)
            by_label.setdefault(_label(m), {})[i] = (ds.targets(i, "val", a.clean), m.predict(ds.images_val))
        for label in sorted(by_label):
            reports.append(build_report(label, by_label[label], k=a.k))
            real, jro, sro = population_rank_curves(by_label[label].values())
            curves_rows += [(label, r + 1, real[r], jro[r], sro[r]) for r in range(len(real))]
    _emit_reports(out, reports)
    _write_csv(out / "tuning_curves.csv", ["model", "rank", "real", "pred_jro", "pred_sro"], curves_rows)
    return {"data": str(a.data), "checkpoints": list(a.checkpoints)}, _listing(out)


def _load_one(path: str) -> Model:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    return load(p)


def cmd_decompose(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    model = _load_one(a.checkpoint)
    out = _out_dir(a.out)
    cur = decomposition_curves(model, ds.images_val)
    _write_csv(out / "decomposition.csv", ["rank", "center", "surround", "prediction"],
               [(r + 1, cur.center[r], cur.surround[r], cur.prediction[r]) for r in range(len(cur.prediction))])
    files = ["decomposition.csv"]
    summary = {"model": _label(model), "bias": float(model.readout.params["bias"].data[0])}
    if model.readout.mode == "fcl":
        hm = hypercolumn_heatmap(model, ds.images_val)
        ci, cj = hm.center_index
        h, w = hm.grid.shape
        _write_csv(out / "heatmap.csv", ["row", "col", "value", "is_center"],
                   [(r, c, hm.grid[r, c], int((r, c) == (ci, cj))) for r in range(h) for c in range(w)],
                   comment="raw mean |contribution| per hypercolumn; contrast normalization is left to plotting")
        summary["dominance_ratio"] = hm.dominance_ratio
    else:
        summary["note"] = "CTL readout: center-only decomposition, surround is identically zero"
    _write_json(out / "summary.json", summary)
    return {"data": str(a.data), "checkpoint": str(a.checkpoint)}, _listing(out)


def cmd_attention(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    model = _load_one(a.checkpoint)
    sa_block_index(model)
    out = _out_dir(a.out)
    if a.image is None:
        # strongest real response of the checkpoint's neuron, else image 0
        n = model.provenance.get("neuron")
        idx = int(np.argmax(ds.targets(int(n), "val"))) if n is not None else 0
    else:
        idx = a.image
    if not 0 <= idx < ds.n_val:
        raise ConfigError(f"--image {idx} outside the validation split (0..{ds.n_val - 1})")
    try:
        query = None if a.query is None else tuple(int(v) for v in a.query.split(","))
    except ValueError:
        raise ConfigError(f"--query must be row,col; got {a.query!r}") from None
    if query is not None and len(query) != 2:
        raise ConfigError(f"--query must be row,col; got {a.query!r}")
    ov = attention_overlay(model, ds.images_val[idx], query)
    h, w = ov.grid.shape
    _write_csv(out / "attention_row.csv", ["token", "row", "col", "weight"],
               [(r * w + c, r, c, ov.grid[r, c]) for r in range(h) for c in range(w)])
    H, W = ov.overlay.shape
    _write_csv(out / "overlay.csv", ["row", "col", "weight"],
               [(r, c, ov.overlay[r, c]) for r in range(H) for c in range(W)])
    top = np.argsort(-ds.targets(int(model.provenance.get("neuron", 0)), "val"), kind="stable")[:a.top]
    q = ov.query[0] * w + ov.query[1]
    ents = [float(-(p[p > 0] * np.log(p[p > 0])).sum()) for p in attention_matrices(model, ds.images_val[top])[:, q]]
    _write_json(out / "summary.json", {"model": _label(model), "image": idx, "query": list(ov.query),
                                       "entropy": ov.entropy, "mean_entropy_top_images": float(np.mean(ents)),
                                       "top_images": [int(t) for t in top]})
    return {"data": str(a.data), "checkpoint": str(a.checkpoint)}, _listing(out)


def cmd_rf(a: argparse.Namespace) -> tuple[dict, list[str]]:
    ds = load_dataset(a.data)
    model = _load_one(a.checkpoint)
    out = _out_dir(a.out)
    rf = empirical_rf(model, ds.images_val[:a.probes])
    H, W = rf.mask.shape
    _write_csv(out / "rf_mask.csv", ["row", "col", "in_support"],
               [(r, c, int(rf.mask[r, c])) for r in range(H) for c in range(W)])
    _write_json(out / "summary.json", {"model": _label(model), "bbox": rf.bbox, "size": rf.size,
                                       "pixels": int(rf.mask.sum()), "probes": min(a.probes, ds.n_val)})
    return {"data": str(a.data), "checkpoint": str(a.checkpoint)}, _listing(out)


def collect_reports(run_dir: Path) -> dict[str, dict]:
    found: dict[str, dict] = {}
    for f in sorted(run_dir.rglob("metrics.json")):
        try:
            doc = json.loads(f.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"unreadable report {f}: {e}") from None
        for r in doc.get("reports", []):
            if r["model"] in found:
                log.warning("duplicate report for %s in %s ignored", r["model"], f)
                continue
            found[r["model"]] = r
    return found


def cmd_report(a: argparse.Namespace) -> tuple[dict, list[str]]:
    run_dir = Path(a.run_dir)
    if not run_dir.is_dir():
        raise DataError(f"{run_dir} is not a directory")
    found = collect_reports(run_dir)
    if not found:
        raise DataError(f"no metrics.json files under {run_dir}")
    order = [m for m in REPORT_ORDER if m in found or m in EXPECTED_INCREMENTAL]
    order += sorted(m for m in found if m not in order)
    rows, missing = [], []
    for m in order:
        if m not in found:
            missing.append(m)
            rows.append([m] + [MISSING] * 6)
            continue
        met = found[m]["metrics"]
        rows.append([m] + [met[k][s] if met[k][s] is not None else float("nan")
                           for k in ("CORR", "PT_J", "PT_S") for s in ("mean", "sem")])
    out = _out_dir(a.out or run_dir)
    _write_csv(out / "report.csv", ["model", "CORR", "CORR_SEM", "PT_J", "PT_J_SEM", "PT_S", "PT_S_SEM"], rows)
    for r in rows:
        cells = [f"{r[0]:<24}"] + [f"{v:>10}" if isinstance(v, str) else f"{v:>10.4f}" for v in r[1:]]
        print(" ".join(cells))
    if missing:
        raise Incomplete(f"missing results for: {', '.join(missing)}")
    return {"run_dir": str(run_dir)}, ["report.csv"]


def cmd_experiment(a: argparse.Namespace) -> tuple[dict, list[str]]:
    out = _out_dir(a.out)
    cfg = ExperimentConfig(n_neurons=a.neurons, n_train=a.train, n_val=a.val, seeds=tuple(a.seeds),
                           max_epochs=a.epochs, patience=a.patience, batch_size=a.batch, lr=a.lr,
                           fractions=tuple(a.fractions), surround_fraction=a.surround_fraction, jobs=a.jobs)
    res = run_experiment(cfg, out)
    (out / "rows.csv").write_text(res.to_csv())
    table = res.summary_table()
    _write_csv(out / "summary.csv", list(table[0]), [list(r.values()) for r in table])
    checks = res.checks()
    _write_json(out / "checks.json", {k: {"pass": ok, "detail": d} for k, (ok, d) in checks.items()})
    for k, (ok, d) in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {k}: {d}")
    return {}, ["rows.csv", "summary.csv", "checks.json"]


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------
def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50, help="max epochs")
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5, help="early-stop patience in epochs")
    p.add_argument("--no-standardize", action="store_true", help="feed raw [0,1] pixels")
    p.add_argument("--k", type=int, default=None, help="top-k for peak tuning (default: 1%% of N)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxmod", description="Self-attention models of single visual neurons.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--jobs", type=int, default=None, help="worker processes (default: $CTXMOD_JOBS or 1)")
    ap.add_argument("--config", default=None, help="JSON file whose keys override command-line flags")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic-neuron dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--neurons", type=int, default=20)
    p.add_argument("--train", type=int, default=8000)
    p.add_argument("--val", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--surround-fraction", type=float, default=0.7)
    p.add_argument("--image-dir", default=None, help="use images from this directory instead of procedural ones")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model per neuron (all blocks learned)")
    _training_flags(p)
    p.add_argument("--model", required=True, help="preset name or spec file")
    p.add_argument("--neuron", default="all", help="index, comma list or 'all'")
    p.add_argument("--fraction", type=float, default=1.0, help="fraction of the training split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-incremental", help="four-stage freeze-and-train pipeline")
    _training_flags(p)
    p.add_argument("--neuron", default="all")
    p.add_argument("--channels", type=int, default=30)
    p.set_defaults(func=cmd_train_incremental)

    p = sub.add_parser("eval", help="metrics for one or more checkpoint groups")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True, help="checkpoint files or directories")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--clean", action="store_true", help="score against noise-free responses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func, help_ in (("decompose", cmd_decompose, "center/surround decomposition curves"),
                              ("attention", cmd_attention, "center-query attention row and overlay"),
                              ("rf", cmd_rf, "empirical receptive field")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        if name == "attention":
            p.add_argument("--image", type=int, default=None, help="validation image (default: top response)")
            p.add_argument("--query", default=None, help="token as row,col (default: center)")
            p.add_argument("--top", type=int, default=10, help="top-response images for mean entropy")
        if name == "rf":
            p.add_argument("--probes", type=int, default=64)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="consolidated comparison table for a run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("experiment", help="synthetic end-to-end directional experiment")
    p.add_argument("--out", required=True)
    p.add_argument("--neurons", type=int, default=20)
    p.add_argument("--train", type=int, default=8000)
    p.add_argument("--val", type=int, default=1000)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.25, 1.0])
    p.add_argument("--surround-fraction", type=float, default=0.7)
    p.set_defaults(func=cmd_experiment)
    return ap


def _apply_config_file(a: argparse.Namespace) -> None:
    if a.config is None:
        return
    try:
        overrides = json.loads(Path(a.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {a.config}: {e}") from None
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    for k, v in overrides.items():
        key = k.replace("-", "_")
        if not hasattr(a, key) or key in ("func", "command", "config"):
            raise ConfigError(f"unknown option {k!r} in config file")
        setattr(a, key, v)


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        _apply_config_file(a)
        if a.jobs is None:
            a.jobs = default_jobs()
        inputs, outputs = a.func(a)
        config = {k: v for k, v in vars(a).items() if k not in ("func", "verbose")}
        out = getattr(a, "out", None) or getattr(a, "run_dir", None)
        write_manifest(Path(out), a.command, config, inputs, outputs, started)
    except Incomplete as e:
        print(f"ctxmod: {e}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (ConfigError, ShapeError) as e:
        print(f"ctxmod: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"ctxmod: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, MetricError) as e:
        print(f"ctxmod: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
