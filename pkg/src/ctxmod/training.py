"""Per-neuron training with MSE + Adam and the staged freeze-and-train pipeline."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import MetricError, MetricsReport, build_report, pearson
from .optim import Adam
from .synth import Dataset, standardization
from .tensor import Tensor, backward, check_finite, mse_loss, no_grad
from .zoo import Model, ModelSpec, build, preset, save

log = logging.getLogger(__name__)

JOBS_ENV = "CTXMOD_JOBS"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    fraction: float = 1.0
    loss: str = "mse"
    standardize: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and patience >= 1 are required")
        if self.loss != "mse":
            raise ConfigError(f"unsupported loss {self.loss!r}")


@dataclass
class StageReport:
    stage: str
    model: str
    neuron: int
    epochs_run: int
    best_epoch: int
    final_train_loss: float
    val_corr: float
    n_train: int
    checkpoint: str | None = None
    loaded: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    history: list[dict[str, float]] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# FreezeScheme selectors: block kinds whose parameters are loaded and frozen.
FREEZE_SCHEMES: dict[str, tuple[str, ...]] = {
    "incr": ("alpha",),
    "incr_fc1": ("alpha", "sa", "beta"),  # plus the FCL center hypercolumn, via a mask
    "incr_fc2": ("alpha", "sa", "beta"),
}


def job_seed(base_seed: int, neuron: int) -> int:
    return int(base_seed) ^ int(neuron)


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _safe_corr(y: np.ndarray, p: np.ndarray) -> float:
    try:
        return pearson(y, p)
    except MetricError:
        return float("nan")


def frozen_prefix(model: Model) -> int:
    """Number of leading blocks with every parameter frozen and unmasked."""
    n = 0
    for i, b in enumerate(model.blocks):
        names = [f"{i}.{b.kind}.{k}" for k in b.params]
        if any(p.requires_grad for p in b.params.values()) or any(nm in model.masks for nm in names):
            break
        n += 1
    return min(n, len(model.blocks) - 1)


def _run_prefix(model: Model, images: np.ndarray, stop: int, batch: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch):
            x = model.forward(images[s:s + batch].astype(model.dtype, copy=False), stop=stop)
            out.append(x.data)
    return np.concatenate(out)


def _predict_from(model: Model, acts: np.ndarray, start: int, batch: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(acts), batch):
            out.append(model.forward(Tensor(acts[s:s + batch]), start=start).data)
    return np.concatenate(out)


def prepare_model_inputs(model: Model, dataset: Dataset, standardize: bool = True) -> None:
    """Attach the dataset-level input standardisation to ``model``."""
    if standardize:
        mu, sd = standardization(dataset.images_train)
    else:
        mu, sd = 0.0, 1.0
    model.input_norm = (mu, sd)


def train(model: Model, dataset: Dataset, neuron: int, config: TrainConfig | None = None,
          stage: str = "train", subset: np.ndarray | None = None) -> tuple[Model, StageReport]:
    """Fit the unfrozen parameters of ``model`` to one neuron.

    Runs mini-batch Adam on MSE, evaluates validation correlation once per
    epoch and returns the model restored to its best-correlation epoch.
    Frozen parameters (and masked-out elements) are never written.
    """
    cfg = config or TrainConfig()
    if dataset.n_train == 0 or dataset.n_val == 0:
        raise DataError("dataset needs non-empty train and validation splits")
    idx = dataset.subset_indices(cfg.fraction, cfg.seed) if subset is None else np.asarray(subset)
    if idx.size == 0:
        raise DataError("training subset is empty")
    y_train = dataset.targets(neuron, "train")[idx].astype(np.float32)
    y_val = dataset.targets(neuron, "val").astype(np.float32)
    if getattr(model, "input_norm", None) is None:
        prepare_model_inputs(model, dataset, cfg.standardize)

    params = model.named_parameters()
    learnable = {k: p for k, p in params.items() if p.requires_grad}
    frozen = sorted(k for k, p in params.items() if not p.requires_grad)
    start = frozen_prefix(model)
    t0 = time.perf_counter()
    x_train = _run_prefix(model, dataset.images_train[idx], start) if start else dataset.images_train[idx]
    x_val = _run_prefix(model, dataset.images_val, start) if start else dataset.images_val

    def val_predictions() -> np.ndarray:
        if start:
            return _predict_from(model, x_val, start)
        return model.predict(x_val)

    history: list[dict[str, float]] = []
    best_corr = _safe_corr(y_val, val_predictions())
    best_state = model.state_dict()
    best_epoch = 0
    history.append({"epoch": 0, "train_loss": float("nan"), "val_loss": float(np.mean((val_predictions() - y_val) ** 2)),
                    "val_corr": best_corr})
    last_loss = float("nan")
    epochs_run = 0
    if learnable and cfg.max_epochs > 0:
        opt = Adam(learnable, lr=cfg.lr, masks={k: m for k, m in model.masks.items() if k in learnable})
        rng = np.random.default_rng([cfg.seed, neuron, 0x7A1])
        stale = 0
        for epoch in range(1, cfg.max_epochs + 1):
            perm = rng.permutation(len(idx))
            total, count = 0.0, 0
            for s in range(0, len(perm), cfg.batch_size):
                bi = perm[s:s + cfg.batch_size]
                xb = Tensor(x_train[bi].astype(model.dtype, copy=False))
                pred = model.forward(xb, start=start)
                loss = mse_loss(pred, y_train[bi])
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise NumericError(f"{stage}: non-finite loss at epoch {epoch}, batch {s // cfg.batch_size}")
                opt.zero_grad()
                backward(loss)
                for k, p in learnable.items():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                    check_finite(p.grad, f"{stage}: gradient of {k} at epoch {epoch}")
                opt.step()
                total += lv * len(bi)
                count += len(bi)
            last_loss = total / count
            epochs_run = epoch
            preds = val_predictions()
            corr = _safe_corr(y_val, preds)
            history.append({"epoch": epoch, "train_loss": last_loss,
                            "val_loss": float(np.mean((preds - y_val) ** 2)), "val_corr": corr})
            log.debug("%s neuron %d epoch %d loss %.5f val corr %.4f", stage, neuron, epoch, last_loss, corr)
            if np.isfinite(corr) and (not np.isfinite(best_corr) or corr > best_corr):
                best_corr, best_state, best_epoch, stale = corr, model.state_dict(), epoch, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        model.load_state(best_state)
    report = StageReport(
        stage=stage, model=model.spec.name, neuron=int(neuron), epochs_run=epochs_run, best_epoch=best_epoch,
        final_train_loss=last_loss, val_corr=best_corr, n_train=int(len(idx)), frozen=frozen,
        history=history, config=asdict(cfg),
    )
    model.provenance.update({"stage": stage, "neuron": int(neuron), "seed": cfg.seed, "epochs": epochs_run,
                             "best_epoch": best_epoch, "input_norm": list(model.input_norm)})
    log.info("%s neuron %d: %d epochs, best %d, val corr %.4f, %.1fs", stage, neuron, epochs_run, best_epoch,
             best_corr, time.perf_counter() - t0)
    return model, report


# --------------------------------------------------------------------------
# evaluation helpers
# --------------------------------------------------------------------------
def predict_val(model: Model, dataset: Dataset) -> np.ndarray:
    return model.predict(dataset.images_val)


def evaluate(models: dict[int, Model], dataset: Dataset, name: str, clean: bool = False,
             k: int | None = None) -> MetricsReport:
    pairs = {i: (dataset.targets(i, "val", clean), predict_val(m, dataset)) for i, m in models.items()}
    return build_report(name, pairs, k=k)


# --------------------------------------------------------------------------
# incremental pipeline
# --------------------------------------------------------------------------
STAGES = ("rf-CNN", "rf+sa-CNN*(Incr.)", "ff+sa-CNN*(Incr.FC1)", "ff+sa-CNN*(Incr.FC2)")


def stage_slug(stage: str) -> str:
    return (stage.replace("*", "star").replace("(", "_").replace(")", "").replace(".", "").replace("+", "-")
            .replace("__", "_"))


def _names(model: Model, kinds: Iterable[str]) -> list[str]:
    kinds = set(kinds)
    return [k for k in model.named_parameters() if k.split(".")[1] in kinds]


def transfer(src: Model, dst: Model, kinds: Sequence[str]) -> list[str]:
    """Copy and freeze all parameters of the listed block kinds, matched by order."""
    src_blocks = [b for b in src.blocks if b.kind in kinds]
    dst_blocks = [b for b in dst.blocks if b.kind in kinds]
    if [b.kind for b in src_blocks] != [b.kind for b in dst_blocks]:
        raise ShapeError(f"block sequences differ between {src.spec.name} and {dst.spec.name}")
    moved = []
    for sb, db in zip(src_blocks, dst_blocks):
        if set(sb.params) != set(db.params):
            raise ShapeError(f"{sb.label()} -> {db.label()}: parameter sets differ")
        di = dst.blocks.index(db)
        for pname, p in sb.params.items():
            if db.params[pname].shape != p.shape:
                raise ShapeError(
                    f"cannot load {sb.label()}.{pname} {p.shape} into {dst.spec.name} {db.params[pname].shape} "
                    "(channel mismatch between stages)")
            db.params[pname].data = p.data.copy()
            db.params[pname].requires_grad = False
            moved.append(f"{di}.{db.kind}.{pname}")
    return moved


def _stage_seed(seed: int, stage: int) -> int:
    return int(np.random.default_rng([seed, stage]).integers(0, 2**31 - 1))


def incremental_pipeline(dataset: Dataset, neuron: int, config: TrainConfig | None = None,
                         out_dir: str | Path | None = None, channels: int = 30,
                         callback: Callable[[str, Model], None] | None = None) -> dict[str, tuple[Model, StageReport]]:
    """rf-CNN -> rf+sa-CNN*(Incr.) -> ff+sa-CNN*(Incr.FC1) and (Incr.FC2).

    All stages share ``channels`` so convolution weights can be handed on.
    Stage 3a starts from the stage-2 function: its FCL center hypercolumn
    holds the CTL weights (frozen) and every surround weight starts at zero.
    Stage 3b receives only the alpha, SA and beta blocks and learns a freshly
    initialised FCL.
    """
    cfg = config or TrainConfig()
    out = {}

    def finish(stage: str, model: Model, loaded: list[str], report_fn) -> None:
        if callback is not None:
            callback(stage + ":init", model)
        model, report = report_fn()
        report.loaded = loaded
        if out_dir is not None:
            path = Path(out_dir) / f"{stage_slug(stage)}.ckpt"
            save(model, path)
            report.checkpoint = str(path)
        out[stage] = (model, report)

    rf = build(preset("rf-CNN", channels), seed=_stage_seed(cfg.seed, 1))
    prepare_model_inputs(rf, dataset, cfg.standardize)
    finish(STAGES[0], rf, [], lambda: train(rf, dataset, neuron, cfg, STAGES[0]))
    rf = out[STAGES[0]][0]

    sa = build(preset("rf+sa-CNN*", channels), seed=_stage_seed(cfg.seed, 2))
    sa.input_norm = rf.input_norm
    loaded = transfer(rf, sa, ["alpha"])
    finish(STAGES[1], sa, loaded, lambda: train(sa, dataset, neuron, cfg, STAGES[1]))
    sa = out[STAGES[1]][0]

    fc1 = build(preset("ff+sa-CNN*", channels), seed=_stage_seed(cfg.seed, 3))
    fc1.input_norm = sa.input_norm
    loaded = transfer(sa, fc1, ["alpha", "sa", "beta"])
    loaded += load_ctl_into_fcl(sa, fc1)
    finish(STAGES[2], fc1, loaded, lambda: train(fc1, dataset, neuron, cfg, STAGES[2]))

    fc2 = build(preset("ff+sa-CNN*", channels), seed=_stage_seed(cfg.seed, 4))
    fc2.input_norm = sa.input_norm
    loaded = transfer(sa, fc2, ["alpha", "sa", "beta"])
    finish(STAGES[3], fc2, loaded, lambda: train(fc2, dataset, neuron, cfg, STAGES[3]))
    return out


def load_ctl_into_fcl(src: Model, dst: Model) -> list[str]:
    """FCL := CTL on the center hypercolumn, zero elsewhere; center weights frozen by mask."""
    ctl, fcl = src.readout, dst.readout
    if ctl.mode != "ctl" or fcl.mode != "fcl":
        raise ConfigError("expected a CTL source and an FCL destination")
    c, h, w = fcl.in_shape
    if ctl.in_shape != fcl.in_shape:
        raise ShapeError(f"CTL input {ctl.in_shape} and FCL input {fcl.in_shape} differ")
    grid = np.zeros((c, h, w), dtype=fcl.params["weight"].dtype)
    ci, cj = fcl.center
    grid[:, ci, cj] = ctl.params["weight"].data[0]
    fcl.params["weight"].data = grid.reshape(1, -1)
    fcl.params["bias"].data = ctl.params["bias"].data.copy()
    wname = f"{len(dst.blocks) - 1}.readout.weight"
    dst.masks[wname] = ~fcl.center_mask()
    return [wname + "[center]", f"{len(dst.blocks) - 1}.readout.bias(init)"]


def simultaneous(spec_name: str | ModelSpec, dataset: Dataset, neuron: int, config: TrainConfig | None = None,
                 channels: int | None = None) -> tuple[Model, StageReport]:
    """Train every block at once (the Simul. counterpart of a staged model)."""
    cfg = config or TrainConfig()
    spec = preset(spec_name, channels) if isinstance(spec_name, str) else spec_name
    model = build(spec, seed=_stage_seed(cfg.seed, 0))
    prepare_model_inputs(model, dataset, cfg.standardize)
    return train(model, dataset, neuron, cfg, f"{spec.name}(Simul.)")


def data_fraction_run(spec_names: Sequence[str], dataset: Dataset, fractions: Sequence[float] = (0.25, 0.5, 1.0),
                      config: TrainConfig | None = None, neurons: Sequence[int] | None = None,
                      clean: bool = False) -> dict[float, dict[str, MetricsReport]]:
    """Train each spec on seeded subsets of the training split; validation is untouched."""
    cfg = config or TrainConfig()
    neurons = list(range(dataset.n_neurons)) if neurons is None else list(neurons)
    out: dict[float, dict[str, MetricsReport]] = {}
    for frac in fractions:
        fcfg = replace(cfg, fraction=frac)
        out[frac] = {}
        for name in spec_names:
            models = {}
            for i in neurons:
                m, _ = simultaneous(name, dataset, i, replace(fcfg, seed=job_seed(cfg.seed, i)))
                models[i] = m
            out[frac][name] = evaluate(models, dataset, name, clean=clean)
    return out


# --------------------------------------------------------------------------
# worker pool
# --------------------------------------------------------------------------
def run_jobs(fn: Callable[..., Any], args: Sequence[tuple], jobs: int | None = None) -> list[Any]:
    """Run ``fn(*a)`` for each entry; results come back in submission order."""
    jobs = default_jobs() if jobs is None else jobs
    if jobs <= 1 or len(args) <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]
