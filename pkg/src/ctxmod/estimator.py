"""scikit-learn style wrappers around the per-neuron trainer.

One estimator fits one neuron: ``X`` is a stack of 50x50 images, ``y`` the
neuron's responses.  ``score`` returns the Pearson correlation (the quantity
used everywhere else in the package) rather than R^2.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigError, DataError, ShapeError
from .metrics import pearson
from .synth import Dataset
from .tensor import no_grad
from .training import STAGES, TrainConfig, incremental_pipeline, train
from .zoo import INPUT_SHAPE, PRESET_NAMES, Model, build, preset


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to an ``N x 1 x 50 x 50`` float32 array, rejecting anything else."""
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise DataError(f"{name} must be numeric, got dtype {arr.dtype}")
    c, h, w = INPUT_SHAPE
    if arr.ndim == 2 and arr.shape[1] == c * h * w:
        arr = arr.reshape(-1, c, h, w)
    elif arr.ndim == 3 and arr.shape[1:] == (h, w):
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"{name} must have shape (N, {c}, {h}, {w}), (N, {h}, {w}) or (N, {c * h * w}); got {arr.shape}")
    if len(arr) == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr.astype(np.float32, copy=False)


def check_targets(y, n: int, name: str = "y") -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be one response per image, got shape {arr.shape}")
    if len(arr) != n:
        raise ShapeError(f"{name} has {len(arr)} responses for {n} images")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr.astype(np.float32)


def _split(X, y, X_val, y_val, validation_fraction: float, seed: int) -> Dataset:
    X = check_images(X)
    y = check_targets(y, len(X))
    if X_val is None:
        if y_val is not None:
            raise ConfigError("y_val given without X_val")
        if not 0.0 < validation_fraction < 1.0:
            raise ConfigError("validation_fraction must lie in (0, 1)")
        n_val = max(2, int(round(validation_fraction * len(X))))
        if len(X) - n_val < 1:
            raise DataError(f"{len(X)} images are too few to hold out a validation split")
        perm = np.random.default_rng([seed, 0x5A1]).permutation(len(X))
        va, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        X, X_val, y, y_val = X[tr], X[va], y[tr], y[va]
    else:
        X_val = check_images(X_val, "X_val")
        y_val = check_targets(y_val, len(X_val), "y_val")
    return Dataset(X, X_val, y[:, None], y_val[:, None], seed=seed)


class NeuronRegressor(RegressorMixin, BaseEstimator):
    """Fit one model preset to one neuron.

    Without ``X_val`` a seeded ``validation_fraction`` of the training images
    is held out for early stopping.
    """

    def __init__(self, model: str = "ff+sa-CNN", channels: int | None = None, lr: float = 1e-3,
                 batch_size: int = 128, max_epochs: int = 50, patience: int = 5, seed: int = 0,
                 fraction: float = 1.0, standardize: bool = True, validation_fraction: float = 0.1):
        self.model = model
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.fraction = fraction
        self.standardize = standardize
        self.validation_fraction = validation_fraction

    def _config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed, fraction=self.fraction,
                           standardize=self.standardize)

    def fit(self, X, y, X_val=None, y_val=None):
        if self.model not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {self.model!r}; choose from {', '.join(PRESET_NAMES)}")
        cfg = self._config()
        ds = _split(X, y, X_val, y_val, self.validation_fraction, self.seed)
        net = build(preset(self.model, self.channels), seed=self.seed)
        self.model_, self.report_ = train(net, ds, 0, cfg, stage=f"{self.model}(Simul.)")
        self.n_features_in_ = int(np.prod(INPUT_SHAPE))
        return self

    def _net(self) -> Model:
        check_is_fitted(self, "model_")
        return self.model_

    def predict(self, X) -> np.ndarray:
        return self._net().predict(check_images(X)).astype(np.float64)

    def transform(self, X) -> np.ndarray:
        """Flattened hypercolumn activations that feed the readout."""
        net = self._net()
        X = check_images(X)
        if len(net.blocks) < 2:
            return X.reshape(len(X), -1).astype(np.float64)
        out = []
        with no_grad():
            for s in range(0, len(X), 256):
                a = net.forward(X[s:s + 256], stop=len(net.blocks) - 1)
                out.append(a.data.reshape(len(a.data), -1))
        return np.concatenate(out).astype(np.float64)

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ConfigError("sample weights are not supported")
        X = check_images(X)
        return pearson(check_targets(y, len(X)), self.predict(X))


class IncrementalRegressor(NeuronRegressor):
    """Run the four-stage freeze-and-train pipeline; predict with ``stage``."""

    def __init__(self, stage: str = STAGES[3], channels: int = 30, lr: float = 1e-3, batch_size: int = 128,
                 max_epochs: int = 50, patience: int = 5, seed: int = 0, fraction: float = 1.0,
                 standardize: bool = True, validation_fraction: float = 0.1):
        self.stage = stage
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.fraction = fraction
        self.standardize = standardize
        self.validation_fraction = validation_fraction

    def fit(self, X, y, X_val=None, y_val=None):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {', '.join(STAGES)}")
        ds = _split(X, y, X_val, y_val, self.validation_fraction, self.seed)
        self.stages_ = incremental_pipeline(ds, 0, self._config(), channels=self.channels)
        self.model_, self.report_ = self.stages_[self.stage]
        self.n_features_in_ = int(np.prod(INPUT_SHAPE))
        return self
