"""Read-only interpretability tools for trained models.

* FCL decomposition into per-hypercolumn contributions (center vs surround)
* rank-ordered decomposition curves and hypercolumn heatmaps
* attention rows for a query hypercolumn, upsampled onto the image grid
* empirical receptive fields from exact-zero input-gradient support
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import SelfAttention
from .errors import ConfigError, ShapeError
from .metrics import MetricError
from .tensor import Tensor, backward, no_grad
from .zoo import Model, as_image_batch


@dataclass
class DecompositionResult:
    grid: np.ndarray  # h x w contribution of each hypercolumn
    bias: float
    center: float
    surround: float
    prediction: float
    center_index: tuple[int, int]

    @property
    def total(self) -> float:
        return self.center + self.surround + self.bias


def _readout_input(model: Model, images: np.ndarray) -> np.ndarray:
    taps: dict = {}
    with no_grad():
        model.forward(images.astype(model.dtype, copy=False), taps)
    last = len(model.blocks) - 2
    if last < 0:
        x = images.astype(np.float64)
        if model.input_norm is not None:
            x = (x - model.input_norm[0]) / model.input_norm[1]
        return x
    return taps[f"block{last}"]


def decompose_batch(model: Model, images: np.ndarray, batch: int = 256) -> tuple[np.ndarray, float, np.ndarray]:
    """Per-hypercolumn contributions ``N x h x w``, the bias, and predictions."""
    images = as_image_batch(images)
    ro = model.readout
    c, h, w = ro.in_shape
    bias = float(ro.params["bias"].data[0])
    grids, preds = [], []
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        acts = _readout_input(model, chunk).astype(np.float64)
        if ro.mode == "fcl":
            wgrid = ro.weight_grid().astype(np.float64)
            g = np.einsum("nchw,chw->nhw", acts, wgrid)
        else:
            ci, cj = ro.center
            g = np.zeros((len(chunk), h, w))
            g[:, ci, cj] = acts[:, :, ci, cj] @ ro.weight_grid().astype(np.float64)
        grids.append(g)
        preds.append(model.predict(chunk).astype(np.float64))
    return np.concatenate(grids), bias, np.concatenate(preds)


def fcl_decompose(model: Model, image: np.ndarray) -> DecompositionResult:
    """Split one prediction into center, surround and bias.

    For a CTL readout everything is center (surround is exactly 0).
    """
    image = np.asarray(image)
    if image.shape != tuple(model.spec.input_shape):
        raise ShapeError(f"expected one {model.spec.input_shape} image, got {image.shape}")
    grids, bias, preds = decompose_batch(model, image[None])
    ci, cj = model.readout.center
    g = grids[0]
    center = float(g[ci, cj])
    return DecompositionResult(g, bias, center, float(g.sum() - center), float(preds[0]), (ci, cj))


@dataclass
class DecompositionCurves:
    center: np.ndarray
    surround: np.ndarray
    prediction: np.ndarray


def decomposition_curves(model: Model, images: np.ndarray) -> DecompositionCurves:
    """Center/surround/prediction ordered by predicted response, descending."""
    grids, bias, preds = decompose_batch(model, images)
    ci, cj = model.readout.center
    center = grids[:, ci, cj]
    surround = grids.reshape(len(grids), -1).sum(axis=1) - center
    order = np.argsort(-preds, kind="stable")
    return DecompositionCurves(center[order], surround[order], preds[order])


def population_decomposition_curves(curves: list[DecompositionCurves]) -> DecompositionCurves:
    """Average per-neuron curves image-rank by image-rank (each already ranked)."""
    if not curves:
        raise MetricError("no curves to average")
    return DecompositionCurves(*(np.mean([getattr(c, f) for c in curves], axis=0)
                                 for f in ("center", "surround", "prediction")))


@dataclass
class Heatmap:
    grid: np.ndarray  # mean |contribution| per hypercolumn
    center_index: tuple[int, int]

    @property
    def dominance_ratio(self) -> float:
        """Center value divided by the mean surround value."""
        ci, cj = self.center_index
        mask = np.ones_like(self.grid, dtype=bool)
        mask[ci, cj] = False
        sur = float(self.grid[mask].mean()) if mask.any() else 0.0
        return float("inf") if sur == 0.0 else float(self.grid[ci, cj]) / sur


def hypercolumn_heatmap(model: Model, images: np.ndarray) -> Heatmap:
    if model.readout.mode != "fcl":
        raise ConfigError("hypercolumn heatmaps need an FCL readout")
    grids, _, _ = decompose_batch(model, images)
    return Heatmap(np.abs(grids).mean(axis=0), model.readout.center)


# --------------------------------------------------------------------------
# attention
# --------------------------------------------------------------------------
@dataclass
class AttentionOverlay:
    query: tuple[int, int]
    row: np.ndarray  # h*w attention weights of the query token
    grid: np.ndarray  # h x w
    overlay: np.ndarray  # H x W pixel weights, sums to 1

    @property
    def entropy(self) -> float:
        return attention_entropy(self.row)


def attention_entropy(row: np.ndarray) -> float:
    p = np.asarray(row, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def sa_block_index(model: Model) -> int:
    idx = [i for i, b in enumerate(model.blocks) if isinstance(b, SelfAttention)]
    if not idx:
        raise ConfigError(f"{model.spec.name} has no self-attention block")
    return idx[0]


def attention_matrices(model: Model, images: np.ndarray) -> np.ndarray:
    """``N x hw x hw`` attention matrices exactly as used in the forward pass."""
    i = sa_block_index(model)
    taps: dict = {}
    with no_grad():
        model.forward(as_image_batch(images).astype(model.dtype, copy=False), taps)
    return taps[f"block{i}.attention"]


def token_cells(h: int, w: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/col token index for every pixel (nearest-neighbour cell fill)."""
    rows = np.minimum((np.arange(height) * h) // height, h - 1)
    cols = np.minimum((np.arange(width) * w) // width, w - 1)
    return rows, cols


def upsample_tokens(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Spread each token's weight evenly over its pixel cell; total mass is kept."""
    h, w = grid.shape
    rows, cols = token_cells(h, w, height, width)
    counts_r = np.bincount(rows, minlength=h)
    counts_c = np.bincount(cols, minlength=w)
    per_pixel = grid / np.outer(counts_r, counts_c)
    return per_pixel[np.ix_(rows, cols)]


def attention_overlay(model: Model, image: np.ndarray, query: tuple[int, int] | None = None) -> AttentionOverlay:
    image = np.asarray(image)
    if image.shape != tuple(model.spec.input_shape):
        raise ShapeError(f"expected one {model.spec.input_shape} image, got {image.shape}")
    i = sa_block_index(model)
    attn = attention_matrices(model, image[None])[0]
    # token grid = spatial shape entering the SA block
    taps: dict = {}
    with no_grad():
        model.forward(image[None].astype(model.dtype), taps, stop=i)
    _, _, h, w = taps[f"block{i - 1}"].shape if i > 0 else (1,) + image.shape
    query = query if query is not None else (h // 2, w // 2)
    if not (0 <= query[0] < h and 0 <= query[1] < w):
        raise ConfigError(f"query {tuple(query)} outside the {h}x{w} token grid")
    q = query[0] * w + query[1]
    row = attn[q].astype(np.float64)
    grid = row.reshape(h, w)
    return AttentionOverlay(tuple(query), row, grid, upsample_tokens(grid, image.shape[1], image.shape[2]))


# --------------------------------------------------------------------------
# receptive fields
# --------------------------------------------------------------------------
@dataclass
class RFMask:
    mask: np.ndarray

    @property
    def bbox(self) -> tuple[int, int, int, int] | None:
        """(row_min, row_max, col_min, col_max), inclusive."""
        if not self.mask.any():
            return None
        r = np.flatnonzero(self.mask.any(axis=1))
        c = np.flatnonzero(self.mask.any(axis=0))
        return int(r[0]), int(r[-1]), int(c[0]), int(c[-1])

    @property
    def size(self) -> tuple[int, int]:
        b = self.bbox
        return (0, 0) if b is None else (b[1] - b[0] + 1, b[3] - b[2] + 1)


def input_gradients(model: Model, images: np.ndarray) -> np.ndarray:
    """d(prediction)/d(pixel) for each image (images are independent in a batch)."""
    x = Tensor(as_image_batch(images).astype(model.dtype), requires_grad=True)
    saved = {k: p.requires_grad for k, p in model.named_parameters().items()}
    try:
        for p in model.named_parameters().values():
            p.requires_grad = False
        y = model.forward(x)
        backward(y.sum())
    finally:
        for k, p in model.named_parameters().items():
            p.requires_grad = saved[k]
            p.grad = None
    return x.grad


def empirical_rf(model: Model, probes: np.ndarray, batch: int = 64) -> RFMask:
    """Union over probes of pixels with a non-zero prediction gradient."""
    probes = as_image_batch(probes)
    mask = np.zeros(probes.shape[-2:], dtype=bool)
    for s in range(0, len(probes), batch):
        g = input_gradients(model, probes[s:s + batch])
        mask |= (g != 0).any(axis=(0, 1))
    return RFMask(mask)


def structural_support(model: Model) -> np.ndarray:
    """Pixels that can reach the readout through valid convs and floor pooling.

    Computed by interval arithmetic on the block chain, independent of the
    parameter values.
    """
    from .blocks import AlphaCPB, BetaCPB

    _, H, W = model.spec.input_shape

    def back(lo: int, hi: int, block) -> tuple[int, int]:
        if isinstance(block, AlphaCPB):
            return 2 * lo, 2 * hi + 1 + 4  # pool rows 2lo..2hi+1, then conv adds k-1
        if isinstance(block, BetaCPB):
            return lo, hi + block.k - 1
        return lo, hi

    ro = model.readout
    c, h, w = ro.in_shape
    rows = (0, h - 1)
    cols = (0, w - 1)
    if ro.mode == "ctl":
        ci, cj = ro.center
        rows, cols = (ci, ci), (cj, cj)
    for b in reversed(model.blocks[:-1]):
        if isinstance(b, SelfAttention):
            full_h, full_w = _shape_before(model, b)
            rows, cols = (0, full_h - 1), (0, full_w - 1)
            continue
        rows = back(*rows, b)
        cols = back(*cols, b)
    mask = np.zeros((H, W), dtype=bool)
    mask[rows[0]:rows[1] + 1, cols[0]:cols[1] + 1] = True
    return mask


def _shape_before(model: Model, block) -> tuple[int, int]:
    from .zoo import check_chain

    shapes = check_chain(model.spec)
    i = model.blocks.index(block)
    return shapes[i][1], shapes[i][2]
