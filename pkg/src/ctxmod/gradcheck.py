"""Central finite-difference checks of tape gradients (float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    n_points: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    skip: Callable[[int, tuple[int, ...]], bool] | None = None,
) -> float:
    """Max elementwise relative error between tape and finite-difference grads.

    ``fn`` maps tensors (one per entry of ``inputs``) to a scalar tensor.  All
    inputs are promoted to float64.  With ``n_points`` set, that many random
    coordinates (across all inputs) are checked instead of every coordinate.
    ``skip(i, idx)`` may veto a coordinate, e.g. one that straddles a max-pool
    tie; vetoed coordinates are redrawn.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*leaves)
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss at the check point")
    backward(loss)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def f_at() -> float:
        with no_grad():
            val = float(fn(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(val):
            raise NumericError("grad_check: non-finite loss while differencing")
        return val

    coords: list[tuple[int, tuple[int, ...]]] = []
    total = sum(a.size for a in arrays)
    if n_points is None or n_points >= total:
        for i, a in enumerate(arrays):
            coords.extend((i, idx) for idx in np.ndindex(a.shape) if skip is None or not skip(i, idx))
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([a.size for a in arrays], dtype=float)
        tries = 0
        while len(coords) < n_points:
            tries += 1
            if tries > 50 * n_points:
                raise NumericError("grad_check: could not find enough admissible coordinates")
            i = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
            idx = tuple(int(rng.integers(0, n)) for n in arrays[i].shape)
            if (i, idx) in coords or (skip is not None and skip(i, idx)):
                continue
            coords.append((i, idx))

    worst = 0.0
    for i, idx in coords:
        orig = arrays[i][idx]
        arrays[i][idx] = orig + eps
        plus = f_at()
        arrays[i][idx] = orig - eps
        minus = f_at()
        arrays[i][idx] = orig
        numeric = (plus - minus) / (2 * eps)
        err = float(relative_error(np.array(analytic[i][idx]), np.array(numeric), floor))
        worst = max(worst, err)
    return worst
