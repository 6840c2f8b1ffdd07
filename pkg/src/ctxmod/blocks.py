"""Differentiable building blocks: alpha/beta conv blocks, self-attention, readouts.

All blocks consume and produce batched ``B x C x H x W`` tensors, except the
readouts which return one prediction per batch element.
"""
from __future__ import annotations

import math
from typing import Any

import numpy as np

from .errors import ShapeError
from .tensor import (
    ACTIVATIONS,
    Tensor,
    channel_norm,
    conv2d_valid,
    linear,
    matmul,
    maxpool2d,
    reshape,
    scaled_attention_logits,
    softmax_rows,
    transpose,
)

QKV_DIM = 5


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def center_index(h: int, w: int) -> tuple[int, int]:
    return h // 2, w // 2


class Block:
    kind = "block"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def out_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        raise NotImplementedError

    def forward(self, x: Tensor, taps: dict[str, Any] | None = None, prefix: str = "") -> Tensor:
        raise NotImplementedError

    def param_breakdown(self) -> dict[str, int]:
        return {self.label(): sum(p.size for p in self.params.values())}

    def label(self) -> str:
        return self.kind

    def astype(self, dtype) -> None:
        for name, p in self.params.items():
            p.data = p.data.astype(dtype)


class AlphaCPB(Block):
    """5x5 valid conv -> activation -> 2x2/2 max pool."""

    kind = "alpha"
    kernel = 5

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, activation: str = "relu",
                 dtype=np.float32):
        super().__init__()
        fan_in = c_in * self.kernel * self.kernel
        self.activation = activation
        self.params["weight"] = Tensor(_uniform(rng, (c_out, c_in, 5, 5), fan_in, dtype), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.params["weight"].shape[1]:
            raise ShapeError(f"alpha block expects {self.params['weight'].shape[1]} channels, got {c}")
        if h < 6 or w < 6:
            raise ShapeError(f"alpha block needs spatial size >= 6, got {h}x{w}")
        return self.params["weight"].shape[0], (h - 4) // 2, (w - 4) // 2

    def forward(self, x, taps=None, prefix=""):
        y = conv2d_valid(x, self.params["weight"], self.params["bias"])
        return maxpool2d(ACTIVATIONS[self.activation](y), 2, 2)

    def label(self):
        return "alpha(5)"


class BetaCPB(Block):
    """k x k valid conv -> activation, no pooling."""

    kind = "beta"

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, activation: str = "relu",
                 dtype=np.float32):
        super().__init__()
        if k not in (1, 3, 5):
            raise ShapeError(f"beta block kernel must be one of 1, 3, 5; got {k}")
        self.k = k
        self.activation = activation
        fan_in = c_in * k * k
        self.params["weight"] = Tensor(_uniform(rng, (c_out, c_in, k, k), fan_in, dtype), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (c_out,), fan_in, dtype), requires_grad=True)

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.params["weight"].shape[1]:
            raise ShapeError(f"beta block expects {self.params['weight'].shape[1]} channels, got {c}")
        if h < self.k or w < self.k:
            raise ShapeError(f"beta block with k={self.k} needs spatial size >= {self.k}, got {h}x{w}")
        return self.params["weight"].shape[0], h - self.k + 1, w - self.k + 1

    def forward(self, x, taps=None, prefix=""):
        y = conv2d_valid(x, self.params["weight"], self.params["bias"])
        return ACTIVATIONS[self.activation](y)

    def label(self):
        return f"beta({self.k})"


class SelfAttention(Block):
    """Single-head scaled dot-product attention over the h*w hypercolumns.

    With ``gamma=False`` there are no value/output maps: the attention matrix
    acts on the raw input, one shared spatial operator for every channel.
    Normalisation is per hypercolumn across channels with a learnable scale
    and shift; the residual path is off unless requested.
    """

    kind = "sa"

    def __init__(self, c: int, gamma: bool, rng: np.random.Generator, norm: str = "channel",
                 residual: bool = False, dim: int = QKV_DIM, dtype=np.float32):
        super().__init__()
        if c < 1:
            raise ShapeError("self-attention needs at least one channel")
        if norm not in ("channel", "none"):
            raise ShapeError(f"unknown normalisation {norm!r}")
        self.c, self.gamma, self.norm, self.residual, self.dim = c, bool(gamma), norm, bool(residual), dim
        p = self.params
        p["wq"] = Tensor(_uniform(rng, (dim, c), c, dtype), requires_grad=True)
        p["bq"] = Tensor(_uniform(rng, (dim,), c, dtype), requires_grad=True)
        p["wk"] = Tensor(_uniform(rng, (dim, c), c, dtype), requires_grad=True)
        p["bk"] = Tensor(_uniform(rng, (dim,), c, dtype), requires_grad=True)
        if self.gamma:
            p["wv"] = Tensor(_uniform(rng, (dim, c), c, dtype), requires_grad=True)
            p["bv"] = Tensor(_uniform(rng, (dim,), c, dtype), requires_grad=True)
            p["wo"] = Tensor(_uniform(rng, (c, dim), dim, dtype), requires_grad=True)
            p["bo"] = Tensor(_uniform(rng, (c,), dim, dtype), requires_grad=True)
        if norm == "channel":
            p["norm_scale"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            p["norm_shift"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def out_shape(self, in_shape):
        if in_shape[0] != self.c:
            raise ShapeError(f"self-attention expects {self.c} channels, got {in_shape[0]}")
        return in_shape

    def attention(self, tokens: Tensor) -> Tensor:
        p = self.params
        q = linear(tokens, p["wq"], p["bq"])
        k = linear(tokens, p["wk"], p["bk"])
        return softmax_rows(scaled_attention_logits(q, k))

    def forward(self, x, taps=None, prefix=""):
        B, c, h, w = x.shape
        tokens = transpose(reshape(x, (B, c, h * w)), (0, 2, 1))  # B x hw x c
        attn = self.attention(tokens)
        p = self.params
        if self.gamma:
            v = linear(tokens, p["wv"], p["bv"])
            z = linear(matmul(attn, v), p["wo"], p["bo"])
        else:
            z = matmul(attn, tokens)
        if taps is not None:
            taps[f"{prefix}attention"] = attn.data
            taps[f"{prefix}attended"] = z.data.transpose(0, 2, 1).reshape(B, c, h, w)
        if self.residual:
            z = z + tokens
        if self.norm == "channel":
            z = channel_norm(z, axis=-1) * p["norm_scale"] + p["norm_shift"]
        return reshape(transpose(z, (0, 2, 1)), (B, c, h, w))

    def param_breakdown(self):
        attn_keys = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")
        out = {self.label(): sum(self.params[k].size for k in attn_keys if k in self.params)}
        if self.norm == "channel":
            out[self.label() + ".norm"] = self.params["norm_scale"].size + self.params["norm_shift"].size
        return out

    def label(self):
        return f"SA({'T' if self.gamma else 'F'})"


class Readout(Block):
    """Linear readout: FCL over every activation, CTL over the center hypercolumn."""

    kind = "readout"

    def __init__(self, mode: str, in_shape: tuple[int, int, int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        mode = mode.lower()
        if mode not in ("fcl", "ctl"):
            raise ShapeError(f"readout must be 'fcl' or 'ctl', got {mode!r}")
        c, h, w = in_shape
        if mode == "ctl" and (h % 2 == 0 or w % 2 == 0):
            raise ShapeError(f"CTL readout needs odd spatial dims for a center hypercolumn, got {h}x{w}")
        self.mode = mode
        self.in_shape = (c, h, w)
        n = c * h * w if mode == "fcl" else c
        self.params["weight"] = Tensor(_uniform(rng, (1, n), n, dtype), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (1,), n, dtype), requires_grad=True)

    @property
    def center(self) -> tuple[int, int]:
        return center_index(self.in_shape[1], self.in_shape[2])

    def out_shape(self, in_shape):
        if tuple(in_shape) != self.in_shape:
            raise ShapeError(f"readout built for {self.in_shape}, got {tuple(in_shape)}")
        return ()

    def forward(self, x, taps=None, prefix=""):
        B = x.shape[0]
        if self.mode == "fcl":
            flat = reshape(x, (B, -1))
        else:
            ci, cj = self.center
            flat = x[:, :, ci, cj]
        y = linear(flat, self.params["weight"], self.params["bias"])
        return reshape(y, (B,))

    def weight_grid(self) -> np.ndarray:
        """FCL weights as ``c x h x w`` (CTL: ``c``)."""
        w = self.params["weight"].data[0]
        return w.reshape(self.in_shape) if self.mode == "fcl" else w

    def center_mask(self) -> np.ndarray:
        """Boolean mask over the weight tensor selecting center-hypercolumn weights."""
        if self.mode == "ctl":
            return np.ones_like(self.params["weight"].data, dtype=bool)
        c, h, w = self.in_shape
        grid = np.zeros((c, h, w), dtype=bool)
        ci, cj = self.center
        grid[:, ci, cj] = True
        return grid.reshape(1, -1)

    def label(self):
        return self.mode.upper()
