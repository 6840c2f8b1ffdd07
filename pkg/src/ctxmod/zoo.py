"""Model specs, presets, construction, parameter counting and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .blocks import AlphaCPB, BetaCPB, Block, Readout, SelfAttention
from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, no_grad

INPUT_SHAPE = (1, 50, 50)
CHECKPOINT_MAGIC = b"CTXMCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # alpha | beta | sa | fcl | ctl
    k: int | None = None
    gamma: bool | None = None
    norm: str = "channel"
    residual: bool = False
    activation: str = "relu"

    def describe(self) -> str:
        if self.kind == "alpha":
            return "alpha"
        if self.kind == "beta":
            return f"beta(k={self.k})"
        if self.kind == "sa":
            return f"SA(gamma={'T' if self.gamma else 'F'})"
        return self.kind.upper()


@dataclass(frozen=True)
class ModelSpec:
    name: str
    channels: int
    blocks: tuple[BlockSpec, ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "channels": self.channels,
            "input_shape": list(self.input_shape),
            "blocks": [asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelSpec":
        return cls(
            name=d["name"],
            channels=int(d["channels"]),
            blocks=tuple(BlockSpec(**b) for b in d["blocks"]),
            input_shape=tuple(d.get("input_shape", INPUT_SHAPE)),
        )

    def describe(self) -> str:
        return " -> ".join(b.describe() for b in self.blocks)


_A = BlockSpec("alpha")
_B1 = BlockSpec("beta", k=1)
_B3 = BlockSpec("beta", k=3)
_SAT = BlockSpec("sa", gamma=True)
_SAF = BlockSpec("sa", gamma=False)
_FCL = BlockSpec("fcl")
_CTL = BlockSpec("ctl")

_PRESETS: dict[str, tuple[int, tuple[BlockSpec, ...]]] = {
    "ff-CNN": (32, (_A, _A, _B3, _B3, _FCL)),
    "ff+sa-CNN": (30, (_A, _A, _SAT, _B3, _B3, _FCL)),
    "rf-CNN": (32, (_A, _A, _B1, _B1, _CTL)),
    "rf+sa-CNN": (30, (_A, _A, _SAF, _B1, _B1, _CTL)),
    "rf+sa-CNN*": (30, (_A, _A, _SAT, _B1, _B1, _CTL)),
    "ff+sa-CNN*": (30, (_A, _A, _SAT, _B1, _B1, _FCL)),
    "rf+sa-CNN-c375": (375, (_A, _A, _SAF, _B1, _B1, _CTL)),
    "nobeta-sa": (30, (_A, _A, _SAT, _FCL)),
    "k1-FCL": (30, (_A, _A, _SAT, _B1, _B1, _FCL)),
    "k3-CTL": (30, (_A, _A, _SAT, _B3, _B3, _CTL)),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, channels: int | None = None) -> ModelSpec:
    try:
        c, blocks = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}") from None
    return ModelSpec(name=name, channels=channels or c, blocks=blocks)


def check_chain(spec: ModelSpec) -> list[tuple[int, int, int]]:
    """Validate the shape chain; returns the activation shape entering each block."""
    if not spec.blocks or spec.blocks[-1].kind not in ("fcl", "ctl"):
        raise ShapeError(f"{spec.name}: the last block must be a readout (fcl or ctl)")
    if sum(b.kind in ("fcl", "ctl") for b in spec.blocks) != 1:
        raise ShapeError(f"{spec.name}: exactly one readout block is allowed")
    shape = tuple(spec.input_shape)
    shapes = []
    for i, b in enumerate(spec.blocks):
        shapes.append(shape)
        c, h, w = shape
        where = f"{spec.name}: block {i} ({b.describe()}) on input {c}x{h}x{w}"
        if b.kind == "alpha":
            if h < 6 or w < 6:
                raise ShapeError(f"{where}: alpha block needs spatial size >= 6")
            shape = (spec.channels, (h - 4) // 2, (w - 4) // 2)
        elif b.kind == "beta":
            if b.k not in (1, 3, 5):
                raise ShapeError(f"{where}: beta kernel must be 1, 3 or 5")
            if h < b.k or w < b.k:
                raise ShapeError(f"{where}: spatial size smaller than kernel")
            shape = (spec.channels, h - b.k + 1, w - b.k + 1)
        elif b.kind == "sa":
            if b.gamma is None:
                raise ShapeError(f"{where}: self-attention needs gamma set")
        elif b.kind == "ctl":
            if h % 2 == 0 or w % 2 == 0:
                raise ShapeError(f"{where}: CTL needs odd spatial dims")
        elif b.kind != "fcl":
            raise ShapeError(f"{where}: unknown block kind {b.kind!r}")
    return shapes


class Model:
    """An instantiated linear chain of blocks with per-parameter freeze flags."""

    def __init__(self, spec: ModelSpec, blocks: list[Block]):
        self.spec = spec
        self.blocks = blocks
        self.masks: dict[str, np.ndarray] = {}
        self.provenance: dict[str, Any] = {}
        self.input_norm: tuple[float, float] | None = None  # (mean, std) applied to raw pixels

    # -- parameters -------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.blocks):
            for pname, p in b.params.items():
                out[f"{i}.{b.kind}.{pname}"] = p
        return out

    def frozen(self) -> dict[str, bool]:
        return {k: not p.requires_grad for k, p in self.named_parameters().items()}

    def freeze(self, names: Iterable[str]) -> None:
        params = self.named_parameters()
        for n in names:
            if n not in params:
                raise ConfigError(f"cannot freeze unknown parameter {n!r}")
            params[n].requires_grad = False

    def freeze_blocks(self, kinds: Iterable[str]) -> list[str]:
        kinds = set(kinds)
        names = [k for k in self.named_parameters() if k.split(".")[1] in kinds]
        self.freeze(names)
        return names

    def unfreeze_all(self) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = True
        self.masks = {}

    def astype(self, dtype) -> "Model":
        for b in self.blocks:
            b.astype(dtype)
        return self

    @property
    def readout(self) -> Readout:
        return self.blocks[-1]  # type: ignore[return-value]

    def block_index(self, kind: str) -> list[int]:
        return [i for i, b in enumerate(self.blocks) if b.kind == kind]

    # -- forward ----------------------------------------------------------
    def forward(self, x, taps: dict[str, Any] | None = None, start: int = 0, stop: int | None = None) -> Tensor:
        """Run blocks ``start:stop`` on a batch; the full chain returns ``(B,)``.

        ``taps``, if given, is filled with each block output (``block{i}``) and
        attention matrices (``block{i}.attention``) without touching the result.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if start == 0:
            if x.shape[1:] != tuple(self.spec.input_shape):
                raise ShapeError(f"expected input B x {self.spec.input_shape}, got {x.shape}")
            if not np.all(np.isfinite(x.data)):
                raise DataError("input image contains non-finite values")
            if self.input_norm is not None:
                mu, sd = self.input_norm
                x = (x - mu) * (1.0 / sd)
        for i in range(start, len(self.blocks) if stop is None else stop):
            x = self.blocks[i].forward(x, taps, prefix=f"block{i}.")
            if taps is not None:
                taps[f"block{i}"] = x.data
        return x

    __call__ = forward

    @property
    def dtype(self):
        return self.blocks[0].params["weight"].dtype if self.blocks[0].params else np.float32

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = as_image_batch(images)
        out = []
        with no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward(images[s:s + batch_size].astype(self.dtype, copy=False)).data)
        return np.concatenate(out) if out else np.zeros(0, dtype=self.dtype)

    def predict_one(self, image: np.ndarray, taps: dict[str, Any] | None = None) -> float:
        """Forward a single ``1 x 50 x 50`` image."""
        image = np.asarray(image)
        if image.shape != tuple(self.spec.input_shape):
            raise ShapeError(f"expected a {self.spec.input_shape} image, got {image.shape}")
        with no_grad():
            return float(self.forward(image[None].astype(self.dtype), taps).data[0])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], names: Iterable[str] | None = None) -> list[str]:
        params = self.named_parameters()
        loaded = []
        for k in (names if names is not None else state):
            if k not in params:
                raise ConfigError(f"unknown parameter {k!r}")
            if params[k].shape != state[k].shape:
                raise ShapeError(f"parameter {k!r}: shape {state[k].shape} does not fit {params[k].shape}")
            params[k].data = np.array(state[k], dtype=params[k].dtype, copy=True)
            loaded.append(k)
        return loaded


def as_image_batch(images) -> np.ndarray:
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None]
    return arr


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate ``spec`` with seeded fan-in-scaled uniform initialisation."""
    shapes = check_chain(spec)
    rng = np.random.default_rng(seed)
    blocks: list[Block] = []
    for b, (c_in, h, w) in zip(spec.blocks, shapes):
        if b.kind == "alpha":
            blocks.append(AlphaCPB(c_in, spec.channels, rng, b.activation, dtype))
        elif b.kind == "beta":
            blocks.append(BetaCPB(c_in, spec.channels, b.k, rng, b.activation, dtype))
        elif b.kind == "sa":
            blocks.append(SelfAttention(c_in, bool(b.gamma), rng, b.norm, b.residual, dtype=dtype))
        else:
            blocks.append(Readout(b.kind, (c_in, h, w), rng, dtype))
    return Model(spec, blocks)


def param_count(model: Model) -> tuple[int, list[tuple[str, int]]]:
    """Total learnable scalars plus an ordered per-block breakdown."""
    rows = []
    for i, b in enumerate(model.blocks):
        for label, n in b.param_breakdown().items():
            rows.append((f"{i}:{label}", n))
    return sum(n for _, n in rows), rows


def readout_shape(spec: ModelSpec) -> tuple[int, int, int]:
    return check_chain(spec)[-1]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
def _encode_body(model: Model) -> bytes:
    header = {
        "spec": model.spec.to_dict(),
        "frozen": model.frozen(),
        "masks": sorted(model.masks),
        "provenance": model.provenance,
        "input_norm": None if model.input_norm is None else [float(v) for v in model.input_norm],
    }
    buf = io.BytesIO()
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    tensors = list(model.named_parameters().items()) + [(f"mask:{k}", m) for k, m in sorted(model.masks.items())]
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        arr = t.data if isinstance(t, Tensor) else t
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save(model: Model, path: str | Path) -> Path:
    """Write a checksummed single-file checkpoint (little-endian float32)."""
    path = Path(path)
    body = _encode_body(model)
    digest = hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(digest)
        f.write(body)
    return path


def load(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < 44 or raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    digest, body = raw[12:44], raw[44:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checksum mismatch (corrupt or tampered checkpoint)")
    try:
        return _decode_body(body)
    except (struct.error, KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed checkpoint body: {exc}") from exc


def _decode_body(body: bytes) -> Model:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise ValueError("truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen))
    spec = ModelSpec.from_dict(header["spec"])
    model = build(spec, seed=0)
    (count,) = struct.unpack("<I", take(4))
    state, masks = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("mask:"):
            masks[name[5:]] = arr.astype(bool)
        else:
            state[name] = arr
    if set(state) != set(model.named_parameters()):
        raise ValueError("parameter names do not match the model spec")
    model.load_state(state)
    model.freeze([k for k, v in header["frozen"].items() if v])
    model.masks = masks
    model.provenance = header.get("provenance", {})
    norm = header.get("input_norm")
    model.input_norm = None if norm is None else (float(norm[0]), float(norm[1]))
    return model


# --------------------------------------------------------------------------
# human-editable spec files
# --------------------------------------------------------------------------
def parse_spec_text(text: str) -> ModelSpec:
    """Parse a key/value model description.

    ::

        name = my-model
        channels = 30
        block = alpha
        block = alpha
        block = sa gamma=false residual=false norm=channel
        block = beta k=1
        block = ctl
    """
    name, channels, preset_name = "custom", None, None
    blocks: list[BlockSpec] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "name":
            name = value
        elif key == "channels":
            channels = int(value)
        elif key == "preset":
            preset_name = value
        elif key == "block":
            parts = value.split()
            opts: dict[str, Any] = {}
            for kv in parts[1:]:
                if "=" not in kv:
                    raise ConfigError(f"line {lineno}: block option {kv!r} is not key=value")
                k, v = kv.split("=", 1)
                if k == "k":
                    opts["k"] = int(v)
                elif k in ("gamma", "residual"):
                    opts[k] = v.lower() in ("1", "true", "t", "yes")
                elif k in ("norm", "activation"):
                    opts[k] = v
                else:
                    raise ConfigError(f"line {lineno}: unknown block option {k!r}")
            blocks.append(BlockSpec(parts[0].lower(), **opts))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if preset_name is not None:
        base = preset(preset_name)
        spec = replace(base, channels=channels or base.channels)
        if blocks:
            spec = replace(spec, blocks=tuple(blocks))
        return replace(spec, name=name if name != "custom" else base.name)
    if channels is None:
        raise ConfigError("spec file needs 'channels'")
    spec = ModelSpec(name=name, channels=channels, blocks=tuple(blocks))
    check_chain(spec)
    return spec


def spec_to_text(spec: ModelSpec) -> str:
    lines = [f"name = {spec.name}", f"channels = {spec.channels}"]
    for b in spec.blocks:
        opts = []
        if b.kind == "beta":
            opts.append(f"k={b.k}")
        if b.kind == "sa":
            opts += [f"gamma={str(bool(b.gamma)).lower()}", f"norm={b.norm}", f"residual={str(b.residual).lower()}"]
        if b.kind in ("alpha", "beta") and b.activation != "relu":
            opts.append(f"activation={b.activation}")
        lines.append("block = " + " ".join([b.kind] + opts))
    return "\n".join(lines) + "\n"


def resolve_model(name_or_path: str) -> ModelSpec:
    """Preset name, or a path to a spec file."""
    if name_or_path in _PRESETS:
        return preset(name_or_path)
    p = Path(name_or_path)
    if p.is_file():
        return parse_spec_text(p.read_text())
    raise ConfigError(f"{name_or_path!r} is neither a preset nor a spec file")
