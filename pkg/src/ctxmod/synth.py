"""Ground-truth synthetic neurons and the on-disk dataset container.

A synthetic neuron is a quadrature Gabor energy unit sitting near the image
center.  Its thresholded center energy is multiplied by ``1 + g * S`` where
``S`` is the saturating mean energy of the same Gabor channel over an annulus
outside the envelope, so neurons with ``g > 0`` are facilitated by
iso-oriented surround texture and the facilitation matters most when the
center is already driven.

Container layout (a directory)::

    meta.txt               key=value header: counts, shapes, seed, checksums
    images.f32             (n_train + n_val) x 1 x H x W, train rows first
    responses.f32          (n_train + n_val) x M, recorded (noisy) responses
    responses_clean.f32    optional, same shape, noise-free responses
    neurons.json           neuron parameters
    manifest.json          generation parameters

All arrays are little-endian row-major float32.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
IMAGE_SIZE = 50
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif")


@dataclass
class SynthConfig:
    image_size: int = IMAGE_SIZE
    px_per_deg: float = 15.0
    rf_deg_mean: float = 0.75  # envelope diameter (4 sigma)
    rf_deg_sd: float = 0.08
    sf_range: tuple[float, float] = (0.08, 0.2)  # cycles / pixel
    center: float = 23.5  # pixel coordinate of the center hypercolumn's support
    center_jitter: float = 1.0
    surround_fraction: float = 0.7
    gain_range: tuple[float, float] = (1.5, 4.0)
    annulus_gap: float = 1.0
    annulus_width: tuple[float, float] = (8.0, 14.0)
    noise_sd: float = 0.05  # in units of the neuron's peak response
    offset_range: tuple[float, float] = (0.0, 0.02)
    calibration_images: int = 4000
    sparsity_target: float = 0.005  # max fraction of images above half peak


@dataclass
class SyntheticNeuron:
    orientation: float
    sf: float
    phase: float
    sigma: float
    center_row: float
    center_col: float
    gain: float
    annulus_inner: float
    annulus_outer: float
    noise_sd: float
    scale: float = 1.0
    offset: float = 0.0
    threshold: float = 0.0
    surround_ref: float = 1.0

    @property
    def support_radius(self) -> float:
        return 2.0 * self.sigma

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Gabor machinery
# --------------------------------------------------------------------------
def gabor_pair(n: SyntheticNeuron, size: int = IMAGE_SIZE, centered: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Even/odd zero-mean Gabor kernels truncated to the envelope support.

    ``centered=True`` places them at the neuron's RF center on a ``size``
    grid; otherwise a small kernel centred on its own grid is returned (for
    sliding over an image).
    """
    if centered:
        rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
        dr, dc = rr - n.center_row, cc - n.center_col
    else:
        half = int(math.ceil(n.support_radius))
        rr, cc = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
        dr, dc = rr, cc
    inside = dr * dr + dc * dc <= n.support_radius ** 2
    env = np.exp(-(dr * dr + dc * dc) / (2 * n.sigma ** 2)) * inside
    proj = dc * math.cos(n.orientation) + dr * math.sin(n.orientation)
    phase = 2 * math.pi * n.sf * proj + n.phase
    even = env * np.cos(phase)
    odd = env * np.sin(phase)
    for k in (even, odd):
        k[inside] -= k[inside].mean()
    norm = math.sqrt(float((even * even).sum()))
    return even / norm, odd / norm


def rf_support_mask(n: SyntheticNeuron, size: int = IMAGE_SIZE) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    return (rr - n.center_row) ** 2 + (cc - n.center_col) ** 2 <= n.support_radius ** 2


def _contrast(images: np.ndarray) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    return imgs - 0.5


def center_energy(n: SyntheticNeuron, images: np.ndarray) -> np.ndarray:
    x = _contrast(images).reshape(len(images), -1)
    even, odd = gabor_pair(n, int(math.isqrt(x.shape[1])))
    return (x @ even.ravel()) ** 2 + (x @ odd.ravel()) ** 2


_FFT_PAD = 64


def image_spectra(images: np.ndarray, pad: int = _FFT_PAD) -> np.ndarray:
    """Zero-padded 2-D FFTs of contrast images, reusable across neurons."""
    return np.fft.fft2(_contrast(images), s=(pad, pad))


def surround_raw(n: SyntheticNeuron, images: np.ndarray, spectra: np.ndarray | None = None) -> np.ndarray:
    """Mean quadrature energy of the neuron's Gabor over its surround annulus."""
    even, odd = gabor_pair(n, centered=False)
    h = even.shape[0] // 2
    size = images.shape[-1]
    pad = spectra.shape[-1] if spectra is not None else _FFT_PAD
    if size + 2 * h > pad:
        pad, spectra = size + 2 * h, None
    if spectra is None:
        spectra = image_spectra(images, pad)
    # complex kernel: real part -> even response, imaginary part -> odd response
    kernel = np.zeros((pad, pad), dtype=np.complex128)
    kernel[: 2 * h + 1, : 2 * h + 1] = (even + 1j * odd)[::-1, ::-1]
    resp = np.fft.ifft2(spectra * np.fft.fft2(kernel))[:, h:h + size, h:h + size]
    rr, cc = np.mgrid[0:size, 0:size]
    d = np.sqrt((rr - n.center_row) ** 2 + (cc - n.center_col) ** 2)
    ring = (d >= n.annulus_inner) & (d <= n.annulus_outer)
    return (np.abs(resp[:, ring]) ** 2).mean(axis=1)


def surround_similarity(n: SyntheticNeuron, images: np.ndarray, spectra: np.ndarray | None = None) -> np.ndarray:
    s = surround_raw(n, images, spectra)
    return s / (s + n.surround_ref)


def neuron_responses(n: SyntheticNeuron, images: np.ndarray, rng: np.random.Generator | None = None,
                     spectra: np.ndarray | None = None) -> np.ndarray:
    """Responses of one neuron to a batch of ``N x 1 x H x W`` images.

    Noise-free unless ``rng`` is given; always nonnegative.
    """
    drive = np.maximum(center_energy(n, images) - n.threshold, 0.0)
    if n.gain != 0.0:
        drive = drive * (1.0 + n.gain * surround_similarity(n, images, spectra))
    r = n.scale * np.maximum(drive, 0.0) + n.offset
    if rng is not None and n.noise_sd > 0:
        r = r + rng.normal(0.0, n.noise_sd, size=r.shape)
    return np.maximum(r, 0.0)


def neuron_response(n: SyntheticNeuron, image: np.ndarray, noise_seed: int | None = None) -> float:
    """Single ``1 x H x W`` image; noisy only when ``noise_seed`` is given."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 1:
        raise DataError(f"expected a 1 x H x W image, got {image.shape}")
    rng = None if noise_seed is None else np.random.default_rng(noise_seed)
    return float(neuron_responses(n, image[None], rng)[0])


def gabor_patch(size: int, row: float, col: float, orientation: float, sf: float, phase: float,
                sigma: float, contrast: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    dr, dc = rr - row, cc - col
    env = np.exp(-(dr * dr + dc * dc) / (2 * sigma * sigma))
    proj = dc * math.cos(orientation) + dr * math.sin(orientation)
    return contrast * env * np.cos(2 * math.pi * sf * proj + phase)


def preferred_stimulus(n: SyntheticNeuron, size: int = IMAGE_SIZE, contrast: float = 0.5) -> np.ndarray:
    """The neuron's own Gabor (even phase) on gray, as a ``1 x H x W`` image."""
    even, _ = gabor_pair(n, size)
    patch = even / np.abs(even).max() * contrast
    return np.clip(0.5 + patch, 0.0, 1.0)[None]


# --------------------------------------------------------------------------
# procedural images
# --------------------------------------------------------------------------
def procedural_image(rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    """1/f noise plus a few oriented Gabor patches, clipped to [0, 1]."""
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    spec = (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape)) / f
    spec[0, 0] = 0.0
    img = np.fft.irfft2(spec, s=(size, size))
    img = img / (img.std() + 1e-12) * rng.uniform(0.05, 0.15)
    n_patch = int(rng.poisson(4))
    shared = rng.uniform(0, math.pi) if rng.random() < 0.5 else None
    sf_shared = rng.uniform(0.06, 0.22)
    for _ in range(n_patch):
        ori = shared if shared is not None else rng.uniform(0, math.pi)
        ori = ori + rng.normal(0, 0.1)
        sf = sf_shared if shared is not None else rng.uniform(0.06, 0.22)
        img += gabor_patch(size, rng.uniform(0, size), rng.uniform(0, size), ori, sf,
                           rng.uniform(0, 2 * math.pi), rng.uniform(2.0, 6.0), rng.uniform(0.1, 0.45))
    return np.clip(0.5 + img, 0.0, 1.0)


def procedural_images(seed: int, start: int, count: int, size: int = IMAGE_SIZE) -> np.ndarray:
    """Images ``start .. start+count-1``; each one is seeded by (seed, index)."""
    out = np.empty((count, 1, size, size), dtype=np.float32)
    for i in range(count):
        out[i, 0] = procedural_image(np.random.default_rng([seed, start + i]), size)
    return out


def load_image_directory(path: str | Path, count: int, size: int = IMAGE_SIZE) -> tuple[np.ndarray, list[str]]:
    """Grayscale, center-cropped, resized images in sorted filename order."""
    from PIL import Image

    path = Path(path)
    if not path.is_dir():
        raise DataError(f"image directory {path} does not exist")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if len(files) < count:
        raise DataError(f"{path} holds {len(files)} images, {count} are needed")
    out = np.empty((count, 1, size, size), dtype=np.float32)
    for i, f in enumerate(files[:count]):
        with Image.open(f) as im:
            im = im.convert("L")
            w, h = im.size
            s = min(w, h)
            im = im.crop(((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s))
            im = im.resize((size, size), Image.BILINEAR)
            out[i, 0] = np.asarray(im, dtype=np.float32) / 255.0
    return out, [f.name for f in files[:count]]


# --------------------------------------------------------------------------
# neuron generation
# --------------------------------------------------------------------------
def generate_neurons(m: int, config: SynthConfig | None = None, seed: int = 0,
                     calibration: np.ndarray | None = None) -> list[SyntheticNeuron]:
    """Sample ``m`` neurons and calibrate threshold, surround scale and peak.

    Calibration uses procedural images (or the supplied ones): the threshold
    is raised until at most ``sparsity_target`` of the images exceed half the
    peak response, then the output is scaled so the peak is 1.
    """
    if m < 1:
        raise ConfigError("need at least one neuron")
    cfg = config or SynthConfig()
    if not 0.0 <= cfg.surround_fraction <= 1.0:
        raise ConfigError("surround_fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 0x5EED])
    n_surround = int(round(cfg.surround_fraction * m))
    has_surround = np.zeros(m, dtype=bool)
    has_surround[rng.permutation(m)[:n_surround]] = True
    if calibration is None:
        calibration = procedural_images(seed ^ 0xCA1B, 0, cfg.calibration_images, cfg.image_size)
    spectra = image_spectra(calibration)
    neurons = []
    for i in range(m):
        diam = max(6.0, rng.normal(cfg.rf_deg_mean, cfg.rf_deg_sd) * cfg.px_per_deg)
        sigma = min(diam / 4.0, 3.4)
        inner = 2 * sigma + cfg.annulus_gap
        n = SyntheticNeuron(
            orientation=float(rng.uniform(0, math.pi)),
            sf=float(rng.uniform(*cfg.sf_range)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            sigma=float(sigma),
            center_row=float(cfg.center + rng.uniform(-cfg.center_jitter, cfg.center_jitter)),
            center_col=float(cfg.center + rng.uniform(-cfg.center_jitter, cfg.center_jitter)),
            gain=float(rng.uniform(*cfg.gain_range)) if has_surround[i] else 0.0,
            annulus_inner=float(inner),
            annulus_outer=float(inner + rng.uniform(*cfg.annulus_width)),
            noise_sd=cfg.noise_sd,
            offset=float(rng.uniform(*cfg.offset_range)),
        )
        neurons.append(calibrate_neuron(n, calibration, cfg.sparsity_target, spectra))
    return neurons


def calibrate_neuron(n: SyntheticNeuron, images: np.ndarray, sparsity_target: float,
                     spectra: np.ndarray | None = None) -> SyntheticNeuron:
    energy = center_energy(n, images)
    modulation = 1.0
    if n.gain != 0.0:
        raw = surround_raw(n, images, spectra)
        n.surround_ref = float(np.median(raw)) or 1.0
        modulation = np.maximum(1.0 + n.gain * raw / (raw + n.surround_ref), 0.0)
    for q in (0.5, 0.7, 0.8, 0.9, 0.95, 0.97, 0.98, 0.99, 0.995):
        n.threshold = float(np.quantile(energy, q))
        r = np.maximum(energy - n.threshold, 0.0) * modulation
        peak = float(r.max())
        if peak > 0 and np.mean(r > 0.5 * peak) <= sparsity_target:
            break
    n.scale = 1.0 / peak if peak > 0 else 1.0
    return n


# --------------------------------------------------------------------------
# dataset container
# --------------------------------------------------------------------------
@dataclass
class Dataset:
    images_train: np.ndarray
    images_val: np.ndarray
    responses_train: np.ndarray
    responses_val: np.ndarray
    neurons: list[dict] = field(default_factory=list)
    seed: int = 0
    clean_train: np.ndarray | None = None
    clean_val: np.ndarray | None = None
    meta: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def n_train(self) -> int:
        return len(self.images_train)

    @property
    def n_val(self) -> int:
        return len(self.images_val)

    @property
    def n_neurons(self) -> int:
        return self.responses_train.shape[1]

    def targets(self, neuron: int, split: str = "train", clean: bool = False) -> np.ndarray:
        if not 0 <= neuron < self.n_neurons:
            raise DataError(f"neuron index {neuron} out of range (dataset has {self.n_neurons})")
        if clean:
            src = self.clean_train if split == "train" else self.clean_val
            if src is None:
                raise DataError("dataset carries no noise-free responses")
        else:
            src = self.responses_train if split == "train" else self.responses_val
        return src[:, neuron]

    def subset_indices(self, fraction: float, seed: int) -> np.ndarray:
        """Seeded subset of the training split (sorted indices)."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
        if fraction == 1.0:
            return np.arange(self.n_train)
        n = int(math.floor(fraction * self.n_train))
        perm = np.random.default_rng([seed, 0xF2AC]).permutation(self.n_train)
        return np.sort(perm[:n])


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f4").tofile(path)


def save_dataset(ds: Dataset, path: str | Path, manifest: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {path}: {exc}") from exc
    images = np.concatenate([ds.images_train, ds.images_val])
    responses = np.concatenate([ds.responses_train, ds.responses_val])
    _write_f32(path / "images.f32", images)
    _write_f32(path / "responses.f32", responses)
    files = ["images.f32", "responses.f32", "neurons.json"]
    if ds.clean_train is not None and ds.clean_val is not None:
        _write_f32(path / "responses_clean.f32", np.concatenate([ds.clean_train, ds.clean_val]))
        files.append("responses_clean.f32")
    (path / "neurons.json").write_text(json.dumps(ds.neurons, indent=2, sort_keys=True) + "\n")
    _, c, h, w = images.shape
    meta = {
        "format_version": str(FORMAT_VERSION),
        "dtype": "float32-le",
        "layout": "row-major",
        "n_train": str(ds.n_train),
        "n_val": str(ds.n_val),
        "n_neurons": str(responses.shape[1]),
        "channels": str(c),
        "height": str(h),
        "width": str(w),
        "seed": str(ds.seed),
    }
    meta.update({k: v for k, v in ds.meta.items() if k not in meta and not k.startswith("sha256.")})
    for f in files:
        meta[f"sha256.{f}"] = _sha256(path / f)
    (path / "meta.txt").write_text("".join(f"{k}={v}\n" for k, v in sorted(meta.items())))
    if manifest is not None:
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    ds.meta = meta
    return path


def read_meta(path: Path) -> dict[str, str]:
    meta_path = path / "meta.txt"
    if not meta_path.is_file():
        raise DataError(f"{path}: missing meta.txt (not a dataset directory)")
    meta = {}
    for line in meta_path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def load_dataset(path: str | Path, verify: bool = True) -> Dataset:
    """Load and validate a dataset directory (version, sizes, checksums)."""
    path = Path(path)
    meta = read_meta(path)
    try:
        version = int(meta["format_version"])
        n_train, n_val, m = int(meta["n_train"]), int(meta["n_val"]), int(meta["n_neurons"])
        c, h, w = int(meta["channels"]), int(meta["height"]), int(meta["width"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: incomplete meta.txt ({exc})") from exc
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    n = n_train + n_val

    def read(name: str, shape: tuple[int, ...]) -> np.ndarray:
        f = path / name
        if not f.is_file():
            raise DataError(f"{path}: missing {name}")
        expected = f"sha256.{name}"
        if verify and expected in meta and _sha256(f) != meta[expected]:
            raise DataError(f"{path}: checksum mismatch for {name}")
        arr = np.fromfile(f, dtype="<f4")
        if arr.size != int(np.prod(shape)):
            raise DataError(f"{path}: {name} holds {arr.size} values, header implies {shape}")
        return arr.reshape(shape).astype(np.float32)

    images = read("images.f32", (n, c, h, w))
    responses = read("responses.f32", (n, m))
    clean = read("responses_clean.f32", (n, m)) if (path / "responses_clean.f32").is_file() else None
    neurons: list[dict] = []
    if (path / "neurons.json").is_file():
        if verify and "sha256.neurons.json" in meta and _sha256(path / "neurons.json") != meta["sha256.neurons.json"]:
            raise DataError(f"{path}: checksum mismatch for neurons.json")
        neurons = json.loads((path / "neurons.json").read_text())
    return Dataset(
        images_train=images[:n_train], images_val=images[n_train:],
        responses_train=responses[:n_train], responses_val=responses[n_train:],
        neurons=neurons, seed=int(meta.get("seed", 0)),
        clean_train=None if clean is None else clean[:n_train],
        clean_val=None if clean is None else clean[n_train:],
        meta=meta, version=version,
    )


def generate_dataset(
    n_train: int,
    n_val: int,
    neurons: Sequence[SyntheticNeuron] | int,
    seed: int = 0,
    out: str | Path | None = None,
    image_dir: str | Path | None = None,
    config: SynthConfig | None = None,
    chunk: int = 1000,
) -> Dataset:
    """Render images, compute every neuron's responses, optionally write to ``out``."""
    if n_train < 1 or n_val < 1:
        raise ConfigError("both splits need at least one image")
    cfg = config or SynthConfig()
    if isinstance(neurons, int):
        neurons = generate_neurons(neurons, cfg, seed)
    n_total = n_train + n_val
    if image_dir is not None:
        images, names = load_image_directory(image_dir, n_total, cfg.image_size)
        if len(set(names)) != len(names):
            raise DataError("duplicate image names across splits")
        source = f"directory:{Path(image_dir).resolve()}"
    else:
        images = np.concatenate([procedural_images(seed, s, min(chunk, n_total - s), cfg.image_size)
                                 for s in range(0, n_total, chunk)])
        source = "procedural"
    clean = np.empty((n_total, len(neurons)), dtype=np.float32)
    noisy = np.empty_like(clean)
    for s in range(0, n_total, chunk):
        spectra = image_spectra(images[s:s + chunk])
        for j, nrn in enumerate(neurons):
            clean[s:s + chunk, j] = neuron_responses(nrn, images[s:s + chunk], spectra=spectra)
    for j, nrn in enumerate(neurons):
        noise = np.random.default_rng([seed, 0x0015E, j]).normal(0.0, nrn.noise_sd, size=n_total)
        noisy[:, j] = np.maximum(clean[:, j] + noise, 0.0)
    ds = Dataset(
        images_train=images[:n_train], images_val=images[n_train:],
        responses_train=noisy[:n_train], responses_val=noisy[n_train:],
        neurons=[n.to_dict() for n in neurons], seed=seed,
        clean_train=clean[:n_train], clean_val=clean[n_train:],
        meta={"image_source": source},
    )
    if out is not None:
        manifest = {
            "generator": "ctxmod.synth",
            "format_version": FORMAT_VERSION,
            "seed": seed,
            "n_train": n_train,
            "n_val": n_val,
            "n_neurons": len(neurons),
            "image_source": source,
            "config": _jsonable(asdict(cfg)),
        }
        save_dataset(ds, out, manifest)
    return ds


def neurons_from_dataset(ds: Dataset) -> list[SyntheticNeuron]:
    return [SyntheticNeuron(**d) for d in ds.neurons]


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def standardization(images: np.ndarray) -> tuple[float, float]:
    """Dataset-level mean and std used to standardize model inputs."""
    mu = float(np.mean(images, dtype=np.float64))
    sd = float(np.std(images, dtype=np.float64))
    return mu, sd if sd > 0 else 1.0
