"""Image I/O, shot/read noise synthesis, and training patch iteration.

Images live in [0,1] as float arrays, channel-interleaved (H,W,3) at rest
and planar (3,H,W) once they enter the tensor engine.  Noise follows the
heteroscedastic Gaussian camera model: variance delta_r**2 + delta_s * x
per pixel and channel, clipped back to [0,1] after addition.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .tensor import Tensor

# log10 sampling intervals for training-time noise parameters
READ_NOISE_LOG10_RANGE = (-3.0, -1.5)
SHOT_NOISE_LOG10_RANGE = (-4.0, -2.0)


@dataclass
class Image:
    """RGB raster in [0,1]; pixels shaped (H, W, 3), row-major."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image dims must be >= 1")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def planar(self, dtype=np.float32) -> np.ndarray:
        """(3, H, W) copy for tensor work."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1).astype(dtype))

    @staticmethod
    def from_planar(arr) -> "Image":
        arr = np.asarray(arr)
        return Image(np.clip(arr.transpose(1, 2, 0), 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.pixels * 255.0), 0, 255).astype(np.uint8)

    @staticmethod
    def from_uint8(arr) -> "Image":
        return Image(np.asarray(arr, dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class NoiseParams:
    """Read/shot noise magnitudes in pixel-value units."""

    delta_r: float
    delta_s: float

    def __post_init__(self):
        if self.delta_r < 0 or self.delta_s < 0:
            raise ValueError("noise parameters must be non-negative")


class GainLevel(Enum):
    """Fixed evaluation noise levels; values are (delta_r, delta_s).

    GAIN1/GAIN2 fall inside the training sampling intervals; GAIN4/GAIN8
    fall outside them (unseen, noisier conditions).
    """

    GAIN1 = (10.0**-2.1, 10.0**-2.6)
    GAIN2 = (10.0**-1.8, 10.0**-2.3)
    GAIN4 = (10.0**-1.4, 10.0**-1.9)
    GAIN8 = (10.0**-1.1, 10.0**-1.5)

    @property
    def delta_r(self) -> float:
        return self.value[0]

    @property
    def delta_s(self) -> float:
        return self.value[1]

    @property
    def params(self) -> NoiseParams:
        return NoiseParams(*self.value)

    @staticmethod
    def from_label(label) -> "GainLevel":
        mapping = {"1": GainLevel.GAIN1, "2": GainLevel.GAIN2,
                   "4": GainLevel.GAIN4, "8": GainLevel.GAIN8}
        key = str(label)
        if key not in mapping:
            raise ValueError(f"unknown gain level {label!r} (expected 1, 2, 4 or 8)")
        return mapping[key]


# ---------------------------------------------------------------------------
# file I/O (PNG via Pillow, PPM P6 parsed by hand)


def load_image(path) -> Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"P6":
        return _load_ppm(path)
    if magic == b"\x89P":
        with PILImage.open(path) as im:
            return Image.from_uint8(np.asarray(im.convert("RGB")))
    raise ValueError(f"unsupported image format in {path} (need PNG or binary PPM)")


def save_image(image: Image, path) -> None:
    path = Path(path)
    data = image.to_uint8()
    if path.suffix.lower() == ".ppm":
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (image.width, image.height))
            fh.write(data.tobytes())
        return
    PILImage.fromarray(data, mode="RGB").save(path, format="PNG")


def _load_ppm(path: Path) -> Image:
    with open(path, "rb") as fh:
        raw = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos : pos + 1].isspace():
                pos += 1
            elif raw[pos : pos + 1] == b"#":
                while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PPM header in {path}")
        return raw[start:pos]

    if token() != b"P6":
        raise ValueError(f"not a binary PPM file: {path}")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ValueError(f"malformed PPM header in {path}") from exc
    if width < 1 or height < 1:
        raise ValueError(f"bad PPM dimensions in {path}")
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, got maxval {maxval}")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    body = raw[pos : pos + need]
    if len(body) != need:
        raise ValueError(f"truncated PPM pixel data in {path}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)
    return Image.from_uint8(arr)


# ---------------------------------------------------------------------------
# noise model


def sample_noise_params(rng: np.random.Generator) -> NoiseParams:
    """Draw training noise parameters log-uniformly from the fixed intervals."""
    log_r = rng.uniform(*READ_NOISE_LOG10_RANGE)
    log_s = rng.uniform(*SHOT_NOISE_LOG10_RANGE)
    return NoiseParams(10.0**log_r, 10.0**log_s)


def synthesize_noise(clean: Image, p: NoiseParams, rng: np.random.Generator) -> Image:
    """Add zero-mean Gaussian noise with variance delta_r^2 + delta_s * x, then clip.

    Noise is drawn independently per pixel and per channel.
    """
    x = clean.pixels
    sigma = np.sqrt(p.delta_r**2 + p.delta_s * x)
    noisy = x + rng.standard_normal(x.shape) * sigma
    return Image(np.clip(noisy, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset iteration


def _resolve_dirs(root) -> tuple[Path, Path | None]:
    root = Path(root)
    clean_dir = root / "clean" if (root / "clean").is_dir() else root
    noisy_dir = root / "noisy" if (root / "noisy").is_dir() else None
    return clean_dir, noisy_dir


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    out = sorted(
        p for p in directory.iterdir()
        if p.suffix.lower() in (".png", ".ppm") and p.is_file()
    )
    return out


class PatchDataset:
    """Random crops from a directory of images, with synthetic or stored noise.

    Layout: ``root/clean/*.png`` (or images directly under ``root``); when a
    ``root/noisy/`` directory with matching filenames exists, stored pairs are
    used and synthesis is skipped.
    """

    def __init__(self, root, patch: int):
        clean_dir, noisy_dir = _resolve_dirs(root)
        paths = list_images(clean_dir)
        if not paths:
            raise FileNotFoundError(f"no loadable images under {clean_dir}")
        self.patch = int(patch)
        self.clean: list[np.ndarray] = []
        self.noisy: list[np.ndarray] | None = [] if noisy_dir else None
        for p in paths:
            img = load_image(p)
            if img.height < patch or img.width < patch:
                raise ValueError(f"{p} is smaller than the {patch}px patch size")
            self.clean.append(img.pixels)
            if noisy_dir is not None:
                pair = noisy_dir / p.name
                if not pair.is_file():
                    raise FileNotFoundError(f"missing noisy pair for {p.name}")
                noisy = load_image(pair)
                if noisy.pixels.shape != img.pixels.shape:
                    raise ValueError(f"clean/noisy size mismatch for {p.name}")
                self.noisy.append(noisy.pixels)

    @property
    def paired(self) -> bool:
        return self.noisy is not None

    def __len__(self) -> int:
        return len(self.clean)


def iterate_patches(
    root,
    patch: int,
    batch: int,
    rng: np.random.Generator,
    dtype=np.float32,
):
    """Endless stream of (clean, noisy, params) training batches.

    Each yielded item is a pair of (batch, 3, patch, patch) tensors plus the
    NoiseParams used for the whole batch (fresh per item in synthetic mode,
    None in paired mode).  Crop offsets are uniform over all valid positions.
    """
    ds = root if isinstance(root, PatchDataset) else PatchDataset(root, patch)
    yield from iterate_dataset_patches(ds, batch, rng, dtype)


def iterate_dataset_patches(ds: PatchDataset, batch: int, rng, dtype=np.float32):
    patch = ds.patch
    while True:
        clean_crops = np.empty((batch, 3, patch, patch), dtype=dtype)
        noisy_crops = np.empty_like(clean_crops)
        params = None if ds.paired else sample_noise_params(rng)
        for b in range(batch):
            idx = int(rng.integers(0, len(ds.clean)))
            img = ds.clean[idx]
            oy = int(rng.integers(0, img.shape[0] - patch + 1))
            ox = int(rng.integers(0, img.shape[1] - patch + 1))
            crop = img[oy : oy + patch, ox : ox + patch]
            clean_crops[b] = crop.transpose(2, 0, 1)
            if ds.paired:
                pair = ds.noisy[idx][oy : oy + patch, ox : ox + patch]
                noisy_crops[b] = pair.transpose(2, 0, 1)
            else:
                noisy = synthesize_noise(Image(crop), params, rng)
                noisy_crops[b] = noisy.pixels.transpose(2, 0, 1)
        yield Tensor(clean_crops), Tensor(noisy_crops), params
