"""End-to-end compression, decompression, evaluation, and RD plotting.

Compression pads the input to a 64-multiple, computes the SNR map, encodes
through the SNR-aware encoder, rounds both latents, and entropy-codes the
hyper latent with the trained per-channel tables and the main latent with
per-element Gaussian tables rebuilt from the decoded hyper latent.  The
decoder recovers the exact quantized latents (rANS is lossless), so
encoder and decoder always agree bitwise on what the main decoder sees.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import GainLevel, Image, list_images, load_image, synthesize_noise, _resolve_dirs
from .entropy import build_factorized_cdf_tables, build_gaussian_cdf_tables, round_half_away
from .formats import CodedFile, LoadedModel, quality_id
from .msssim import ms_ssim, ms_ssim_db
from .rans import code_length_bound, rans_decode, rans_encode
from .snr import snr_map_stack
from .tensor import Tensor
from .transforms import PAD_MULTIPLE

PSNR_CAP_DB = 100.0


def pad_image_array(arr: np.ndarray, multiple: int = PAD_MULTIPLE):
    """Reflect-pad (H, W, 3) pixels on the bottom/right to a size multiple.

    Falls back to edge replication when a dimension is too small to reflect.
    """
    h, w = arr.shape[:2]
    pb = (-h) % multiple
    pr = (-w) % multiple
    if pb == 0 and pr == 0:
        return arr, 0, 0
    out = arr
    if pb:
        mode = "reflect" if pb <= h - 1 else "edge"
        out = np.pad(out, ((0, pb), (0, 0), (0, 0)), mode=mode)
    if pr:
        mode = "reflect" if pr <= w - 1 else "edge"
        out = np.pad(out, ((0, 0), (0, pr), (0, 0)), mode=mode)
    return out, pr, pb


def _expand_channel_tables(tables, shape):
    """Repeat per-channel tables into the C-order element sequence of (C, h, w)."""
    c, h, w = shape
    per = h * w
    out = []
    for ch in range(c):
        out.extend([tables[ch]] * per)
    return out


def _latent_tables(bundle: LoadedModel, z_hat: Tensor):
    """Per-element Gaussian tables from the decoded hyper latent."""
    mu, sigma = bundle.model.hyper_decode(z_hat)
    tables = build_gaussian_cdf_tables(mu.data[0], sigma.data[0])
    return mu, tables


def compress(bundle: LoadedModel, image: Image, return_estimate: bool = False):
    """Encode a (noisy) image to coded-file bytes; deterministic per model."""
    padded, pad_right, pad_bottom = pad_image_array(image.pixels)
    model = bundle.model
    x = Tensor(padded.transpose(2, 0, 1)[None].astype(model.dtype))
    s_maps = snr_map_stack(x.data)
    with T.no_grad():
        _, y = model.main_encode(x, s_maps)
        z = model.hyper_encode(y)

        z_syms = round_half_away(z.data[0]).astype(np.int64)
        z_tables = _expand_channel_tables(
            build_factorized_cdf_tables(model.factorized), z_syms.shape)
        z_stream = rans_encode(z_syms.ravel(), z_tables)

        z_hat = Tensor(z_syms.astype(model.dtype)[None])
        _, y_tables = _latent_tables(bundle, z_hat)
        y_syms = round_half_away(y.data[0]).astype(np.int64)
        y_stream = rans_encode(y_syms.ravel(), y_tables)

    coded = CodedFile(
        orig_width=image.width,
        orig_height=image.height,
        pad_right=pad_right,
        pad_bottom=pad_bottom,
        fingerprint=bundle.fingerprint,
        quality=quality_id(bundle.metric, bundle.lambda_d),
        z_payload=z_stream.data,
        y_payload=y_stream.data,
    )
    data = coded.to_bytes()
    if return_estimate:
        est_bits = code_length_bound(y_syms.ravel(), y_tables) + code_length_bound(
            z_syms.ravel(), z_tables)
        return data, est_bits
    return data


def decompress(bundle: LoadedModel, coded) -> Image:
    """Decode a coded file back to an image; fingerprints must match."""
    if isinstance(coded, (bytes, bytearray)):
        coded = CodedFile.from_bytes(bytes(coded))
    if coded.fingerprint != bundle.fingerprint:
        raise ValueError(
            f"coded file fingerprint {coded.fingerprint:#x} does not match "
            f"the loaded checkpoint {bundle.fingerprint:#x}")
    model = bundle.model
    hp = coded.orig_height + coded.pad_bottom
    wp = coded.orig_width + coded.pad_right
    shapes = model.latent_shapes(hp, wp)

    z_shape = shapes["z"]
    z_tables = _expand_channel_tables(build_factorized_cdf_tables(model.factorized), z_shape)
    z_syms = np.array(
        rans_decode(coded.z_payload, z_tables, int(np.prod(z_shape))), dtype=np.int64
    ).reshape(z_shape)
    with T.no_grad():
        z_hat = Tensor(z_syms.astype(model.dtype)[None])
        _, y_tables = _latent_tables(bundle, z_hat)
        y_shape = shapes["y"]
        y_syms = np.array(
            rans_decode(coded.y_payload, y_tables, int(np.prod(y_shape))), dtype=np.int64
        ).reshape(y_shape)
        y_hat = Tensor(y_syms.astype(model.dtype)[None])
        x_hat = model.main_decode(y_hat)
    pixels = np.clip(x_hat.data[0].transpose(1, 2, 0), 0.0, 1.0)
    pixels = pixels[: coded.orig_height, : coded.orig_width]
    return Image(pixels.astype(np.float64))


def psnr_db(a: Image, b: Image) -> float:
    """PSNR between 8-bit quantized images, capped at 100 dB."""
    av = a.to_uint8().astype(np.float64)
    bv = b.to_uint8().astype(np.float64)
    mse = float(np.mean((av - bv) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(255.0**2 / mse))


def ms_ssim_images(a: Image, b: Image) -> float:
    with T.no_grad():
        val = ms_ssim(Tensor(a.planar(np.float64)[None]), Tensor(b.planar(np.float64)[None]))
    return float(val.item())


EVAL_COLUMNS = ("image", "gain", "bpp", "psnr_db", "ms_ssim", "ms_ssim_db")


def evaluate(
    bundle: LoadedModel,
    clean_dir,
    gain: GainLevel | None,
    out_csv,
    seed: int = 0,
) -> list[tuple]:
    """Coding + quality metrics per image; gain=None uses stored noisy pairs."""
    clean_root, noisy_root = _resolve_dirs(clean_dir)
    paths = list_images(clean_root)
    if not paths:
        raise FileNotFoundError(f"no images under {clean_root}")
    if gain is None and noisy_root is None:
        raise FileNotFoundError("paired evaluation needs a noisy/ directory")
    rng = np.random.default_rng(seed)
    rows = []
    for path in paths:
        clean = load_image(path)
        if gain is not None:
            noisy = synthesize_noise(clean, gain.params, rng)
            label = gain.name.removeprefix("GAIN")
        else:
            noisy = load_image(noisy_root / path.name)
            label = "paired"
        data = compress(bundle, noisy)
        decoded = decompress(bundle, data)
        bpp = 8.0 * len(data) / (clean.width * clean.height)
        quality = psnr_db(decoded, clean)
        ms = ms_ssim_images(decoded, clean)
        rows.append((path.name, label, bpp, quality, ms, ms_ssim_db(ms)))
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EVAL_COLUMNS)
            writer.writerows(rows)
    return rows


def _read_eval_csv(path) -> tuple[float, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty CSV: {path}")
    means = {
        key: float(np.mean([float(r[key]) for r in rows]))
        for key in ("bpp", "psnr_db", "ms_ssim", "ms_ssim_db")
    }
    return means["bpp"], means


def rd_curve(csv_paths, out_svg, quality: str = "psnr_db") -> None:
    """Mean-rate/mean-quality plot: one marker per CSV, joined in bpp order."""
    if quality not in ("psnr_db", "ms_ssim", "ms_ssim_db"):
        raise ValueError(f"unknown quality column {quality!r}")
    points = []
    for path in csv_paths:
        bpp, means = _read_eval_csv(path)
        points.append((bpp, means[quality], Path(path).stem))
    points.sort(key=lambda p: p[0])
    _write_rd_svg(points, out_svg, quality)


def _write_rd_svg(points, out_svg, quality: str) -> None:
    width, height, margin = 640, 480, 60
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return margin + (v - x_lo) / x_span * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 15}" text-anchor="middle" '
        f'font-size="14">bits per pixel</text>',
        f'<text x="18" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height // 2})">{quality}</text>',
        f'<text x="{margin}" y="{height - margin + 18}" font-size="11" '
        f'text-anchor="middle">{x_lo:.3f}</text>',
        f'<text x="{width - margin}" y="{height - margin + 18}" font-size="11" '
        f'text-anchor="middle">{x_hi:.3f}</text>',
        f'<text x="{margin - 6}" y="{height - margin}" font-size="11" '
        f'text-anchor="end">{y_lo:.2f}</text>',
        f'<text x="{margin - 6}" y="{margin + 4}" font-size="11" '
        f'text-anchor="end">{y_hi:.2f}</text>',
    ]
    if len(points) > 1:
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y, _ in points)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#c22" stroke-width="2"/>')
    for x, y, label in points:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="#c22"/>')
        parts.append(
            f'<text x="{sx(x) + 7:.1f}" y="{sy(y) - 7:.1f}" font-size="11">{label}</text>')
    parts.append("</svg>")
    Path(out_svg).write_text("\n".join(parts))
