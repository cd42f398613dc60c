"""Losses and the optimization loop.

The objective is rate (bits per input pixel for both latents) plus
lambda_d-weighted distortion plus lambda_g-weighted guidance.  Guidance is
the L1 distance between the noisy-branch latents and the teacher latents
produced by the same encoder weights on the clean image, averaged per
element at both levels.  A loss cap skips optimizer steps on outlier
batches: any total above 5x the running median of recent accepted losses
(or a non-finite total) leaves weights and moments untouched.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PatchDataset, iterate_dataset_patches
from .entropy import GaussianParams, QuantMode, likelihood_factorized, likelihood_gaussian, quantize, rate_bits
from .msssim import ms_ssim
from .tensor import Tensor
from .transforms import JointModel, NetworkConfig, snr_maps_for

# quality ladders: lambda_d values paired with each metric
MSE_LAMBDAS = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
MSSSIM_LAMBDAS = (4.58, 8.73, 31.73, 60.50)

METRICS = ("mse", "msssim")

LOG_COLUMNS = ("epoch", "step", "rate_y", "rate_z", "D", "L_g", "total", "lr", "skipped_count")


@dataclass
class TrainConfig:
    lambda_d: float
    metric: str = "mse"
    lambda_g: float = 3.0
    lr: float = 5e-5
    epochs: int = 12
    steps_per_epoch: int = 50
    batch_size: int = 4
    patch_size: int = 64
    seed: int = 0
    loss_cap_factor: float = 5.0
    loss_cap_warmup: int = 100
    val_batches: int = 2

    def __post_init__(self):
        if self.lambda_d <= 0:
            raise ValueError("lambda_d must be positive")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.patch_size % 64:
            raise ValueError("patch_size must be a multiple of 64 (downsampling ladder)")

    def lr_milestones(self) -> tuple[int, int]:
        """Epoch indices where the rate drops 10x (3/4 and 5/6 of the run)."""
        return (self.epochs * 3 // 4, self.epochs * 5 // 6)

    def lr_at(self, epoch: int) -> float:
        m1, m2 = self.lr_milestones()
        return self.lr * (0.1 ** ((epoch >= m1) + (epoch >= m2)))


@dataclass
class LossBreakdown:
    """Per-batch scalars; total = rate_y + rate_z + lambda_d*D + lambda_g*L_g."""

    rate_y: float
    rate_z: float
    distortion: float
    guidance: float
    total: float


@dataclass
class TrainState:
    quant_rng: np.random.Generator
    lr: float
    accepted: deque = field(default_factory=lambda: deque(maxlen=100))
    skipped_count: int = 0

    def cap(self, factor: float, warmup: int) -> float:
        if len(self.accepted) < warmup:
            return math.inf
        return factor * float(np.median(self.accepted))


def combine_total(rate_y: float, rate_z: float, dist: float, guide: float,
                  lambda_d: float, lambda_g: float = 3.0) -> float:
    """Scalar form of the objective; the logged total uses exactly this."""
    return rate_y + rate_z + lambda_d * dist + lambda_g * guide


def guidance_loss(y0_gt: Tensor, y0: Tensor, y_gt: Tensor, y: Tensor) -> Tensor:
    """Per-element mean L1 distance summed over the two latent levels."""
    if y0_gt.shape != y0.shape or y_gt.shape != y.shape:
        raise ValueError("latent pairs must be shape-matched")
    return T.add(T.mean(T.absolute(T.sub(y0_gt, y0))),
                 T.mean(T.absolute(T.sub(y_gt, y))))


def distortion(x_hat: Tensor, x_gt: Tensor, metric: str) -> Tensor:
    """255-scaled MSE, or one minus MS-SSIM; both differentiable."""
    if x_hat.shape != x_gt.shape:
        raise ValueError("shape mismatch")
    if metric == "mse":
        d = T.sub(x_hat, x_gt)
        return T.mul(T.mean(T.mul(d, d)), 255.0**2)
    if metric == "msssim":
        return T.sub_from_scalar(1.0, ms_ssim(x_hat, x_gt))
    raise ValueError(f"unknown metric {metric!r}")


def compute_losses(
    model: JointModel,
    clean: Tensor,
    noisy: Tensor,
    cfg: TrainConfig,
    mode: QuantMode,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """Run all three branches and assemble the total objective."""
    n, _, h, w = noisy.shape
    pixels = n * h * w
    s_maps = snr_maps_for(noisy)

    y0_gt, y_gt = model.teacher_encode(clean)
    y0, y = model.main_encode(noisy, s_maps)
    z = model.hyper_encode(y)
    y_hat = quantize(y, mode, rng)
    z_hat = quantize(z, mode, rng)
    mu, sigma = model.hyper_decode(z_hat)

    rate_y = T.mul(rate_bits(likelihood_gaussian(y_hat, GaussianParams(mu, sigma))), 1.0 / pixels)
    rate_z = T.mul(rate_bits(likelihood_factorized(z_hat, model.factorized)), 1.0 / pixels)
    x_hat = model.main_decode(y_hat)
    dist = distortion(x_hat, clean, cfg.metric)
    guide = guidance_loss(y0_gt, y0, y_gt, y)

    total = T.add(T.add(rate_y, rate_z),
                  T.add(T.mul(dist, cfg.lambda_d), T.mul(guide, cfg.lambda_g)))
    breakdown = LossBreakdown(
        rate_y=rate_y.item(), rate_z=rate_z.item(),
        distortion=dist.item(), guidance=guide.item(),
        total=combine_total(rate_y.item(), rate_z.item(), dist.item(), guide.item(),
                            cfg.lambda_d, cfg.lambda_g),
    )
    return total, breakdown


def train_step(
    batch: tuple,
    model: JointModel,
    cfg: TrainConfig,
    state: TrainState,
) -> tuple[LossBreakdown, bool]:
    """One optimization step; returns (breakdown, skipped).

    Skipped steps (total above the cap, or non-finite) leave parameters and
    optimizer moments bitwise unchanged.
    """
    clean, noisy, _ = batch
    total, breakdown = compute_losses(model, clean, noisy, cfg, QuantMode.TRAIN, state.quant_rng)
    cap = state.cap(cfg.loss_cap_factor, cfg.loss_cap_warmup)
    if not math.isfinite(breakdown.total) or breakdown.total > cap:
        state.skipped_count += 1
        return breakdown, True
    T.backward(total)
    T.adam_step(model.parameters(), state.lr)
    state.accepted.append(breakdown.total)
    return breakdown, False


def validation_loss(model: JointModel, val_batches, cfg: TrainConfig) -> float:
    """Mean total loss over held-out batches with hard rounding."""
    totals = []
    with T.no_grad():
        for clean, noisy, _ in val_batches:
            _, br = compute_losses(model, clean, noisy, cfg, QuantMode.INFER)
            totals.append(br.total)
    return float(np.mean(totals))


def train_loop(
    dataset,
    cfg: TrainConfig,
    net_cfg: NetworkConfig | None = None,
    model: JointModel | None = None,
    dtype=np.float32,
):
    """Full training run; returns (model with best-validation weights, log rows).

    Deterministic for a fixed seed: data sampling, quantization noise, and
    validation batches all derive from cfg.seed.
    """
    ss = np.random.SeedSequence(cfg.seed)
    data_rng, quant_rng, val_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    if model is None:
        model = JointModel(net_cfg or NetworkConfig(), seed=cfg.seed, dtype=dtype)

    ds = dataset if isinstance(dataset, PatchDataset) else PatchDataset(dataset, cfg.patch_size)
    stream = iterate_dataset_patches(ds, cfg.batch_size, data_rng, dtype=model.dtype)
    val_stream = iterate_dataset_patches(ds, cfg.batch_size, val_rng, dtype=model.dtype)
    val_batches = [next(val_stream) for _ in range(cfg.val_batches)]

    state = TrainState(quant_rng=quant_rng, lr=cfg.lr)
    rows: list[tuple] = []
    best_val = math.inf
    best_weights: dict[str, np.ndarray] | None = None

    for epoch in range(cfg.epochs):
        state.lr = cfg.lr_at(epoch)
        for step in range(cfg.steps_per_epoch):
            breakdown, _ = train_step(next(stream), model, cfg, state)
            rows.append((epoch, step, breakdown.rate_y, breakdown.rate_z,
                         breakdown.distortion, breakdown.guidance, breakdown.total,
                         state.lr, state.skipped_count))
        val = validation_loss(model, val_batches, cfg)
        rows.append((epoch, -1, math.nan, math.nan, math.nan, math.nan, val,
                     state.lr, state.skipped_count))
        if val < best_val:
            best_val = val
            best_weights = {name: p.data.copy() for name, p in model.named_parameters()}

    if best_weights is not None:
        for name, p in model.named_parameters():
            p.data = best_weights[name]
    return model, rows


def write_metrics_csv(rows, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        writer.writerows(rows)
