"""Joint lossy compression and denoising for noisy images."""

from .data import GainLevel, Image, NoiseParams, load_image, sample_noise_params, save_image, synthesize_noise
from .entropy import (
    CdfTable,
    FactorizedModel,
    GaussianParams,
    QuantMode,
    build_factorized_cdf_tables,
    build_gaussian_cdf_tables,
    likelihood_factorized,
    likelihood_gaussian,
    quantize,
    rate_bits,
)
from .formats import CodedFile, LoadedModel, bundle_for, load_checkpoint, save_checkpoint
from .msssim import ms_ssim, ms_ssim_db
from .pipeline import compress, decompress, evaluate, psnr_db, rd_curve
from .rans import Bitstream, CorruptStreamError, code_length_bound, rans_decode, rans_encode
from .snr import SnrMap, compute_snr_map, resize_snr, to_grayscale
from .tensor import Parameter, Tensor, adam_step, backward, no_grad
from .training import LossBreakdown, TrainConfig, distortion, guidance_loss, train_loop, train_step
from .transforms import JointModel, NetworkConfig, snr_fuse

__version__ = "0.1.0"

__all__ = [
    "Bitstream", "CdfTable", "CodedFile", "CorruptStreamError", "FactorizedModel",
    "GainLevel", "GaussianParams", "Image", "JointModel", "LoadedModel",
    "LossBreakdown", "NetworkConfig", "NoiseParams", "Parameter", "QuantMode",
    "SnrMap", "Tensor", "TrainConfig", "adam_step", "backward", "bundle_for",
    "build_factorized_cdf_tables", "build_gaussian_cdf_tables", "code_length_bound",
    "compress", "compute_snr_map", "decompress", "distortion", "evaluate",
    "guidance_loss", "likelihood_factorized", "likelihood_gaussian", "load_checkpoint",
    "load_image", "ms_ssim", "ms_ssim_db", "no_grad", "psnr_db", "quantize",
    "rans_decode", "rans_encode", "rate_bits", "rd_curve", "resize_snr",
    "sample_noise_params", "save_checkpoint", "save_image", "snr_fuse",
    "synthesize_noise", "to_grayscale", "train_loop", "train_step",
]
