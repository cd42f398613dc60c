"""Command-line surface: train, compress, decompress, noise, eval, rd-curve."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import GainLevel, NoiseParams, load_image, save_image, synthesize_noise
from .formats import load_checkpoint, save_checkpoint
from .pipeline import compress, decompress, evaluate, rd_curve
from .training import TrainConfig, train_loop, write_metrics_csv
from .transforms import NetworkConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="njcodec",
        description="Joint lossy compression and denoising for noisy images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a directory of images")
    p_train.add_argument("data", help="dataset directory (clean/ [+ noisy/] or images)")
    p_train.add_argument("--lambda-d", type=float, required=True,
                         help="distortion weight (rate-distortion trade-off)")
    p_train.add_argument("--metric", choices=("mse", "msssim"), default="mse")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--epochs", type=int, default=12)
    p_train.add_argument("--steps-per-epoch", type=int, default=50)
    p_train.add_argument("--patch", type=int, default=64)
    p_train.add_argument("--batch", type=int, default=4)
    p_train.add_argument("--lr", type=float, default=5e-5)
    p_train.add_argument("--base-channels", type=int, default=32)
    p_train.add_argument("--latent-channels", type=int, default=48)
    p_train.add_argument("--hyper-channels", type=int, default=32)
    p_train.add_argument("--res-blocks", type=int, default=2)
    p_train.add_argument("--tf-layers", type=int, default=2)
    p_train.add_argument("--heads", type=int, default=4)
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--log", help="metrics CSV path (default: <out>.csv)")

    p_comp = sub.add_parser("compress", help="compress a (noisy) image")
    p_comp.add_argument("input", help="input PNG or PPM image")
    p_comp.add_argument("--model", required=True)
    p_comp.add_argument("--out", required=True, help="coded output path")

    p_dec = sub.add_parser("decompress", help="decode a coded file to an image")
    p_dec.add_argument("input", help="coded input file")
    p_dec.add_argument("--model", required=True)
    p_dec.add_argument("--out", required=True, help="output PNG or PPM path")

    p_noise = sub.add_parser("noise", help="add synthetic sensor noise to an image")
    p_noise.add_argument("input")
    p_noise.add_argument("--gain", choices=("1", "2", "4", "8"),
                         help="preset noise level")
    p_noise.add_argument("--delta-r", type=float, help="read-noise parameter")
    p_noise.add_argument("--delta-s", type=float, help="shot-noise parameter")
    p_noise.add_argument("--seed", type=int, default=0)
    p_noise.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="rate/quality table over a dataset")
    p_eval.add_argument("data", help="clean image directory (optionally with noisy/)")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--gain", choices=("1", "2", "4", "8"),
                        help="synthesize this noise level (omit for paired data)")
    p_eval.add_argument("--paired", action="store_true",
                        help="use stored noisy/ pairs instead of synthesis")
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--out", required=True, help="CSV output path")

    p_rd = sub.add_parser("rd-curve", help="plot mean rate/quality points as SVG")
    p_rd.add_argument("csvs", nargs="+", help="eval CSV files, one point each")
    p_rd.add_argument("--quality", choices=("psnr_db", "ms_ssim", "ms_ssim_db"),
                      default="psnr_db")
    p_rd.add_argument("--out", required=True, help="SVG output path")
    return parser


def _cmd_train(args) -> int:
    cfg = TrainConfig(
        lambda_d=args.lambda_d, metric=args.metric, seed=args.seed,
        epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
        batch_size=args.batch, patch_size=args.patch, lr=args.lr,
    )
    net = NetworkConfig(
        base_channels=args.base_channels, latent_channels=args.latent_channels,
        hyper_channels=args.hyper_channels, residual_blocks_per_stage=args.res_blocks,
        transformer_layers=args.tf_layers, attention_heads=args.heads,
    )
    model, rows = train_loop(args.data, cfg, net_cfg=net)
    save_checkpoint(model, cfg.metric, cfg.lambda_d, args.out)
    log_path = args.log or (str(args.out) + ".csv")
    write_metrics_csv(rows, log_path)
    print(f"wrote {args.out} and {log_path}")
    return 0


def _cmd_compress(args) -> int:
    bundle = load_checkpoint(args.model)
    data = compress(bundle, load_image(args.input))
    Path(args.out).write_bytes(data)
    print(f"wrote {args.out} ({len(data)} bytes)")
    return 0


def _cmd_decompress(args) -> int:
    bundle = load_checkpoint(args.model)
    image = decompress(bundle, Path(args.input).read_bytes())
    save_image(image, args.out)
    print(f"wrote {args.out} ({image.width}x{image.height})")
    return 0


def _noise_params(args) -> NoiseParams:
    if args.gain is not None:
        if args.delta_r is not None or args.delta_s is not None:
            raise ValueError("give either --gain or --delta-r/--delta-s, not both")
        return GainLevel.from_label(args.gain).params
    if args.delta_r is None or args.delta_s is None:
        raise ValueError("need --gain or both --delta-r and --delta-s")
    return NoiseParams(args.delta_r, args.delta_s)


def _cmd_noise(args) -> int:
    params = _noise_params(args)
    rng = np.random.default_rng(args.seed)
    noisy = synthesize_noise(load_image(args.input), params, rng)
    save_image(noisy, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    if args.paired and args.gain:
        raise ValueError("--paired and --gain are mutually exclusive")
    gain = None if args.paired else GainLevel.from_label(args.gain or "1")
    bundle = load_checkpoint(args.model)
    rows = evaluate(bundle, args.data, gain, args.out, seed=args.seed)
    print(f"wrote {args.out} ({len(rows)} images)")
    return 0


def _cmd_rd_curve(args) -> int:
    rd_curve(args.csvs, args.out, quality=args.quality)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "compress": _cmd_compress,
    "decompress": _cmd_decompress,
    "noise": _cmd_noise,
    "eval": _cmd_eval,
    "rd-curve": _cmd_rd_curve,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
