"""Network architecture: encoder/decoder ladders, SNR-aware branch, hyper pair.

The main encoder runs in two stages (4x then 16x downsampling).  A parallel
branch extracts features from the noisy input, splits them into a local
(residual-conv) and a non-local (transformer) path, blends the two with the
resized SNR map, and injects the result back into the main latents through
1x1 convolutions.  A teacher pass reuses the very same encoder weights on
the clean image to produce guidance targets; it owns no weights of its own.

The hyper pair maps the main latent to a small hyper latent and back to the
(mu, sigma) of the conditional Gaussian.  There is no autoregressive context
model, so decoding is a single parallel pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .entropy import FactorizedModel, SIGMA_MIN
from .tensor import Parameter, Tensor
from .snr import snr_map_stack

LEAKY_SLOPE = 0.2
FFN_EXPANSION = 2
DOWN_KERNEL = 5  # stride-2 conv, pad 2
UP_KERNEL = 4  # stride-2 transposed conv, pad 1: exact 2x upsampling
PAD_MULTIPLE = 64


@dataclass
class NetworkConfig:
    """Channel widths and transformer geometry; defaults are desk-scale."""

    base_channels: int = 32
    latent_channels: int = 48
    hyper_channels: int = 32
    residual_blocks_per_stage: int = 2
    patch_size: int = 4
    transformer_layers: int = 2
    attention_heads: int = 4

    def __post_init__(self):
        if min(self.base_channels, self.latent_channels, self.hyper_channels,
               self.residual_blocks_per_stage, self.patch_size,
               self.transformer_layers, self.attention_heads) < 1:
            raise ValueError("all config fields must be >= 1")
        m2 = self.patch_size * self.patch_size
        for ch in (self.base_channels, self.latent_channels):
            if (m2 * ch) % self.attention_heads:
                raise ValueError(
                    f"token dim {m2 * ch} not divisible by {self.attention_heads} heads")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(**d)


class Module:
    """Lightweight container; children are discovered by attribute walk."""

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Parameter, Module, FactorizedModel)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Parameter, Module, FactorizedModel)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Parameter):
                yield name, val
            else:
                yield from val.named_parameters(name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float, dtype):
    limit = scale * math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride, padding, rng, dtype, init_scale=1.0):
        self.stride = stride
        self.padding = padding
        self.w = Parameter(_kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, init_scale, dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride, padding, rng, dtype, init_scale=1.0):
        self.stride = stride
        self.padding = padding
        self.w = Parameter(_kaiming_uniform(rng, (cin, cout, k, k), cin * k * k, init_scale, dtype))
        self.b = Parameter(np.zeros(cout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, din, dout, rng, dtype, init_scale=1.0):
        self.w = Parameter(_kaiming_uniform(rng, (din, dout), din, init_scale, dtype))
        self.b = Parameter(np.zeros(dout, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.w)
        bias = T.reshape(self.b, (1,) * (out.ndim - 1) + (self.b.shape[0],))
        return T.add(out, T.expand(bias, out.shape))


class LayerNorm(Module):
    def __init__(self, dim, dtype):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class ResidualBlock(Module):
    """conv3x3 -> leaky relu -> conv3x3 with identity skip."""

    def __init__(self, ch, rng, dtype):
        self.conv1 = Conv2d(ch, ch, 3, 1, 1, rng, dtype)
        self.conv2 = Conv2d(ch, ch, 3, 1, 1, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(T.leaky_relu(self.conv1(x), LEAKY_SLOPE))
        return T.add(x, h)


class EncoderStage(Module):
    """Two stride-2 convolutions, each followed by residual blocks (4x down)."""

    def __init__(self, cin, cout, n_blocks, rng, dtype):
        self.down1 = Conv2d(cin, cout, DOWN_KERNEL, 2, DOWN_KERNEL // 2, rng, dtype)
        self.blocks1 = [ResidualBlock(cout, rng, dtype) for _ in range(n_blocks)]
        self.down2 = Conv2d(cout, cout, DOWN_KERNEL, 2, DOWN_KERNEL // 2, rng, dtype)
        self.blocks2 = [ResidualBlock(cout, rng, dtype) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.down1(x), LEAKY_SLOPE)
        for blk in self.blocks1:
            h = blk(h)
        h = T.leaky_relu(self.down2(h), LEAKY_SLOPE)
        for blk in self.blocks2:
            h = blk(h)
        return h


class ShortRange(Module):
    """Local path: two residual blocks, shape preserving."""

    def __init__(self, ch, rng, dtype):
        self.blocks = [ResidualBlock(ch, rng, dtype) for _ in range(2)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward block over patch tokens."""

    def __init__(self, dim, heads, rng, dtype):
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.ln1 = LayerNorm(dim, dtype)
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype, init_scale=0.1)
        self.ln2 = LayerNorm(dim, dtype)
        self.ffn1 = Linear(dim, FFN_EXPANSION * dim, rng, dtype)
        self.ffn2 = Linear(FFN_EXPANSION * dim, dim, rng, dtype, init_scale=0.1)

    def _attention(self, x: Tensor) -> Tensor:
        n, t, d = x.shape
        h = self.heads
        dh = d // h

        def split(v):
            v = T.reshape(v, (n, t, h, dh))
            v = T.transpose(v, (0, 2, 1, 3))
            return T.reshape(v, (n * h, t, dh))

        q = split(self.wq(x))
        k = split(self.wk(x))
        v = split(self.wv(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores, axis=-1), v)
        ctx = T.reshape(ctx, (n, h, t, dh))
        ctx = T.transpose(ctx, (0, 2, 1, 3))
        return self.wo(T.reshape(ctx, (n, t, d)))

    def __call__(self, x: Tensor) -> Tensor:
        attended = T.add(x, self._attention(self.ln1(x)))
        return T.add(attended, self.ffn2(T.gelu(self.ffn1(self.ln2(attended)))))


def _patchify(x: Tensor, m: int) -> Tensor:
    n, c, h, w = x.shape
    gh, gw = h // m, w // m
    t = T.reshape(x, (n, c, gh, m, gw, m))
    t = T.transpose(t, (0, 2, 4, 3, 5, 1))
    return T.reshape(t, (n, gh * gw, m * m * c))


def _unpatchify(tokens: Tensor, m: int, c: int, h: int, w: int) -> Tensor:
    n = tokens.shape[0]
    gh, gw = h // m, w // m
    t = T.reshape(tokens, (n, gh, gw, m, m, c))
    t = T.transpose(t, (0, 5, 1, 3, 2, 4))
    return T.reshape(t, (n, c, h, w))


class LongRange(Module):
    """Non-local path: patch tokens through pre-norm transformer blocks.

    Tokens carry no positional encoding, so the mapping is equivariant to
    patch permutations.  Inputs are reflect-padded to a patch multiple and
    cropped back.
    """

    def __init__(self, ch, cfg: NetworkConfig, rng, dtype):
        self.ch = ch
        self.m = cfg.patch_size
        dim = self.m * self.m * ch
        self.blocks = [
            TransformerBlock(dim, cfg.attention_heads, rng, dtype)
            for _ in range(cfg.transformer_layers)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        ph = (-h) % self.m
        pw = (-w) % self.m
        padded = T.pad2d(x, (0, ph, 0, pw), mode="reflect") if (ph or pw) else x
        hp, wp = h + ph, w + pw
        tokens = _patchify(padded, self.m)
        for blk in self.blocks:
            tokens = blk(tokens)
        out = _unpatchify(tokens, self.m, c, hp, wp)
        if ph or pw:
            out = T.narrow(T.narrow(out, 2, 0, h), 3, 0, w)
        return out


def snr_fuse(f_s: Tensor, f_l: Tensor, s_resized: Tensor) -> Tensor:
    """Convex per-pixel blend: local features where the map is 1, non-local at 0."""
    if f_s.shape != f_l.shape:
        raise ValueError(f"feature shape mismatch: {f_s.shape} vs {f_l.shape}")
    n, c, h, w = f_s.shape
    if s_resized.shape[-2:] != (h, w):
        raise ValueError(f"map {s_resized.shape} does not match features {f_s.shape}")
    s = T.reshape(s_resized, (s_resized.shape[0] if s_resized.ndim == 4 else 1, 1, h, w))
    s = T.expand(s, f_s.shape) if s.shape != f_s.shape else s
    return T.add(T.mul(f_s, s), T.mul(f_l, T.sub_from_scalar(1.0, s)))


class Inject(Module):
    """1x1 convolution over [branch, main] channel concat; produces a residual.

    Starts near zero so the untrained network behaves like the plain
    autoencoder path.
    """

    def __init__(self, ch, rng, dtype):
        self.proj = Conv2d(2 * ch, ch, 1, 1, 0, rng, dtype, init_scale=0.1)

    def __call__(self, s_k: Tensor, y_k: Tensor) -> Tensor:
        if s_k.shape[-2:] != y_k.shape[-2:]:
            raise ValueError(f"spatial mismatch: {s_k.shape} vs {y_k.shape}")
        return self.proj(T.concat([s_k, y_k], axis=1))


class SnrBranch(Module):
    """Feature extractor plus per-scale local/non-local paths and fusion."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        C, M = cfg.base_channels, cfg.latent_channels
        nb = cfg.residual_blocks_per_stage
        self.extract0 = EncoderStage(3, C, nb, rng, dtype)
        self.extract1 = EncoderStage(C, M, nb, rng, dtype)
        self.short0 = ShortRange(C, rng, dtype)
        self.long0 = LongRange(C, cfg, rng, dtype)
        self.short1 = ShortRange(M, rng, dtype)
        self.long1 = LongRange(M, cfg, rng, dtype)

    def __call__(self, x: Tensor, s_maps: np.ndarray) -> tuple[Tensor, Tensor]:
        feat0 = self.extract0(x)
        feat1 = self.extract1(feat0)
        s0 = snr_fuse(self.short0(feat0), self.long0(feat0),
                      _resize_map_stack(s_maps, feat0))
        s1 = snr_fuse(self.short1(feat1), self.long1(feat1),
                      _resize_map_stack(s_maps, feat1))
        return s0, s1


def _resize_map_stack(s_maps: np.ndarray, like: Tensor) -> Tensor:
    """Resize (N, H, W) maps to a feature tensor's spatial dims, as a constant."""
    n, _, h, w = like.shape
    if s_maps.ndim != 3 or s_maps.shape[0] != n:
        raise ValueError(f"expected ({n}, H, W) map stack, got {s_maps.shape}")
    resized = T.resize_bilinear(Tensor(s_maps), h, w)
    data = np.clip(resized.data, 0.0, 1.0)[:, None, :, :]
    return Tensor(data.astype(like.dtype))


class HyperEncoder(Module):
    """abs() then two stride-2 convolutions down to the hyper latent."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        M, Ch = cfg.latent_channels, cfg.hyper_channels
        self.down1 = Conv2d(M, Ch, DOWN_KERNEL, 2, DOWN_KERNEL // 2, rng, dtype)
        self.down2 = Conv2d(Ch, Ch, DOWN_KERNEL, 2, DOWN_KERNEL // 2, rng, dtype)

    def __call__(self, y: Tensor) -> Tensor:
        return self.down2(T.leaky_relu(self.down1(T.absolute(y)), LEAKY_SLOPE))


class HyperDecoder(Module):
    """Two stride-2 transposed convolutions emitting (mu, sigma) for the latent."""

    def __init__(self, cfg: NetworkConfig, rng, dtype):
        M, Ch = cfg.latent_channels, cfg.hyper_channels
        self.latent_channels = M
        self.up1 = ConvTranspose2d(Ch, Ch, UP_KERNEL, 2, UP_KERNEL // 2 - 1, rng, dtype)
        self.up2 = ConvTranspose2d(Ch, 2 * M, UP_KERNEL, 2, UP_KERNEL // 2 - 1, rng, dtype)

    def __call__(self, z_hat: Tensor) -> tuple[Tensor, Tensor]:
        h = self.up2(T.leaky_relu(self.up1(z_hat), LEAKY_SLOPE))
        M = self.latent_channels
        mu = T.narrow(h, 1, 0, M)
        sigma = T.clamp(T.softplus(T.narrow(h, 1, M, M)), SIGMA_MIN, None)
        return mu, sigma


class DecoderStage(Module):
    """Mirror of EncoderStage: two stride-2 transposed convolutions (4x up)."""

    def __init__(self, cin, cout, n_blocks, rng, dtype, final: bool = False):
        p = UP_KERNEL // 2 - 1
        self.up1 = ConvTranspose2d(cin, cin, UP_KERNEL, 2, p, rng, dtype)
        self.blocks1 = [ResidualBlock(cin, rng, dtype) for _ in range(n_blocks)]
        self.up2 = ConvTranspose2d(cin, cout, UP_KERNEL, 2, p, rng, dtype)
        self.final = final
        self.blocks2 = [] if final else [ResidualBlock(cout, rng, dtype) for _ in range(n_blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.leaky_relu(self.up1(x), LEAKY_SLOPE)
        for blk in self.blocks1:
            h = blk(h)
        h = self.up2(h)
        if not self.final:
            h = T.leaky_relu(h, LEAKY_SLOPE)
            for blk in self.blocks2:
                h = blk(h)
        return h


class JointModel(Module):
    """Full joint compression/denoising network.

    The teacher pass (``teacher_encode``) reuses ``ga0``/``ga1`` directly:
    mutating one mutates the other, by construction.
    """

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([0x6E6A, seed]))
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        C, M = cfg.base_channels, cfg.latent_channels
        nb = cfg.residual_blocks_per_stage
        self.ga0 = EncoderStage(3, C, nb, rng, dtype)
        self.ga1 = EncoderStage(C, M, nb, rng, dtype)
        self.branch = SnrBranch(cfg, rng, dtype)
        self.inject0 = Inject(C, rng, dtype)
        self.inject1 = Inject(M, rng, dtype)
        self.ha = HyperEncoder(cfg, rng, dtype)
        self.hs = HyperDecoder(cfg, rng, dtype)
        self.gs_stage1 = DecoderStage(M, C, nb, rng, dtype)
        self.gs_stage2 = DecoderStage(C, 3, nb, rng, dtype, final=True)
        self.factorized = FactorizedModel(cfg.hyper_channels, dtype=dtype)
        self._assign_names()

    def _assign_names(self):
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {x.shape}")
        if x.shape[2] % PAD_MULTIPLE or x.shape[3] % PAD_MULTIPLE:
            raise ValueError(f"input dims must be multiples of {PAD_MULTIPLE}; pad first")

    def main_encode(self, x: Tensor, s_maps: np.ndarray) -> tuple[Tensor, Tensor]:
        """Noisy image to denoised latents (y0, y) with branch injection."""
        self._check_input(x)
        s0, s1 = self.branch(x, s_maps)
        y0_main = self.ga0(x)
        y0 = T.add(y0_main, self.inject0(s0, y0_main))
        y1_main = self.ga1(y0)
        y = T.add(y1_main, self.inject1(s1, y1_main))
        return y0, y

    def teacher_encode(self, x_gt: Tensor) -> tuple[Tensor, Tensor]:
        """Clean image through the shared encoder stages only (training targets)."""
        self._check_input(x_gt)
        y0_gt = self.ga0(x_gt)
        return y0_gt, self.ga1(y0_gt)

    def hyper_encode(self, y: Tensor) -> Tensor:
        return self.ha(y)

    def hyper_decode(self, z_hat: Tensor) -> tuple[Tensor, Tensor]:
        return self.hs(z_hat)

    def main_decode(self, y_hat: Tensor) -> Tensor:
        """Latent to reconstruction; unclamped so losses keep their gradients."""
        return self.gs_stage2(self.gs_stage1(y_hat))

    def latent_shapes(self, h: int, w: int) -> dict:
        """Latent/hyper spatial dims for a padded (h, w) input."""
        cfg = self.cfg
        return {
            "y0": (cfg.base_channels, h // 4, w // 4),
            "y": (cfg.latent_channels, h // 16, w // 16),
            "z": (cfg.hyper_channels, h // 64, w // 64),
        }


def snr_maps_for(x: Tensor | np.ndarray, kernel_size: int = 5) -> np.ndarray:
    """Convenience: (N, H, W) SNR-map stack for an (N, 3, H, W) batch."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return snr_map_stack(arr, kernel_size=kernel_size)
