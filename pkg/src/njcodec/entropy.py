"""Quantization, discrete likelihood models, and coder-facing CDF tables.

The main latent is modeled per element as a conditional Gaussian whose
(mu, sigma) come from the hyper decoder; the hyper latent uses a trained
per-channel logistic.  Both are evaluated as integer-bin masses so the
training rate matches what the coder can actually achieve, and both are
discretized into fixed-point tables for the rANS coder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Parameter, Tensor

PRECISION_BITS = 16
TOTAL_FREQ = 1 << PRECISION_BITS
SYMBOL_MIN = -64
SYMBOL_MAX = 63
SIGMA_MIN = 0.11
LIKELIHOOD_FLOOR = 2.0**-50
# bins kept per side of a table's center; beyond this the tail mass is
# negligible at 16-bit precision and the escape slot takes over
_GAUSS_TAIL_Z = 4.5
_LOGISTIC_TAIL_Z = 12.0

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class QuantMode(Enum):
    TRAIN = "train"
    INFER = "infer"


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    return np.where(v >= 0, np.floor(v + 0.5), np.ceil(v - 0.5))


def quantize(v: Tensor, mode: QuantMode, rng: np.random.Generator | None = None) -> Tensor:
    """Additive-uniform-noise proxy in training, hard rounding at inference.

    Train mode keeps the identity gradient (the noise is a constant);
    infer mode returns a detached tensor.
    """
    if mode is QuantMode.TRAIN:
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        u = rng.uniform(-0.5, 0.5, size=v.shape).astype(v.dtype)
        return T.add(v, Tensor(u))
    return Tensor(round_half_away(v.data).astype(v.dtype))


@dataclass
class GaussianParams:
    """Per-element conditional Gaussian (mu, sigma) for the main latent."""

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share a shape")
        if np.any(self.sigma.data < SIGMA_MIN * (1.0 - 1e-6)):
            raise ValueError(f"sigma below the {SIGMA_MIN} floor")


class FactorizedModel:
    """Independent per-channel logistic model for the hyper latent.

    Holds one (location, log-scale) parameter pair per channel; both are
    trained jointly with the network through the rate term.
    """

    def __init__(self, channels: int, dtype=np.float32, prefix: str = "factorized"):
        self.channels = channels
        self.loc = Parameter(np.zeros(channels, dtype=dtype), name=f"{prefix}.loc")
        self.log_scale = Parameter(np.zeros(channels, dtype=dtype), name=f"{prefix}.log_scale")

    def parameters(self):
        return [self.loc, self.log_scale]

    def named_parameters(self, prefix: str = ""):
        for key, p in (("loc", self.loc), ("log_scale", self.log_scale)):
            yield (f"{prefix}.{key}" if prefix else key), p

    def scale_np(self) -> np.ndarray:
        return np.exp(self.log_scale.data.astype(np.float64))

    def loc_np(self) -> np.ndarray:
        return self.loc.data.astype(np.float64)


def _bin_mass_gaussian(y: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    d = T.sub(y, mu)
    hi = T.erf(T.mul(T.div(T.add(d, 0.5), sigma), _INV_SQRT2))
    lo = T.erf(T.mul(T.div(T.sub(d, 0.5), sigma), _INV_SQRT2))
    return T.mul(T.sub(hi, lo), 0.5)


def likelihood_gaussian(y_hat: Tensor, params: GaussianParams) -> Tensor:
    """Integer-bin Gaussian mass around each element, floored for safety."""
    if y_hat.shape != params.mu.shape:
        raise ValueError(f"shape mismatch: {y_hat.shape} vs {params.mu.shape}")
    p = _bin_mass_gaussian(y_hat, params.mu, params.sigma)
    return T.clamp(p, LIKELIHOOD_FLOOR, None)


def likelihood_factorized(z_hat: Tensor, model: FactorizedModel) -> Tensor:
    """Integer-bin logistic mass per channel of an (N, C, H, W) hyper latent."""
    if z_hat.ndim != 4 or z_hat.shape[1] != model.channels:
        raise ValueError(f"expected (N, {model.channels}, H, W), got {z_hat.shape}")
    shape = z_hat.shape
    loc = T.expand(T.reshape(model.loc, (1, model.channels, 1, 1)), shape)
    log_scale = T.expand(T.reshape(model.log_scale, (1, model.channels, 1, 1)), shape)
    inv_scale = T.exp(T.neg(log_scale))
    d = T.sub(z_hat, loc)
    hi = T.sigmoid(T.mul(T.add(d, 0.5), inv_scale))
    lo = T.sigmoid(T.mul(T.sub(d, 0.5), inv_scale))
    return T.clamp(T.sub(hi, lo), LIKELIHOOD_FLOOR, None)


def rate_bits(likelihoods: Tensor) -> Tensor:
    """Total information content, -sum(log2 p), as a differentiable scalar."""
    if np.any(likelihoods.data <= 0):
        raise ValueError("likelihoods must be positive")
    return T.mul(T.tensor_sum(T.log(likelihoods)), -1.0 / math.log(2.0))


# ---------------------------------------------------------------------------
# fixed-point tables for the coder


class CdfTable:
    """Fixed-point frequency table over integer symbols [smin, smax] plus escape.

    Frequencies total exactly 2**16, every in-range symbol keeps frequency
    >= 1, and the final slot is the escape used for out-of-range symbols.
    """

    __slots__ = ("smin", "smax", "freqs", "cum", "cum_list")

    def __init__(self, smin: int, smax: int, freqs):
        freqs = np.asarray(freqs, dtype=np.int64)
        n_symbols = smax - smin + 1
        if n_symbols < 1 or len(freqs) != n_symbols + 1:
            raise ValueError("freqs must cover [smin, smax] plus one escape slot")
        if np.any(freqs[:-1] < 1) or freqs[-1] < 0:
            raise ValueError("in-range frequencies must be >= 1 and escape >= 0")
        if int(freqs.sum()) != TOTAL_FREQ:
            raise ValueError(f"frequencies must total {TOTAL_FREQ}, got {int(freqs.sum())}")
        self.smin = smin
        self.smax = smax
        self.freqs = freqs
        self.cum = np.concatenate(([0], np.cumsum(freqs)))
        self.cum_list = self.cum.tolist()

    @property
    def escape_index(self) -> int:
        return len(self.freqs) - 1

    def index_of(self, symbol: int) -> int:
        """Slot index for a symbol; the escape slot when out of range."""
        if self.smin <= symbol <= self.smax:
            return symbol - self.smin
        return self.escape_index

    def __eq__(self, other):
        return (
            isinstance(other, CdfTable)
            and self.smin == other.smin
            and self.smax == other.smax
            and np.array_equal(self.freqs, other.freqs)
        )


def _integerize(masses: np.ndarray) -> np.ndarray:
    """Largest-remainder rounding of bin masses to frequencies totalling 2**16.

    Every slot is kept >= 1 so the coder can always address it; the total is
    then repaired by trimming the largest slots or topping up by remainder.
    """
    raw = masses * TOTAL_FREQ
    f = np.floor(raw).astype(np.int64)
    rem = raw - f
    f = np.maximum(f, 1)
    diff = TOTAL_FREQ - int(f.sum())
    if diff > 0:
        order = np.argsort(-rem, kind="stable")
        f[order[:diff]] += 1
        diff_left = diff - min(diff, len(order))
        while diff_left > 0:  # only reachable for degenerate tiny tables
            f[int(np.argmax(rem))] += diff_left
            diff_left = 0
    while diff < 0:
        idx = int(np.argmax(f))
        take = min(-diff, int(f[idx]) - 1)
        if take <= 0:
            raise ValueError("cannot normalize table frequencies")
        f[idx] -= take
        diff += take
    return f


def _gauss_edge_cdf(edges: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    return 0.5 * (1.0 + special.erf((edges - mu) / (sigma * math.sqrt(2.0))))


def _logistic_edge_cdf(edges: np.ndarray, loc: float, scale: float) -> np.ndarray:
    return special.expit((edges - loc) / scale)


def _build_table(mu: float, spread: float, tail_z: float, edge_cdf) -> CdfTable:
    center = int(np.clip(round_half_away(np.asarray(mu)), SYMBOL_MIN, SYMBOL_MAX))
    half = max(1, int(math.ceil(tail_z * spread + 1.0)))
    smin = max(SYMBOL_MIN, center - half)
    smax = min(SYMBOL_MAX, center + half)
    edges = np.arange(smin, smax + 2, dtype=np.float64) - 0.5
    cdf = edge_cdf(edges, mu, spread)
    masses = np.diff(cdf)
    escape = max(0.0, 1.0 - float(masses.sum()))
    freqs = _integerize(np.concatenate((masses, [escape])))
    return CdfTable(smin, smax, freqs)


def build_gaussian_cdf_tables(mu: np.ndarray, sigma: np.ndarray) -> list[CdfTable]:
    """One table per element, in C-order of the (mu, sigma) arrays."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if mu.shape != sigma.shape:
        raise ValueError("mu and sigma must match")
    if np.any(sigma < SIGMA_MIN * (1.0 - 1e-6)):
        raise ValueError(f"sigma below the {SIGMA_MIN} floor")
    return [
        _build_table(float(m), float(s), _GAUSS_TAIL_Z, _gauss_edge_cdf)
        for m, s in zip(mu, sigma)
    ]


def build_factorized_cdf_tables(model: FactorizedModel) -> list[CdfTable]:
    """One table per hyper channel from the trained logistic parameters."""
    locs = model.loc_np()
    scales = model.scale_np()
    return [
        _build_table(float(l), float(s), _LOGISTIC_TAIL_Z, _logistic_edge_cdf)
        for l, s in zip(locs, scales)
    ]
