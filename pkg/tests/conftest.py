import numpy as np
import pytest

from njcodec.transforms import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> NetworkConfig:
    """Small config used throughout the tests to keep runtimes sane."""
    base = dict(
        base_channels=8,
        latent_channels=12,
        hyper_channels=8,
        residual_blocks_per_stage=1,
        patch_size=4,
        transformer_layers=1,
        attention_heads=2,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def smooth_test_image(rng, h, w):
    """Natural-looking smooth pixels in [0,1]: random low-frequency mixture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3))
    for c in range(3):
        acc = np.zeros((h, w))
        for _ in range(4):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            amp = rng.uniform(0.1, 0.5)
            acc += amp * np.sin(2 * np.pi * fy * yy / h + phase[0]) * np.sin(
                2 * np.pi * fx * xx / w + phase[1]
            )
        img[:, :, c] = acc
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return 0.1 + 0.8 * img
