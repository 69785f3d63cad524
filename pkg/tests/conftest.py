import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from diffrestore.denoiser import DenoiserConfig


def tiny_config(**overrides) -> DenoiserConfig:
    base = dict(
        base_channels=8,
        blocks=(1, 1, 1, 1),
        prompt_components=3,
        prompt_spatial=(8, 8, 8),
        timestep_embed_dim=16,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def structured_image(seed: int, h: int = 32, w: int = 32) -> np.ndarray:
    """Deterministic synthetic image in [0, 1] with gradients, waves and
    flat regions, so metrics see edges, colour and contrast."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy / h, xx / w
    img = np.stack([
        0.5 + 0.4 * np.sin(2 * np.pi * (2 * xx + rng.uniform())),
        0.5 + 0.4 * np.cos(2 * np.pi * (1.5 * yy + rng.uniform())),
        0.3 + 0.5 * xx * yy,
    ])
    for _ in range(3):
        cy, cx = rng.uniform(0.2, 0.8, 2)
        r = rng.uniform(0.08, 0.2)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r**2
        img[:, mask] = rng.uniform(0, 1, (3, 1))
    return np.clip(img, 0.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    gen = torch.Generator()
    gen.manual_seed(1234)
    return gen
