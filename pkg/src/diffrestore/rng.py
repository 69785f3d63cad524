"""Seed derivation for independent, reproducible noise streams."""

from __future__ import annotations

import numpy as np
import torch


def spawn_seed(seed: int, *keys: int) -> int:
    """Derive a well-mixed child seed from a base seed and integer keys.

    Used to give every image / tile / worker its own independent stream, so
    parallel execution order cannot change results.
    """
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def torch_generator(seed: int, *keys: int) -> torch.Generator:
    """CPU torch generator seeded via :func:`spawn_seed`."""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(spawn_seed(seed, *keys))
    return gen


def numpy_generator(seed: int, *keys: int) -> np.random.Generator:
    """Numpy generator seeded via :func:`spawn_seed`."""
    return np.random.default_rng(spawn_seed(seed, *keys))
