"""Seeded generators.

All randomness goes through numpy's Philox, a 64-bit counter-based generator,
keyed by ``(seed, *stream)`` so independent components never share a stream.
"""

from __future__ import annotations

import numpy as np
import torch


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))


def torch_generator(seed: int, *stream: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(make_rng(seed, *stream).integers(0, 2**62)))
    return g
