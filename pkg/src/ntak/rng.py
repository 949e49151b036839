"""Process-wide seedable randomness.

Every stochastic draw in the package (weight init, dropout masks, noise
channels, diffusion noise, dataset/pose sampling) goes through the single
generator held here, so `seed(k)` makes a whole run reproducible bit for
bit.  The generator is numpy's PCG64.
"""

import numpy as np

_gen = np.random.default_rng(0)


def seed(value):
    """Reset the global generator to a fixed seed."""
    global _gen
    _gen = np.random.default_rng(int(value))


def generator():
    """The live numpy Generator (for shuffles, choice, etc.)."""
    return _gen


def normal(shape, std=1.0, dtype=np.float32):
    return (_gen.standard_normal(size=shape) * std).astype(dtype, copy=False)


def uniform(shape, low=0.0, high=1.0, dtype=np.float32):
    return _gen.uniform(low, high, size=shape).astype(dtype, copy=False)


def integers(low, high, size=None):
    """Uniform ints in [low, high)."""
    return _gen.integers(low, high, size=size)


def trunc_normal(shape, std=0.02, clip=2.0, dtype=np.float32):
    """Normal(0, std) with draws outside clip*std redrawn."""
    out = _gen.standard_normal(size=shape)
    bad = np.abs(out) > clip
    # a couple of redraw rounds leaves ~1e-5 of the mass clipped
    for _ in range(4):
        if not bad.any():
            break
        out[bad] = _gen.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > clip
    return (np.clip(out, -clip, clip) * std).astype(dtype, copy=False)
