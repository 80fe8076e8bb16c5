"""Tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in row-major
(C) order; 4-D activations use the (batch, channel, height, width) layout.

All randomness comes from numpy's PCG64 bit generator. PCG64 streams are
fixed by numpy's stability policy for a given seed, so identical seeds give
identical draws on every platform.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float32


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ValueError("dims must be non-empty")
    if len(dims) > 4:
        raise ValueError(f"at most 4 dims supported, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {list(dims)}")
    return dims


def tensor_new(dims: Sequence[int], fill: float = 0.0) -> np.ndarray:
    """Return a float32 tensor of shape ``dims`` filled with ``fill``."""
    dims = _check_dims(dims)
    if not np.isfinite(fill):
        raise ValueError("fill must be finite")
    return np.full(dims, fill, dtype=DTYPE)


def tensor_flatten(t: np.ndarray) -> np.ndarray:
    """Return a 1-D view/copy of ``t`` preserving row-major element order."""
    return np.ascontiguousarray(t).reshape(-1)


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64) for a 64-bit unsigned seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def rng_uniform(rng: np.random.Generator, lo: float, hi: float, dims: Sequence[int]) -> np.ndarray:
    """Draw float32 values uniformly from ``[lo, hi)``."""
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo}, hi={hi}")
    dims = _check_dims(dims)
    u = rng.random(dims, dtype=DTYPE)
    out = (lo + (hi - lo) * u).astype(DTYPE)
    # float32 rounding can land exactly on hi for wide ranges
    return np.where(out >= hi, np.nextafter(DTYPE(hi), DTYPE(lo)), out).astype(DTYPE)
