"""Hand-written forward and backward passes for every layer of the network.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``. Layers work for any floating dtype; the network
runs them in float32 and the gradient checker in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ConvParams:
    """Weights ``[K, D_i, F_y, F_x]``, bias ``[K]`` and stride ``(S_y, S_x)``."""

    weight: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"conv bias shape {self.bias.shape} does not match {self.weight.shape[0]} filters")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class FcParams:
    """Weights ``[out, in]`` and bias ``[out]``."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError(f"fc weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"fc bias shape {self.bias.shape} does not match {self.weight.shape[0]} outputs")

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass(frozen=True)
class LrnParams:
    """Cross-channel LRN: ``x / (bias + alpha * sum_{|c'-c|<=depth_radius} x_c'^2) ** beta``."""

    depth_radius: int = 2
    bias: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.depth_radius < 1:
            raise ValueError("depth_radius must be >= 1")
        if not self.bias > 0:
            raise ValueError("bias must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")


def same_pad_geometry(in_size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) zero padding for SAME convolution/pooling.

    The odd padding cell goes after, so 228 -> 114 -> 57 with a 3x3/2 window.
    """
    if in_size < 1 or kernel < 1 or stride < 1:
        raise ValueError("in_size, kernel and stride must all be >= 1")
    out_size = math.ceil(in_size / stride)
    total = max((out_size - 1) * stride + kernel - in_size, 0)
    before = total // 2
    return out_size, before, total - before


def _same_geometry_2d(h, w, fy, fx, sy, sx):
    ho, pt, pb = same_pad_geometry(h, fy, sy)
    wo, pl, pr = same_pad_geometry(w, fx, sx)
    return ho, wo, (pt, pb), (pl, pr)


# --------------------------------------------------------------------------
# convolution


def _im2col_t(xp, fy, fx, sy, sx, ho, wo):
    # -> (C*Fy*Fx, N*Ho*Wo); channel-major so each copy has contiguous rows
    n, c = xp.shape[:2]
    cols = np.empty((c, fy, fx, n, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for u in range(fy):
        for v in range(fx):
            cols[:, u, v] = xt[:, :, u : u + sy * (ho - 1) + 1 : sy, v : v + sx * (wo - 1) + 1 : sx]
    return cols.reshape(c * fy * fx, n * ho * wo)


def conv2d_forward(x: np.ndarray, p: ConvParams):
    """SAME-padded cross-correlation.

    ``out[n,k,i,j] = bias[k] + sum_{c,u,v} xpad[n, c, i*S_y + u, j*S_x + v] * weight[k,c,u,v]``
    """
    if x.ndim != 4:
        raise ValueError(f"conv input must be 4-D (N, C, H, W), got shape {x.shape}")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ValueError(f"channel mismatch: input has {c} channels, filters expect {p.in_channels}")
    k = p.out_channels
    fy, fx = p.kernel
    sy, sx = p.stride
    ho, wo, (pt, pb), (pl, pr) = _same_geometry_2d(h, w, fy, fx, sy, sx)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = _im2col_t(xp, fy, fx, sy, sx, ho, wo)
    out = p.weight.reshape(k, -1) @ cols
    out += p.bias[:, None]
    out = np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))
    cache = (x.shape, xp.shape, cols, p, (pt, pl))
    return out, cache


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Return ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is False."""
    x_shape, xp_shape, cols, p, (pt, pl) = cache
    n, c, h, w = x_shape
    k = p.out_channels
    fy, fx = p.kernel
    sy, sx = p.stride
    ho = (xp_shape[2] - fy) // sy + 1
    wo = (xp_shape[3] - fx) // sx + 1
    if dout.shape != (n, k, ho, wo):
        raise ValueError(f"dout shape {dout.shape} does not match conv output {(n, k, ho, wo)}")
    dmat = np.ascontiguousarray(dout.transpose(1, 0, 2, 3)).reshape(k, -1)
    dw = (dmat @ cols.T).reshape(p.weight.shape)
    db = dmat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (p.weight.reshape(k, -1).T @ dmat).reshape(c, fy, fx, n, ho, wo)
    dxp = np.zeros((c, n) + xp_shape[2:], dtype=dout.dtype)
    for u in range(fy):
        for v in range(fx):
            dxp[:, :, u : u + sy * (ho - 1) + 1 : sy, v : v + sx * (wo - 1) + 1 : sx] += dcols[:, u, v]
    return dxp[:, :, pt : pt + h, pl : pl + w].transpose(1, 0, 2, 3), dw, db


# --------------------------------------------------------------------------
# max pooling


@dataclass
class PoolCache:
    """Winning positions of a max-pool forward pass.

    The window maximum is found separably: ``col_pick`` holds, for every
    padded row and output column, the offset of the largest of the ``kernel``
    candidates in that row; ``row_pick`` holds, per output cell, the offset of
    the row whose maximum wins. Ties resolve to the smaller offset in both
    passes, which is the smallest flat index overall.
    """

    x_shape: tuple[int, ...]
    padded_shape: tuple[int, ...]
    pad: tuple[int, int]  # (top, left)
    kernel: int
    stride: int
    row_pick: np.ndarray  # [N, C, Ho, Wo]
    col_pick: np.ndarray  # [N, C, Hp, Wo]

    @property
    def out_shape(self) -> tuple[int, ...]:
        return self.row_pick.shape

    def argmax_flat(self) -> np.ndarray:
        """Flat index (row * W + col) of each output cell's winner within its channel plane."""
        n, c, ho, wo = self.row_pick.shape
        s, (pt, pl) = self.stride, self.pad
        prow = np.arange(ho).reshape(-1, 1) * s + self.row_pick
        col = np.take_along_axis(self.col_pick, prow.astype(np.intp), axis=2)
        rows = prow - pt
        cols = np.arange(wo) * s + col - pl
        return (rows * self.x_shape[3] + cols).astype(np.int64)


def _pick(parts, best):
    # offset of the first part equal to best
    pick = np.full(best.shape, len(parts) - 1, dtype=np.int8)
    for i in range(len(parts) - 2, -1, -1):
        np.copyto(pick, np.int8(i), where=parts[i] == best)
    return pick


def maxpool_forward(x: np.ndarray, kernel: int = 3, stride: int = 2, need_argmax: bool = True):
    """SAME max-pooling; padded cells never win.

    Returns ``(y, cache)``; the cache (a ``PoolCache``) is None when
    ``need_argmax`` is False.
    """
    n, c, h, w = x.shape
    ho, wo, (pt, pb), (pl, pr) = _same_geometry_2d(h, w, kernel, kernel, stride, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    span = stride * (wo - 1) + 1
    cparts = [xp[:, :, :, v : v + span : stride] for v in range(kernel)]
    hmax = cparts[0].copy()
    for part in cparts[1:]:
        np.maximum(hmax, part, out=hmax)
    span = stride * (ho - 1) + 1
    rparts = [hmax[:, :, u : u + span : stride] for u in range(kernel)]
    y = rparts[0].copy()
    for part in rparts[1:]:
        np.maximum(y, part, out=y)
    if not need_argmax:
        return y, None
    cache = PoolCache(x.shape, xp.shape, (pt, pl), kernel, stride, _pick(rparts, y), _pick(cparts, hmax))
    return y, cache


def maxpool_backward(dout: np.ndarray, cache: PoolCache) -> np.ndarray:
    """Route each output gradient to its winning input cell (accumulating overlaps)."""
    if cache is None:
        raise ValueError("maxpool_backward needs the cache of a forward pass with need_argmax=True")
    if dout.shape != cache.out_shape:
        raise ValueError(f"dout shape {dout.shape} does not match argmax map {cache.out_shape}")
    n, c, hp, wp = cache.padded_shape
    ho, wo = dout.shape[2:]
    k, s = cache.kernel, cache.stride
    drow = np.zeros((n, c, hp, wo), dtype=dout.dtype)
    span = s * (ho - 1) + 1
    for u in range(k):
        drow[:, :, u : u + span : s] += dout * (cache.row_pick == u)
    dxp = np.zeros(cache.padded_shape, dtype=dout.dtype)
    span = s * (wo - 1) + 1
    for v in range(k):
        dxp[:, :, :, v : v + span : s] += drow * (cache.col_pick == v)
    pt, pl = cache.pad
    h, w = cache.x_shape[2:]
    return dxp[:, :, pt : pt + h, pl : pl + w]


# --------------------------------------------------------------------------
# ReLU


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    # gradient at exactly 0 is 0
    return np.where(x > 0, dout, 0).astype(dout.dtype, copy=False)


# --------------------------------------------------------------------------
# local response normalization


def _channel_window_sum(a: np.ndarray, radius: int) -> np.ndarray:
    c = a.shape[1]
    out = a.copy()
    for d in range(1, radius + 1):
        if d >= c:
            break
        out[:, d:] += a[:, :-d]
        out[:, :-d] += a[:, d:]
    return out


def _pow_neg(s: np.ndarray, beta: float) -> np.ndarray:
    if beta == 0.75:
        r = np.sqrt(s)
        return 1.0 / (r * np.sqrt(r))
    return s ** (-beta)


def lrn_forward(x: np.ndarray, p: LrnParams = LrnParams()):
    if x.ndim != 4:
        raise ValueError(f"LRN input must be 4-D, got shape {x.shape}")
    scale = _channel_window_sum(x * x, p.depth_radius)
    scale *= p.alpha
    scale += p.bias
    inv = _pow_neg(scale, p.beta).astype(x.dtype, copy=False)
    return x * inv, (x, scale, inv, p)


def lrn_backward(dout: np.ndarray, cache) -> np.ndarray:
    x, scale, inv, p = cache
    t = dout * x
    t *= inv
    t /= scale
    dx = _channel_window_sum(t, p.depth_radius)
    dx *= x
    dx *= -2.0 * p.alpha * p.beta
    dx += dout * inv
    return dx


# --------------------------------------------------------------------------
# fully connected


def fc_forward(x: np.ndarray, p: FcParams):
    if x.ndim != 2 or x.shape[1] != p.in_features:
        raise ValueError(f"fc expects input (N, {p.in_features}), got shape {x.shape}")
    y = x @ p.weight.T
    y += p.bias
    return y, (x, p)


def fc_backward(dout: np.ndarray, cache, need_dx: bool = True):
    x, p = cache
    if dout.shape != (x.shape[0], p.out_features):
        raise ValueError(f"dout shape {dout.shape} does not match fc output {(x.shape[0], p.out_features)}")
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ p.weight if need_dx else None
    return dx, dw, db


# --------------------------------------------------------------------------
# softmax


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
