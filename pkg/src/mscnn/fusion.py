"""Gated fusion of the current and reference branch outputs.

The two feature maps are concatenated, average-pooled (shape preserving),
mixed by a 1x1 convolution and squashed by a sigmoid into a gate map G in
(0,1). The current map is weighted by G and the reference by its exact
complement 1-G. The default additive mode blends them as a convex
combination; the multiplicative mode takes the elementwise product of the
two gated maps instead.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import ConvSpec

MODES = ("additive", "multiplicative")


@dataclass
class FusionParameters:
    gate_weights: np.ndarray  # (c, 2c, 1, 1)
    gate_bias: np.ndarray  # (c,)
    pool_window: int = 3
    mode: str = "additive"

    def __post_init__(self):
        c = self.gate_weights.shape[0]
        if self.gate_weights.shape != (c, 2 * c, 1, 1):
            raise ValueError(
                f"gate_weights must be (c, 2c, 1, 1), got {self.gate_weights.shape}")
        if self.gate_bias.shape != (c,):
            raise ValueError(f"gate_bias must be ({c},), got {self.gate_bias.shape}")
        if self.pool_window < 1 or self.pool_window % 2 == 0:
            raise ValueError(f"pool_window must be odd, got {self.pool_window}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def channels(self):
        return self.gate_weights.shape[0]

    def copy(self):
        return FusionParameters(self.gate_weights.copy(), self.gate_bias.copy(),
                                self.pool_window, self.mode)

    def zeros_like(self):
        return FusionParameters(np.zeros_like(self.gate_weights),
                                np.zeros_like(self.gate_bias),
                                self.pool_window, self.mode)

    def astype(self, dtype):
        return FusionParameters(self.gate_weights.astype(dtype),
                                self.gate_bias.astype(dtype),
                                self.pool_window, self.mode)


def init_fusion(channels, seed, pool_window=3, mode="additive", dtype=np.float32):
    """Gate weights scaled by 1/sqrt(2c); bias starts at zero."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((channels, 2 * channels, 1, 1)) / np.sqrt(2 * channels)
    return FusionParameters(w.astype(dtype), np.zeros(channels, dtype),
                            pool_window, mode)


@dataclass
class GateBundle:
    """Forward bookkeeping: the channel concat, its pooled form and the
    gate map G. The current/reference gates are G and its exact
    complement 1-G."""
    fused_concat: np.ndarray
    pooled: np.ndarray
    gate: np.ndarray

    @property
    def gate_cur(self):
        return self.gate

    @property
    def gate_ref(self):
        return 1.0 - self.gate


def _gate_spec(params):
    c = params.channels
    return ConvSpec(2 * c, c, 1)


def fuse_forward(f_cur, f_ref, params):
    """Fuse two equally shaped maps. Returns (fused, GateBundle)."""
    if f_cur.shape != f_ref.shape:
        raise ValueError(f"branch shapes differ: {f_cur.shape} vs {f_ref.shape}")
    if f_cur.ndim != 4 or f_cur.shape[1] != params.channels:
        raise ValueError(f"expected (n,{params.channels},h,w) maps, got {f_cur.shape}")
    concat = np.concatenate([f_cur, f_ref], axis=1)
    pooled = ops.avgpool_same(concat, params.pool_window)
    z = ops.conv2d(pooled, params.gate_weights, params.gate_bias, _gate_spec(params))
    gate = ops.sigmoid(z)
    bundle = GateBundle(concat, pooled, gate)
    gated_cur = ops.hadamard(gate, f_cur)
    gated_ref = ops.hadamard(1.0 - gate, f_ref)
    if params.mode == "additive":
        fused = gated_cur + gated_ref
    else:
        fused = ops.hadamard(gated_cur, gated_ref)
    return fused, bundle


def fuse_backward(bundle, f_cur, f_ref, params, grad_fused):
    """Exact gradients through the gate, pooling, concat and product paths.

    Returns (grad_f_cur, grad_f_ref, FusionParameters-shaped gradients).
    """
    g = bundle.gate
    if grad_fused.shape != f_cur.shape:
        raise ValueError(f"grad shape {grad_fused.shape} does not match {f_cur.shape}")
    if params.mode == "additive":
        d_gated_cur = grad_fused
        d_gated_ref = grad_fused
    else:
        d_gated_cur = grad_fused * ((1.0 - g) * f_ref)
        d_gated_ref = grad_fused * (g * f_cur)
    grad_cur = g * d_gated_cur
    grad_ref = (1.0 - g) * d_gated_ref
    d_gate = f_cur * d_gated_cur - f_ref * d_gated_ref
    dz = ops.sigmoid_backward(d_gate, g)
    d_pooled, gw, gb = ops.conv2d_backward(bundle.pooled, params.gate_weights,
                                           dz, _gate_spec(params))
    d_concat = ops.avgpool_same(d_pooled, params.pool_window)
    c = params.channels
    grad_cur = grad_cur + d_concat[:, :c]
    grad_ref = grad_ref + d_concat[:, c:]
    grads = FusionParameters(gw, gb, params.pool_window, params.mode)
    return grad_cur, grad_ref, grads


def gate_statistics(bundle):
    """Per-channel mean/min/max of the gate map (training diagnostics)."""
    g = bundle.gate
    axes = (0, 2, 3)
    return {
        "mean": g.mean(axis=axes),
        "min": g.min(axis=axes),
        "max": g.max(axis=axes),
    }


def mirrored(params):
    """Parameters that make fusion invariant under swapping the branches:
    gate weight halves swapped and negated, bias negated (so the gate maps
    to its complement)."""
    c = params.channels
    w = params.gate_weights
    swapped = -np.concatenate([w[:, c:], w[:, :c]], axis=1)
    return FusionParameters(np.ascontiguousarray(swapped), -params.gate_bias,
                            params.pool_window, params.mode)
