"""Interval group scan mechanism.

Splits the channel axis into four groups, flattens each group into a sequence
along one of four directions (left-right, right-left, top-bottom, bottom-top)
over either the spatial grid or the spectral layout, runs an independent
selective scan per group, undoes the flattening, re-interleaves the groups
into their original channel positions, and scales the result with a channel
attention computed from the pre-split input.

Grouping modes:
  interval — group i holds channels {i, i+4, i+8, ...}, so every group spans
             the whole spectrum sparsely;
  adjacent — group i holds the contiguous quarter [i*k/4, (i+1)*k/4);
  all      — no grouping: all four directional scans see the full channel
             width and their outputs are averaged (modeling choice) before
             attention.

Sequence layouts (group of shape [p, p, c], batched in front):
  spatial  — tokens are channel vectors (dim c), sequence is the row-major
             pixel order (length p*p); top-bottom is the column-major order,
             and the right-left/bottom-up directions are exact reversals.
  spectral — tokens are grid rows (dim p), sequence enumerates (column, band)
             pairs (length p*c); left-right is column-major over bands,
             top-bottom is band-major, reversals as above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from igmamba import ssm
from igmamba import tensor as T
from igmamba.errors import ConfigError, ShapeError
from igmamba.ssm import SsmParams, init_ssm_params
from igmamba.tensor import Tensor

GROUP_COUNT = 4
DIRECTIONS = ("lr", "rl", "tb", "bt")
GROUPING_MODES = ("interval", "adjacent", "all")
DOMAINS = ("spatial", "spectral")


@dataclass(frozen=True)
class ScanOrder:
    direction: str  # lr | rl | tb | bt
    domain: str  # spatial | spectral

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown scan direction '{self.direction}'")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown scan domain '{self.domain}'")


# -- channel grouping --------------------------------------------------------


def group_channel_indices(k, mode):
    """Source channel indices per group; groups partition 0..k-1 except in
    'all' mode where every group sees the full width."""
    if mode not in GROUPING_MODES:
        raise ConfigError(f"unknown grouping mode '{mode}'")
    if k % GROUP_COUNT != 0:
        raise ConfigError(f"channel count {k} not divisible by {GROUP_COUNT}")
    if mode == "interval":
        return [np.arange(i, k, GROUP_COUNT) for i in range(GROUP_COUNT)]
    if mode == "adjacent":
        quarter = k // GROUP_COUNT
        return [np.arange(i * quarter, (i + 1) * quarter) for i in range(GROUP_COUNT)]
    return [np.arange(k) for _ in range(GROUP_COUNT)]


def interval_split(f, mode="interval"):
    """Split [..., k] into the four group tensors for ``mode``."""
    k = f.shape[-1]
    return [T.take(f, idx, axis=-1) for idx in group_channel_indices(k, mode)]


def interval_concat(groups, mode="interval"):
    """Inverse of interval_split: restore original channel positions.

    In 'all' mode the four full-width tensors are averaged instead.
    """
    if len(groups) != GROUP_COUNT:
        raise ShapeError(f"interval_concat expects {GROUP_COUNT} groups, got {len(groups)}")
    if mode == "all":
        total = groups[0]
        for g in groups[1:]:
            total = total + g
        return total * (1.0 / GROUP_COUNT)
    k = sum(g.shape[-1] for g in groups)
    order = np.concatenate(group_channel_indices(k, mode))
    inverse = np.empty(k, dtype=np.int64)
    inverse[order] = np.arange(k)
    return T.take(T.concat(groups, axis=-1), inverse, axis=-1)


# -- sequence flattening -----------------------------------------------------


def flatten_for_scan(g, order):
    """Flatten a batched group [batch, p, p, c] into sequences [batch, L, d_tok]."""
    if g.ndim != 4 or g.shape[1] != g.shape[2]:
        raise ShapeError(f"flatten_for_scan: expected [batch, p, p, c], got {g.shape}")
    batch, p, _, c = g.shape
    if order.domain == "spatial":
        if order.direction in ("tb", "bt"):
            g = T.permute(g, (0, 2, 1, 3))  # column-major traversal
        seq = T.reshape(g, (batch, p * p, c))
    else:
        if order.direction in ("lr", "rl"):
            seq = T.reshape(T.permute(g, (0, 2, 3, 1)), (batch, p * c, p))
        else:
            seq = T.reshape(T.permute(g, (0, 3, 2, 1)), (batch, c * p, p))
    if order.direction in ("rl", "bt"):
        seq = T.flip(seq, 1)
    return seq


def unflatten_after_scan(seq, order, p, c):
    """Inverse of flatten_for_scan, returning [batch, p, p, c]."""
    batch = seq.shape[0]
    if order.direction in ("rl", "bt"):
        seq = T.flip(seq, 1)
    if order.domain == "spatial":
        grid = T.reshape(seq, (batch, p, p, c))
        if order.direction in ("tb", "bt"):
            grid = T.permute(grid, (0, 2, 1, 3))
        return grid
    if order.direction in ("lr", "rl"):
        return T.permute(T.reshape(seq, (batch, p, c, p)), (0, 3, 1, 2))
    return T.permute(T.reshape(seq, (batch, c, p, p)), (0, 3, 2, 1))


# -- the mechanism -----------------------------------------------------------


@dataclass
class IgsmParams:
    """Four per-direction scan parameter sets plus the channel attention."""

    scans: list  # 4 x SsmParams
    atten_w1: Tensor  # [k, k/4]
    atten_b1: Tensor  # [k/4]
    atten_w2: Tensor  # [k/4, k]
    atten_b2: Tensor  # [k]
    mode: str

    def named_tensors(self):
        for i, s in enumerate(self.scans):
            for field, tensor in s.fields():
                yield f"g{i}.{field}", tensor
        yield "atten.w1", self.atten_w1
        yield "atten.b1", self.atten_b1
        yield "atten.w2", self.atten_w2
        yield "atten.b2", self.atten_b2


def scan_width(k, domain, mode, p):
    """Token dimension seen by each group's scan."""
    if domain == "spectral":
        return p
    return k if mode == "all" else k // GROUP_COUNT


def init_igsm_params(k, domain, mode, p, states, rng, dtype=np.float32):
    if k % GROUP_COUNT != 0:
        raise ConfigError(f"channel count {k} not divisible by {GROUP_COUNT}")
    width = scan_width(k, domain, mode, p)
    scans = [init_ssm_params(width, states, rng, dtype) for _ in range(GROUP_COUNT)]
    hidden = k // GROUP_COUNT
    bound1 = 1.0 / np.sqrt(k)
    bound2 = 1.0 / np.sqrt(hidden)
    return IgsmParams(
        scans=scans,
        atten_w1=Tensor(rng.uniform(-bound1, bound1, (k, hidden)).astype(dtype), requires_grad=True),
        atten_b1=Tensor(rng.uniform(-bound1, bound1, hidden).astype(dtype), requires_grad=True),
        atten_w2=Tensor(rng.uniform(-bound2, bound2, (hidden, k)).astype(dtype), requires_grad=True),
        atten_b2=Tensor(rng.uniform(-bound2, bound2, k).astype(dtype), requires_grad=True),
        mode=mode,
    )


def channel_attention(f, params):
    """Per-sample channel weights in (0,1) from the spatially pooled input."""
    pooled = T.reduce_mean(T.reduce_mean(f, axis=1), axis=1)  # [batch, k]
    hidden = T.silu(T.linear(pooled, params.atten_w1, params.atten_b1))
    return T.sigmoid(T.linear(hidden, params.atten_w2, params.atten_b2))


def igsm_forward(f, params, domain):
    """Grouped four-directional selective scan of ``f`` [batch, p, p, k]."""
    if f.ndim != 4 or f.shape[1] != f.shape[2]:
        raise ShapeError(f"igsm_forward: expected [batch, p, p, k], got {f.shape}")
    if domain not in DOMAINS:
        raise ConfigError(f"unknown scan domain '{domain}'")
    p, k = f.shape[1], f.shape[3]
    if k % GROUP_COUNT != 0:
        raise ConfigError(f"channel count {k} not divisible by {GROUP_COUNT}")
    width = scan_width(k, domain, params.mode, p)
    if params.scans[0].channels != width:
        raise ShapeError(
            f"igsm_forward: scan width {params.scans[0].channels} does not match "
            f"input-derived width {width} (domain={domain}, mode={params.mode})"
        )

    orders = [ScanOrder(direction, domain) for direction in DIRECTIONS]
    groups = interval_split(f, params.mode)
    group_width = groups[0].shape[-1]
    sequences = [flatten_for_scan(g, o) for g, o in zip(groups, orders)]

    stacked_x = T.stack(sequences, axis=1)  # [batch, 4, L, D]
    stacked = [
        T.stack([getattr(s, name) for s in params.scans], axis=0)
        for name in ("a_log", "dt_w", "dt_b", "b_w", "c_w", "d_skip")
    ]
    scanned = ssm.scan_stacked(stacked_x, *stacked)

    outputs = [
        unflatten_after_scan(T.select(scanned, i, axis=1), orders[i], p, group_width)
        for i in range(GROUP_COUNT)
    ]
    merged = interval_concat(outputs, params.mode)
    weights = channel_attention(f, params)
    return T.scale_channels(merged, weights)
