"""Layer primitives for a small batch-first neural network.

Every layer is a stateless description. Parameters live in a flat list owned
by the network; a layer only knows how many arrays it needs and their shapes.
Arrays are batch-first: dense activations are (N, F), convolutional
activations are channels-last, (N, *spatial, C).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Layer:
    kind = "layer"

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def param_shapes(self, in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
        return []

    def init_params(self, in_shape: tuple[int, ...], rng: np.random.Generator) -> list[np.ndarray]:
        return []

    def forward(self, params: list[np.ndarray], x: np.ndarray) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: list[np.ndarray], cache: Any, gy: np.ndarray,
                 need_gx: bool = True) -> tuple[list[np.ndarray], np.ndarray | None]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


def he_uniform(fan_in: int, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class Dense(Layer):
    units: int
    kind = "dense"

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"dense layer expects flat input, got {in_shape}")
        return (self.units,)

    def param_shapes(self, in_shape):
        return [(in_shape[0], self.units), (self.units,)]

    def init_params(self, in_shape, rng):
        w_shape, b_shape = self.param_shapes(in_shape)
        return [he_uniform(in_shape[0], w_shape, rng), np.zeros(b_shape)]

    def forward(self, params, x):
        w, b = params
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"dense input {x.shape} does not match weights {w.shape}")
        return x @ w + b, x

    def backward(self, params, cache, gy, need_gx=True):
        w, _ = params
        x = cache
        return [x.T @ gy, gy.sum(axis=0)], gy @ w.T

    def describe(self):
        return {"kind": self.kind, "units": self.units}


class ReLU(Layer):
    kind = "relu"

    def forward(self, params, x):
        y = np.maximum(x, 0.0)
        return y, x > 0

    def backward(self, params, cache, gy, need_gx=True):
        return [], gy * cache


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, gy, need_gx=True):
        return [], gy.reshape(cache)


def _window_slices(start: int, count: int, stride: int) -> slice:
    return slice(start, start + (count - 1) * stride + 1, stride)


@dataclass
class Conv(Layer):
    """Valid-padding convolution (cross-correlation) over 2 or 3 spatial axes.

    Activations are channels-last, (N, *spatial, C). Weights are stored as
    (k**nd * C_in, C_out), kernel-offset major so the forward pass is one matrix product against
    the im2col matrix.
    """

    nd: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    kind = "conv"

    def __post_init__(self):
        if self.nd not in (2, 3):
            raise ValueError("conv supports 2 or 3 spatial dims")
        if self.kernel < 1 or self.stride < 1 or self.out_channels < 1:
            raise ValueError("kernel, stride and channel count must be positive")
        self._col_cache: dict = {}

    def output_shape(self, in_shape):
        if len(in_shape) != self.nd + 1:
            raise ShapeError(f"conv{self.nd}d expects (*spatial, C), got {in_shape}")
        spatial = [(s - self.kernel) // self.stride + 1 for s in in_shape[:-1]]
        if min(spatial) < 1:
            raise ShapeError(f"input {in_shape} smaller than kernel {self.kernel}")
        return (*spatial, self.out_channels)

    def param_shapes(self, in_shape):
        return [(in_shape[-1] * self.kernel ** self.nd, self.out_channels), (self.out_channels,)]

    def init_params(self, in_shape, rng):
        w_shape, b_shape = self.param_shapes(in_shape)
        return [he_uniform(w_shape[0], w_shape, rng), np.zeros(b_shape)]

    def _im2col(self, x: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
        nd, k, s = self.nd, self.kernel, self.stride
        win = sliding_window_view(x, (k,) * nd, axis=tuple(range(1, 1 + nd)))
        if s > 1:
            win = win[(slice(None),) + (slice(None, None, s),) * nd]
        out_sp = win.shape[1:1 + nd]
        # (N, O..., C, K...) -> (N, O..., K..., C): channels stay contiguous
        order = tuple(range(1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd)) + (1 + nd,)
        cols = np.ascontiguousarray(win.transpose(order)).reshape(-1, x.shape[-1] * k ** nd)
        return cols, out_sp

    def _cols(self, x: np.ndarray):
        # Read-only inputs (training data) are immutable, so their im2col
        # matrix can be reused across epochs.
        if x.flags.writeable:
            return self._im2col(x)
        hit = self._col_cache.get("x")
        if hit is not None and hit[0] is x:
            return hit[1], hit[2]
        cols, out_sp = self._im2col(x)
        self._col_cache["x"] = (x, cols, out_sp)
        return cols, out_sp

    def forward(self, params, x):
        w, b = params
        if x.ndim != self.nd + 2 or x.shape[-1] * self.kernel ** self.nd != w.shape[0]:
            raise ShapeError(f"conv input {x.shape} does not match weights {w.shape}")
        cols, out_sp = self._cols(x)
        y = cols @ w
        y += b
        return y.reshape((x.shape[0],) + tuple(out_sp) + (self.out_channels,)), (cols, x.shape, out_sp)

    def backward(self, params, cache, gy, need_gx=True):
        w, _ = params
        cols, x_shape, out_sp = cache
        nd, k, s = self.nd, self.kernel, self.stride
        g = gy.reshape(-1, self.out_channels)
        gw = cols.T @ g
        gb = g.sum(axis=0)
        if not need_gx:
            return [gw, gb], None
        gcols = (g @ w.T).reshape((x_shape[0],) + tuple(out_sp) + (k,) * nd + (x_shape[-1],))
        if s == k and all(o * k == n for o, n in zip(out_sp, x_shape[1:-1])):
            # Non-overlapping windows tile the input exactly: col2im is a permutation.
            order = [0]
            for i in range(nd):
                order += [1 + i, 1 + nd + i]
            order.append(1 + 2 * nd)
            return [gw, gb], np.ascontiguousarray(gcols.transpose(order)).reshape(x_shape)
        gx = np.zeros(x_shape)
        lead = (slice(None),) * (1 + nd)
        for offset in np.ndindex(*(k,) * nd):
            idx = (slice(None),) + tuple(_window_slices(o, n, s) for o, n in zip(offset, out_sp))
            gx[idx] += gcols[lead + offset]
        return [gw, gb], gx

    def describe(self):
        return {"kind": self.kind, "nd": self.nd, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride}


def _to_blocks(x: np.ndarray, p: int):
    """(N, S..., C) -> (N, O..., C, p**nd) with trailing remainders cropped."""
    nd = x.ndim - 2
    sp = tuple(n // p for n in x.shape[1:-1])
    xc = x[(slice(None),) + tuple(slice(0, o * p) for o in sp)]
    xb = xc.reshape((x.shape[0],) + tuple(v for o in sp for v in (o, p)) + (x.shape[-1],))
    order = (0,) + tuple(1 + 2 * i for i in range(nd)) + (1 + 2 * nd,) + tuple(2 + 2 * i for i in range(nd))
    return xb.transpose(order).reshape((x.shape[0],) + sp + (x.shape[-1], p ** nd)), sp


def _from_blocks(gb: np.ndarray, x_shape: tuple[int, ...], sp: tuple[int, ...], p: int) -> np.ndarray:
    nd = len(sp)
    gb = gb.reshape((x_shape[0],) + sp + (x_shape[-1],) + (p,) * nd)
    order = [0]
    for i in range(nd):
        order += [1 + i, 2 + nd + i]
    order.append(1 + nd)
    gb = gb.transpose(order).reshape((x_shape[0],) + tuple(o * p for o in sp) + (x_shape[-1],))
    if tuple(o * p for o in sp) == tuple(x_shape[1:-1]):
        return np.ascontiguousarray(gb)
    gx = np.zeros(x_shape)
    gx[(slice(None),) + tuple(slice(0, o * p) for o in sp)] = gb
    return gx


@dataclass
class MaxPool(Layer):
    """Non-overlapping max pooling of size ``size``; trailing remainders are cropped."""

    size: int = 2
    kind = "maxpool"

    def output_shape(self, in_shape):
        sp = tuple(s // self.size for s in in_shape[:-1])
        if len(in_shape) < 2 or min(sp) < 1:
            raise ShapeError(f"cannot pool {in_shape} by {self.size}")
        return (*sp, in_shape[-1])

    def forward(self, params, x):
        xb, sp = _to_blocks(x, self.size)
        arg = xb.argmax(axis=-1)[..., None]
        y = np.take_along_axis(xb, arg, axis=-1)[..., 0]
        return y, (x.shape, arg, sp)

    def backward(self, params, cache, gy, need_gx=True):
        x_shape, arg, sp = cache
        gb = np.zeros(gy.shape + (self.size ** len(sp),))
        np.put_along_axis(gb, arg, gy[..., None], axis=-1)
        return [], _from_blocks(gb, x_shape, sp, self.size)

    def describe(self):
        return {"kind": self.kind, "size": self.size}


@dataclass
class AvgPool(MaxPool):
    """Non-overlapping mean pooling; parameter-free down-sampling stage."""

    kind = "avgpool"

    def forward(self, params, x):
        xb, sp = _to_blocks(x, self.size)
        return xb.mean(axis=-1), (x.shape, sp)

    def backward(self, params, cache, gy, need_gx=True):
        x_shape, sp = cache
        n = self.size ** len(sp)
        gb = np.broadcast_to(gy[..., None] / n, gy.shape + (n,))
        return [], _from_blocks(gb, x_shape, sp, self.size)


def layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "dense":
        return Dense(int(d["units"]))
    if kind == "relu":
        return ReLU()
    if kind == "flatten":
        return Flatten()
    if kind == "conv":
        return Conv(int(d["nd"]), int(d["out_channels"]), int(d["kernel"]), int(d["stride"]))
    if kind == "maxpool":
        return MaxPool(int(d["size"]))
    if kind == "avgpool":
        return AvgPool(int(d["size"]))
    raise ValueError(f"unknown layer kind {kind!r}")
