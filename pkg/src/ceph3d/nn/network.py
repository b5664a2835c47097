"""Sequential network with shape checking, versioned caches and CFNET1 blobs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Layer, ShapeError, layer_from_dict

MAGIC = b"CFNET1"


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    version: int
    layer_caches: list


class Sequential:
    """Layer stack with a flat parameter list in declaration order."""

    def __init__(self, input_shape: Sequence[int], layers: Sequence[Layer], seed: int = 0):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        self._slots: list[tuple[int, int]] = []
        for layer, shp in zip(self.layers, self.shapes):
            start = len(self.params)
            self.params.extend(layer.init_params(shp, rng))
            self._slots.append((start, len(self.params)))
        self.version = 0

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def bump(self) -> None:
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.params) or any(a.shape != b.shape for a, b in zip(params, self.params)):
            raise ShapeError("parameter list does not match the network")
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.bump()

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        caches = []
        for layer, (a, b) in zip(self.layers, self._slots):
            x, c = layer.forward(self.params[a:b], x)
            caches.append(c)
        return x, ForwardCache(self.version, caches)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, gy: np.ndarray,
                 need_input_grad: bool = True) -> tuple[list[np.ndarray], np.ndarray | None]:
        if cache.version != self.version:
            raise StaleCacheError("cache was produced before the last parameter update")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = np.asarray(gy, dtype=np.float64)
        n = len(self.layers)
        for i in range(n - 1, -1, -1):
            a, b = self._slots[i]
            need = need_input_grad or any(self._slots[j][0] < self._slots[j][1] for j in range(i))
            pg, g = self.layers[i].backward(self.params[a:b], cache.layer_caches[i], g, need_gx=need)
            grads[a:b] = pg
            if g is None:
                break
        return grads, g

    # --- serialization ---------------------------------------------------

    def descriptor(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.describe() for layer in self.layers],
            "param_shapes": [list(p.shape) for p in self.params],
        }

    def to_bytes(self) -> bytes:
        desc = json.dumps(self.descriptor(), sort_keys=True).encode()
        flat = np.concatenate([p.ravel() for p in self.params]) if self.params else np.zeros(0)
        return MAGIC + struct.pack("<I", len(desc)) + desc + flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Sequential":
        if blob[:6] != MAGIC:
            raise ValueError(f"bad network magic {blob[:6]!r}")
        (n,) = struct.unpack_from("<I", blob, 6)
        desc = json.loads(blob[10:10 + n].decode())
        net = cls(desc["input_shape"], [layer_from_dict(d) for d in desc["layers"]])
        flat = np.frombuffer(blob, dtype="<f8", offset=10 + n)
        if flat.size != net.n_params:
            raise ValueError("parameter payload size mismatch")
        params, pos = [], 0
        for shp in desc["param_shapes"]:
            size = int(np.prod(shp))
            params.append(flat[pos:pos + size].reshape(shp).astype(np.float64))
            pos += size
        net.set_params(params)
        net.version = 0
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Sequential":
        return cls.from_bytes(Path(path).read_bytes())


def mlp(widths: Sequence[int], seed: int = 0) -> Sequential:
    """Fully connected net: ReLU on hidden layers, linear output."""
    from .layers import Dense, ReLU

    layers: list[Layer] = []
    for i, w in enumerate(widths[1:]):
        layers.append(Dense(int(w)))
        if i < len(widths) - 2:
            layers.append(ReLU())
    return Sequential((int(widths[0]),), layers, seed=seed)
