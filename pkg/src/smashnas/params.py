"""Named parameter and buffer storage shared by every model component."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Learnable tensors plus non-learnable numpy buffers, both keyed by name."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.meta: dict = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype, order="C"), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=self.dtype, order="C")
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer as a plain array (buffers prefixed ``buffer:``)."""
        out = {f"param:{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:3]
            extra = sorted(set(arrays) - expected)[:3]
            raise KeyError(f"parameter set mismatch (missing {missing}, unexpected {extra})")
        for key, value in arrays.items():
            kind, name = key.split(":", 1)
            target = self.params[name].data if kind == "param" else self.buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{key}: shape {value.shape} != {target.shape}")
            target[...] = value

    def astype(self, dtype) -> "ParamStore":
        """Deep copy in another float dtype (gradient checks run in float64)."""
        out = ParamStore(dtype)
        out.meta = dict(self.meta)
        for k, v in self.params.items():
            out.add(k, v.data)
        for k, v in self.buffers.items():
            out.add_buffer(k, v)
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.02) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


def scaled_orthogonal(rng: np.random.Generator, shape) -> np.ndarray:
    """Orthogonal rows (or columns) over the flattened fan-in, scaled by 1/sqrt(fan_in)."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return (q[:rows, :cols] / np.sqrt(cols)).reshape(shape)
