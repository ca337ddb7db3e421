"""DenseNet-style hypernetwork mapping an architecture encoding to 1x1 kernels.

The network is fully convolutional with stride 1 and "same" padding, so the
output has the encoding's spatial extent and ``4*D*N**2`` channels. Each layer
is leaky ReLU followed by a bias-free convolution whose whole kernel is
divided by its Euclidean norm and multiplied by a learned scalar gain. The
stem skips the activation: it would be the identity on a binary encoding, and
leaving it out keeps the map differentiable in ``c`` at zero entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .arch import ArchitectureSpec, EncodingTensor, SearchSpaceConfig, encode
from .params import ParamStore, scaled_orthogonal
from .tensor import Tensor


@dataclass(frozen=True)
class HyperNetSpec:
    in_channels: int
    out_channels: int
    dense_block_layers: tuple[int, ...] = (8, 10, 4)
    growth_rate: int = 10
    stem_channels: int = 20
    slope: float = 0.02

    @classmethod
    def for_config(cls, config: SearchSpaceConfig, **overrides) -> "HyperNetSpec":
        growth = overrides.get("growth_rate", 10)
        base = dict(
            in_channels=config.encoding_channels,
            out_channels=config.hypernet_out_channels,
            stem_channels=2 * growth,
        )
        base.update(overrides)
        return cls(**base)

    def layer_plan(self) -> list[tuple[str, int, int, int]]:
        """``(name, in_channels, out_channels, kernel)`` for every conv, in order."""
        plan = [("stem", self.in_channels, self.stem_channels, 3)]
        width = self.stem_channels
        for b, n_layers in enumerate(self.dense_block_layers):
            for i in range(n_layers):
                plan.append((f"dense{b}.layer{i}", width, self.growth_rate, 3))
                width += self.growth_rate
            if b + 1 < len(self.dense_block_layers):
                plan.append((f"transition{b}", width, width // 2, 1))
                width //= 2
        plan.append(("head", width, self.out_channels, 1))
        return plan

    @property
    def num_layers(self) -> int:
        return len(self.layer_plan())

    @property
    def receptive_radius(self) -> int:
        """Cells reachable in each direction: one per 3x3 layer."""
        return sum(1 for _, _, _, k in self.layer_plan() if k == 3)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "dense_block_layers": list(self.dense_block_layers),
            "growth_rate": self.growth_rate,
            "stem_channels": self.stem_channels,
            "slope": self.slope,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "HyperNetSpec":
        data = dict(data)
        data["dense_block_layers"] = tuple(data["dense_block_layers"])
        return cls(**data)


class HyperNet:
    def __init__(self, spec: HyperNetSpec, params: ParamStore):
        self.spec = spec
        self.params = params

    def __call__(self, c: Tensor) -> Tensor:
        spec = self.spec
        if c.ndim != 4 or c.shape[0] != 1 or c.shape[1] != spec.in_channels:
            raise F.ShapeError(
                f"encoding of shape {c.shape} does not fit a hypernet with {spec.in_channels} input channels"
            )
        plan = iter(spec.layer_plan())
        x = self._layer(next(plan), c, activate=False)
        for b, n_layers in enumerate(spec.dense_block_layers):
            features = [x]
            for _ in range(n_layers):
                features.append(self._layer(next(plan), x))
                x = F.concat_channels(features)
            if b + 1 < len(spec.dense_block_layers):
                x = self._layer(next(plan), x)
        return self._layer(next(plan), x)

    def _layer(self, entry, x: Tensor, activate: bool = True) -> Tensor:
        name, _, _, k = entry
        w = F.normalize_filter(self.params[f"{name}.weight"]) * self.params[f"{name}.gain"]
        if activate:
            x = F.leaky_relu(x, self.spec.slope)
        return F.conv2d(x, w, padding=k // 2)

    def astype(self, dtype) -> "HyperNet":
        return HyperNet(self.spec, self.params.astype(dtype))


def build_hypernet(config: SearchSpaceConfig, rng: np.random.Generator, dtype=np.float32, **spec_overrides) -> HyperNet:
    spec = HyperNetSpec.for_config(config, **spec_overrides)
    if spec.out_channels != config.hypernet_out_channels:
        raise ValueError("hypernet output channels must equal 4*D*N**2 for the bound config")
    params = ParamStore(dtype)
    for name, c_in, c_out, k in spec.layer_plan():
        params.add(f"{name}.weight", scaled_orthogonal(rng, (c_out, c_in, k, k)))
        params.add(f"{name}.gain", np.asarray(np.sqrt(2.0 * c_out)))
    return HyperNet(spec, params)


# -- weight bank -----------------------------------------------------------------------


def weight_output_shape(config: SearchSpaceConfig, n_ch: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Raw hypernet output shape and the flattened ``[N_max, 4*N_max*n_ch]`` view."""
    if n_ch % config.D:
        raise ValueError(f"n_ch={n_ch} is not divisible by D={config.D}")
    raw = (1, config.hypernet_out_channels, config.encoding_rows, n_ch // config.D)
    flat = (config.N_max, 4 * config.N_max * n_ch)
    return raw, flat


def flatten_raw(raw, config: SearchSpaceConfig):
    """Re-read ``[1, 4DN^2, H, L]`` as ``[N_max, 4*N_max*n_ch]``.

    Each encoding column becomes a contiguous ``N_max x 4*D*N_max`` block of
    flat columns, filled from that column's cells in row-major ``(h, channel)``
    order. Flat row ``r`` of a block therefore draws on encoding rows near
    ``r*N_max/N**2``, and a layer's flat window is exactly its encoding window.
    Works on numpy arrays and on Tensors.
    """
    _, K, H, L = raw.shape
    Nm = config.N_max
    block = 4 * config.D * Nm
    x = raw.reshape(K, H, L).transpose(2, 1, 0)  # [L, H, K]
    x = x.reshape(L, Nm, block).transpose(1, 0, 2)  # [Nm, L, block]
    return x.reshape(Nm, L * block)


def _layer_kernel(window, n_in: int, n_out: int, out_channels: int, config: SearchSpaceConfig):
    """Select a layer's kernel elements from its flat window (numpy or Tensor)."""
    D, Nm = config.D, config.N_max
    cols = n_in // D
    x = window.reshape(Nm, cols, 4 * D * Nm)[:n_out, :, : 4 * D]
    x = x.reshape(n_out, cols, 4, D).transpose(0, 2, 1, 3).reshape(4 * n_out, n_in)
    return x[:out_channels]


@dataclass
class WeightBank:
    raw: Tensor
    flat: Tensor
    config: SearchSpaceConfig
    cursor: int = 0
    windows: list[tuple[int, int]] = field(default_factory=list)

    def reset(self) -> None:
        self.cursor = 0
        self.windows = []

    @property
    def remaining(self) -> int:
        return self.flat.shape[1] - self.cursor


def generate_weights(hypernet: HyperNet, c, config: SearchSpaceConfig) -> WeightBank:
    """Run the hypernet once over the whole encoding."""
    if isinstance(c, EncodingTensor):
        c = Tensor(c.data.astype(hypernet.params.dtype))
    elif not isinstance(c, Tensor):
        c = Tensor(np.asarray(c, dtype=hypernet.params.dtype))
    raw = hypernet(c)
    n_ch = raw.shape[3] * config.D
    flat = flatten_raw(raw, config)
    expected = weight_output_shape(config, n_ch)[1]
    if flat.shape != expected:
        raise F.ShapeError(f"flattened weights {flat.shape} != {expected}")
    return WeightBank(raw, flat, config)


def slice_layer_weights(
    bank: WeightBank, n_in: int, n_out: int, out_channels: int | None = None, normalize: bool = True
) -> Tensor:
    """Take the next layer's ``[out_channels, n_in, 1, 1]`` kernel and advance the cursor."""
    cfg = bank.config
    if out_channels is None:
        out_channels = cfg.bottleneck_width(n_in, n_out)
    if n_out > cfg.N_max:
        raise ValueError(f"n_out={n_out} exceeds N_max={cfg.N_max}")
    if out_channels > 4 * n_out:
        raise ValueError(f"out_channels={out_channels} exceeds 4*n_out")
    if n_in % cfg.D:
        raise ValueError(f"n_in={n_in} not divisible by D={cfg.D}")
    width = 4 * cfg.N_max * n_in
    if bank.cursor + width > bank.flat.shape[1]:
        raise IndexError(
            f"weight bank overrun: need {width} columns at {bank.cursor}, only {bank.remaining} left"
        )
    window = bank.flat[:, bank.cursor:bank.cursor + width]
    bank.windows.append((bank.cursor, width))
    bank.cursor += width
    kernel = _layer_kernel(window, n_in, n_out, out_channels, cfg).reshape(out_channels, n_in, 1, 1)
    return F.normalize_filter(kernel) if normalize else kernel


def consumed_indices(arch: ArchitectureSpec) -> list[np.ndarray]:
    """Flat-W element indices read by every layer, following the exact slicing path."""
    cfg = arch.config
    raw_shape, flat_shape = weight_output_shape(cfg, arch.n_ch)
    flat = flatten_raw(np.arange(int(np.prod(raw_shape))).reshape(raw_shape), cfg)
    # map flat-array positions back to positions in the flat (row-major) view
    position = np.empty(flat.size, dtype=np.int64)
    position[flat.reshape(-1)] = np.arange(flat.size)
    out, cursor = [], 0
    for _, _, op, n_in in arch.layers():
        width = 4 * cfg.N_max * n_in
        window = flat[:, cursor:cursor + width]
        picked = _layer_kernel(window, n_in, op.n_out, cfg.bottleneck_width(n_in, op.n_out), cfg)
        out.append(position[picked.reshape(-1)])
        cursor += width
    return out


def encode_and_generate(hypernet: HyperNet, arch: ArchitectureSpec) -> WeightBank:
    return generate_weights(hypernet, encode(arch), arch.config)
