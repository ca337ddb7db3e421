"""Search-space configuration for memory-bank architectures."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any


@dataclass(frozen=True)
class SearchSpaceConfig:
    """Bounds and discrete choices of the architecture search space.

    ``N`` is the bank channel quantum, ``N_max`` the largest op width, ``D`` the
    depth-compression divisor, ``M`` the maximum number of banks per block and
    ``d_max`` the largest dilation.
    """

    variant: str = "v1"
    N: int = 6
    N_max: int = 42
    D: int = 3
    M: int = 240
    d_max: int = 3
    num_blocks: int = 3
    allowed_filter_sizes: tuple[int, ...] = (3,)
    allowed_groups: tuple[int, ...] = (1,)
    bank_channel_choices: tuple[int, ...] = (6,)
    bottleneck_mode: str = "constant_4"
    param_budget: int = 16_000_000
    banks_per_block_range: tuple[int, int] = (12, 240)
    op_count_budget_range: tuple[int, int] = (4, 40)
    max_reads: int = 240
    max_filter_extent: int = 9
    conv_mask_all_weight: float = 2.0
    in_channels: int = 3
    num_classes: int = 10

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid SearchSpaceConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.variant not in ("v1", "v2"):
            out.append(f"variant must be 'v1' or 'v2', got {self.variant!r}")
        if self.N < 1 or self.N_max < self.N or self.N_max % self.N:
            out.append(f"N_max={self.N_max} must be a positive multiple of N={self.N}")
        if self.D < 1:
            out.append("D must be >= 1")
        if self.M < 1:
            out.append("M must be >= 1")
        if self.d_max < 1:
            out.append("d_max must be >= 1")
        if self.num_blocks < 1:
            out.append("num_blocks must be >= 1")
        if self.bottleneck_mode not in ("constant_4", "v2_capped_2"):
            out.append(f"unknown bottleneck_mode {self.bottleneck_mode!r}")
        if not self.bank_channel_choices or any(
            c % self.N or c > self.N_max or c < self.N for c in self.bank_channel_choices
        ):
            out.append("bank_channel_choices must be multiples of N no larger than N_max")
        lo, hi = self.banks_per_block_range
        if not 1 <= lo <= hi <= self.M:
            out.append("banks_per_block_range must satisfy 1 <= lo <= hi <= M")
        lo, hi = self.op_count_budget_range
        if not 0 <= lo <= hi:
            out.append("op_count_budget_range must satisfy 0 <= lo <= hi")
        if self.max_reads < 1:
            out.append("max_reads must be >= 1")
        if self.variant == "v1" and (self.allowed_filter_sizes != (3,) or self.allowed_groups != (1,)):
            out.append("v1 uses a single 3x3 convolution with one group")
        return out

    @property
    def encoding_rows(self) -> int:
        return (self.N_max // self.N) ** 2

    @property
    def hypernet_out_channels(self) -> int:
        return 4 * self.D * self.N * self.N

    @property
    def encoding_channels(self) -> int:
        base = 2 * self.M + self.d_max
        if self.variant == "v1":
            return base
        return base + 3 * self.d_max + 4 * len(self.allowed_filter_sizes) + len(self.allowed_groups) + 4

    @property
    def max_bottleneck(self) -> int:
        return 4 * self.N_max if self.bottleneck_mode == "constant_4" else 2 * self.N_max

    @property
    def max_filter_size(self) -> int:
        return max(self.allowed_filter_sizes)

    @property
    def max_bank_channels(self) -> int:
        return max(self.bank_channel_choices)

    def bottleneck_width(self, n_in: int, n_out: int) -> int:
        """Output channels of an op's generated 1x1 convolution."""
        if self.bottleneck_mode == "constant_4":
            return 4 * n_out
        return min(n_in, 2 * n_out)

    def replace(self, **changes) -> "SearchSpaceConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SearchSpaceConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown search-space keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)

    # -- presets ---------------------------------------------------------------

    @classmethod
    def v1(cls, **overrides) -> "SearchSpaceConfig":
        """Fixed bank width, single dilated 3x3 conv per op, bottleneck ratio 4."""
        return cls(**overrides)

    @classmethod
    def v2(cls, **overrides) -> "SearchSpaceConfig":
        """Variable bank widths, 2x2 conv array, filter sizes, groups."""
        base = dict(
            variant="v2",
            N=8,
            N_max=64,
            D=4,
            M=32,
            d_max=4,
            allowed_filter_sizes=(3, 5, 7),
            allowed_groups=(1, 2, 4, 8),
            bank_channel_choices=(8, 16, 24, 32, 40, 48, 56, 64),
            bottleneck_mode="v2_capped_2",
            banks_per_block_range=(4, 32),
            op_count_budget_range=(4, 32),
            max_reads=32,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "SearchSpaceConfig":
        """Small v1-style space that trains in minutes on one CPU core."""
        base = dict(
            N=4,
            N_max=16,
            D=2,
            M=8,
            d_max=3,
            num_blocks=2,
            bank_channel_choices=(4,),
            param_budget=1_000_000,
            banks_per_block_range=(3, 8),
            op_count_budget_range=(1, 6),
            max_reads=8,
            in_channels=1,
        )
        base.update(overrides)
        return cls(**base)


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    return value
