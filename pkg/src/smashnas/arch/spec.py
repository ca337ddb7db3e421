"""Architecture descriptions: ops, blocks, whole networks.

An op reads the channel-concatenation of the banks in ``read_set`` and writes
its ``n_out`` output channels into the banks of ``write_set``: the output is
split into consecutive chunks of ``bank_channels`` channels and chunk ``j`` is
added to the ``j``-th bank of the (sorted) write set. Bank 0 of every block
holds the stem or transition output, so it is never empty.

The op body is an array of up to four convolutions, two parallel paths of two
convolutions each (positions 0,1 and 2,3). ``filter_sizes`` and ``dilations``
list one entry per active position, in position order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterator

from .config import SearchSpaceConfig

FORMAT_NAME = "smashnas.architecture"
FORMAT_VERSION = 1

PATHS = ((0, 1), (2, 3))
V1_MASK = (True, False, False, False)


@dataclass(frozen=True)
class OpSpec:
    read_set: tuple[int, ...]
    write_set: tuple[int, ...]
    n_out: int
    dilations: tuple[int, ...] = (1,)
    filter_sizes: tuple[int, ...] = (3,)
    conv_mask: tuple[bool, bool, bool, bool] = V1_MASK
    groups: int = 1

    def __post_init__(self):
        object.__setattr__(self, "read_set", tuple(sorted(self.read_set)))
        object.__setattr__(self, "write_set", tuple(sorted(self.write_set)))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        object.__setattr__(self, "filter_sizes", tuple(self.filter_sizes))
        object.__setattr__(self, "conv_mask", tuple(bool(b) for b in self.conv_mask))

    def n_in(self, bank_channels: int) -> int:
        return len(self.read_set) * bank_channels

    @property
    def active_positions(self) -> tuple[int, ...]:
        return tuple(p for p in range(4) if self.conv_mask[p])

    def conv_layout(self, bottleneck: int) -> list[tuple[int, int, int, int]]:
        """``(position, in_channels, filter_size, dilation)`` for each active conv."""
        slot = {p: k for k, p in enumerate(self.active_positions)}
        layout = []
        for path in PATHS:
            width = bottleneck
            for p in path:
                if self.conv_mask[p]:
                    k = slot[p]
                    layout.append((p, width, self.filter_sizes[k], self.dilations[k]))
                    width = self.n_out
        return layout


@dataclass(frozen=True)
class BlockSpec:
    bank_count: int
    bank_channels: int
    ops: tuple[OpSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))

    def nonempty_banks(self) -> tuple[int, ...]:
        written = {0}
        for op in self.ops:
            written.update(op.write_set)
        return tuple(sorted(b for b in written if b < self.bank_count))


@dataclass(frozen=True)
class ArchitectureSpec:
    blocks: tuple[BlockSpec, ...]
    config: SearchSpaceConfig = field(compare=False, repr=False, default_factory=SearchSpaceConfig)

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def layers(self) -> Iterator[tuple[int, int, OpSpec, int]]:
        """Yield ``(block_index, op_index, op, n_in)`` in execution order."""
        for b, block in enumerate(self.blocks):
            for i, op in enumerate(block.ops):
                yield b, i, op, op.n_in(block.bank_channels)

    @property
    def num_ops(self) -> int:
        return sum(len(b.ops) for b in self.blocks)

    @property
    def n_ch(self) -> int:
        """Total input channels over every op's generated 1x1 convolution."""
        return sum(n_in for _, _, _, n_in in self.layers())

    @property
    def param_count(self) -> int:
        return param_count(self)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "variant": self.config.variant,
            "config": self.config.to_dict(),
            "blocks": [
                {
                    "bank_count": blk.bank_count,
                    "bank_channels": blk.bank_channels,
                    "ops": [
                        {
                            "read_set": list(op.read_set),
                            "write_set": list(op.write_set),
                            "n_out": op.n_out,
                            "dilations": list(op.dilations),
                            "filter_sizes": list(op.filter_sizes),
                            "conv_mask": list(op.conv_mask),
                            "groups": op.groups,
                        }
                        for op in blk.ops
                    ],
                }
                for blk in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], config: SearchSpaceConfig | None = None) -> "ArchitectureSpec":
        if data.get("format") != FORMAT_NAME:
            raise ValueError(f"not an architecture document (format={data.get('format')!r})")
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported architecture document version {data.get('version')!r}")
        if config is None:
            config = SearchSpaceConfig.from_dict(data["config"])
        blocks = [
            BlockSpec(
                bank_count=blk["bank_count"],
                bank_channels=blk["bank_channels"],
                ops=tuple(
                    OpSpec(
                        read_set=tuple(op["read_set"]),
                        write_set=tuple(op["write_set"]),
                        n_out=op["n_out"],
                        dilations=tuple(op["dilations"]),
                        filter_sizes=tuple(op["filter_sizes"]),
                        conv_mask=tuple(op["conv_mask"]),
                        groups=op["groups"],
                    )
                    for op in blk["ops"]
                ),
            )
            for blk in data["blocks"]
        ]
        return cls(blocks=tuple(blocks), config=config)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str, config: SearchSpaceConfig | None = None) -> "ArchitectureSpec":
        return cls.from_dict(json.loads(text), config)


def param_count(arch: ArchitectureSpec) -> int:
    """Parameters of the stand-alone network built for ``arch`` in retrain mode.

    Counts the 1x1 kernels (generated during search, free afterwards), every
    op convolution, the BatchNorm affine pairs that replace weight
    normalization, the stem, the transitions and the classifier.
    """
    cfg = arch.config
    total = 0
    if arch.blocks:
        total += cfg.in_channels * arch.blocks[0].bank_channels * 9
    for b, block in enumerate(arch.blocks):
        for op in block.ops:
            n_in = op.n_in(block.bank_channels)
            bottleneck = cfg.bottleneck_width(n_in, op.n_out)
            total += 2 * n_in + bottleneck * n_in
            for _, width, k, _ in op.conv_layout(bottleneck):
                total += 2 * width + op.n_out * (width // op.groups) * k * k
        width = len(block.nonempty_banks()) * block.bank_channels
        total += 2 * width
        if b + 1 < len(arch.blocks):
            total += arch.blocks[b + 1].bank_channels * width
        else:
            total += cfg.num_classes * width + cfg.num_classes
    return total


def generated_count(arch: ArchitectureSpec) -> int:
    """Elements of the generated 1x1 kernels across all ops."""
    cfg = arch.config
    return sum(cfg.bottleneck_width(n_in, op.n_out) * n_in for _, _, op, n_in in arch.layers())


def validate(arch: ArchitectureSpec) -> list[str]:
    """Every violated invariant, as human-readable strings (empty when valid)."""
    cfg = arch.config
    out: list[str] = []
    if len(arch.blocks) != cfg.num_blocks:
        out.append(f"expected {cfg.num_blocks} blocks, found {len(arch.blocks)}")
    for b, block in enumerate(arch.blocks):
        where = f"block {b}"
        if not 1 <= block.bank_count <= cfg.M:
            out.append(f"{where}: bank_count {block.bank_count} outside [1, M={cfg.M}]")
        if block.bank_channels not in cfg.bank_channel_choices:
            out.append(f"{where}: bank_channels {block.bank_channels} not in {cfg.bank_channel_choices}")
        for i, op in enumerate(block.ops):
            out.extend(f"{where} op {i}: {msg}" for msg in _op_violations(op, block, cfg))
    if not out:
        count = param_count(arch)
        if count > cfg.param_budget:
            out.append(f"parameter count {count} exceeds budget {cfg.param_budget}")
        if arch.n_ch % cfg.D:
            out.append(f"n_ch={arch.n_ch} not divisible by D={cfg.D}")
    return out


def _op_violations(op: OpSpec, block: BlockSpec, cfg: SearchSpaceConfig) -> list[str]:
    out = []
    bc = block.bank_channels
    if not op.read_set:
        out.append("read_set must be nonempty")
    if not op.write_set:
        out.append("write_set must be nonempty")
    if len(set(op.read_set)) != len(op.read_set) or len(set(op.write_set)) != len(op.write_set):
        out.append("bank indices must not repeat")
    bad = [i for i in op.read_set + op.write_set if not 0 <= i < block.bank_count]
    if bad:
        out.append(f"bank indices {bad} outside [0, {block.bank_count})")
    if len(op.read_set) > cfg.max_reads:
        out.append(f"reads {len(op.read_set)} banks, more than max_reads={cfg.max_reads}")
    if op.n_out % cfg.N:
        out.append(f"n_out={op.n_out} not divisible by N={cfg.N}")
    if op.n_out > cfg.N_max or op.n_out < 1:
        out.append(f"n_out={op.n_out} outside [1, N_max={cfg.N_max}]")
    if op.n_out % bc or (op.write_set and op.n_out != len(op.write_set) * bc):
        out.append(f"n_out={op.n_out} must equal len(write_set)*bank_channels={len(op.write_set) * bc}")
    n_in = op.n_in(bc)
    if n_in % cfg.D:
        out.append(f"n_in={n_in} not divisible by D={cfg.D}")

    n_active = sum(op.conv_mask)
    if len(op.conv_mask) != 4:
        out.append("conv_mask must have 4 entries")
        return out
    if n_active == 0:
        out.append("at least one convolution must be active")
    if len(op.dilations) != n_active or len(op.filter_sizes) != n_active:
        out.append(f"expected {n_active} dilations and filter sizes, got {len(op.dilations)} and {len(op.filter_sizes)}")
        return out
    for d, k in zip(op.dilations, op.filter_sizes):
        if not 1 <= d <= cfg.d_max:
            out.append(f"dilation {d} outside [1, d_max={cfg.d_max}]")
        if k not in cfg.allowed_filter_sizes:
            out.append(f"filter size {k} not in {cfg.allowed_filter_sizes}")
        if cfg.variant == "v2" and (k - 1) * d + 1 > cfg.max_filter_extent:
            out.append(f"filter {k} with dilation {d} spans more than {cfg.max_filter_extent}")
    if op.groups not in cfg.allowed_groups:
        out.append(f"groups {op.groups} not in {cfg.allowed_groups}")
    bottleneck = cfg.bottleneck_width(n_in, op.n_out)
    if op.groups < 1 or op.n_out % op.groups or bottleneck % op.groups:
        out.append(f"groups {op.groups} must divide n_out={op.n_out} and bottleneck width {bottleneck}")
    if cfg.variant == "v1" and op.conv_mask != V1_MASK:
        out.append("v1 ops use exactly one 3x3 convolution")
    return out


def is_valid(arch: ArchitectureSpec) -> bool:
    return not validate(arch)
