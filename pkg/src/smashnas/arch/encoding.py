"""One-hot architecture encoding consumed by the hypernetwork.

The encoding is a ``[1, C, H, L]`` array with ``H = (N_max/N)**2`` rows and
``L = n_ch/D`` columns. Op ``l`` owns the column window
``[cursor_l, cursor_l + n_in/D)`` (cursors advance in execution order) and,
within it, rows ``[0, n_out*N_max/N**2)``. Every owned cell carries the op's
description along the channel axis:

====================  ==========================================================
channels              meaning
====================  ==========================================================
``[0, M)``            banks read
``[M, 2M)``           banks written
``[2M, 2M+d_max)``    dilation of the first active convolution
v2 only, in order:    dilations of active convs 2..4 (``3*d_max``), filter size
                      of active convs 1..4 (``4*|F|``), groups (``|G|``),
                      conv mask (4)
====================  ==========================================================

Block boundaries, bank counts and bank widths are not part of the one-hot
array; they travel alongside it in ``EncodingTensor.layout`` so decoding is
exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .config import SearchSpaceConfig
from .spec import ArchitectureSpec, BlockSpec, OpSpec, validate


class EncodingError(ValueError):
    """A malformed or inconsistent encoding tensor."""


class EmptyArchitectureError(EncodingError):
    """The encoding carries no ops at all."""


class NoOpCorruptionWarning(UserWarning):
    """The requested corruption has no degree of freedom to act on."""


@dataclass(frozen=True)
class BlockLayout:
    n_ops: int
    bank_count: int
    bank_channels: int


@dataclass(frozen=True, eq=False)
class EncodingTensor:
    data: np.ndarray
    layout: tuple[BlockLayout, ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EncodingTensor)
            and self.layout == other.layout
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


def encoding_shape(config: SearchSpaceConfig, n_ch: int) -> tuple[int, int, int, int]:
    if n_ch % config.D:
        raise EncodingError(f"n_ch={n_ch} is not divisible by D={config.D}")
    return (1, config.encoding_channels, config.encoding_rows, n_ch // config.D)


def row_extent(config: SearchSpaceConfig, n_out: int) -> int:
    rows, rem = divmod(n_out * config.N_max, config.N * config.N)
    if rem:
        raise EncodingError(f"n_out={n_out} does not map to a whole number of encoding rows")
    return rows


def layer_windows(arch: ArchitectureSpec) -> list[tuple[int, int]]:
    """``(first_column, width)`` of every op's window, in execution order."""
    D = arch.config.D
    windows, cursor = [], 0
    for _, _, _, n_in in arch.layers():
        windows.append((cursor, n_in // D))
        cursor += n_in // D
    return windows


def _channel_offsets(cfg: SearchSpaceConfig) -> dict[str, int]:
    M, dm = cfg.M, cfg.d_max
    nf, ng = len(cfg.allowed_filter_sizes), len(cfg.allowed_groups)
    offsets = {"read": 0, "write": M, "dil0": 2 * M}
    base = 2 * M + dm
    offsets["dil_ext"] = base
    offsets["filter"] = base + 3 * dm
    offsets["groups"] = offsets["filter"] + 4 * nf
    offsets["mask"] = offsets["groups"] + ng
    return offsets


def op_channel_vector(op: OpSpec, cfg: SearchSpaceConfig) -> np.ndarray:
    vec = np.zeros(cfg.encoding_channels, dtype=np.float32)
    off = _channel_offsets(cfg)
    for b in op.read_set:
        vec[off["read"] + b] = 1
    for b in op.write_set:
        vec[off["write"] + b] = 1
    vec[off["dil0"] + op.dilations[0] - 1] = 1
    if cfg.variant == "v2":
        for slot, d in enumerate(op.dilations[1:]):
            vec[off["dil_ext"] + slot * cfg.d_max + d - 1] = 1
        nf = len(cfg.allowed_filter_sizes)
        for slot, k in enumerate(op.filter_sizes):
            vec[off["filter"] + slot * nf + cfg.allowed_filter_sizes.index(k)] = 1
        vec[off["groups"] + cfg.allowed_groups.index(op.groups)] = 1
        for p, active in enumerate(op.conv_mask):
            vec[off["mask"] + p] = float(active)
    return vec


def encode(arch: ArchitectureSpec) -> EncodingTensor:
    problems = validate(arch)
    if problems:
        raise EncodingError("cannot encode an invalid architecture: " + "; ".join(problems[:3]))
    cfg = arch.config
    data = np.zeros(encoding_shape(cfg, arch.n_ch), dtype=np.float32)
    for (start, width), (_, _, op, _) in zip(layer_windows(arch), arch.layers()):
        rows = row_extent(cfg, op.n_out)
        data[0, :, :rows, start:start + width] = op_channel_vector(op, cfg)[:, None, None]
    layout = tuple(BlockLayout(len(b.ops), b.bank_count, b.bank_channels) for b in arch.blocks)
    return EncodingTensor(data, layout)


def _one_hot_index(values: np.ndarray, what: str, where: str, optional: bool = False) -> int | None:
    hits = np.flatnonzero(values)
    if len(hits) == 0 and optional:
        return None
    if len(hits) != 1 or values[hits[0]] != 1:
        raise EncodingError(f"{where}: {what} channels are not one-hot")
    return int(hits[0])


def decode(c: EncodingTensor, config: SearchSpaceConfig) -> ArchitectureSpec:
    data = c.data
    if data.ndim != 4 or data.shape[0] != 1:
        raise EncodingError(f"encoding must have shape [1, C, H, L], got {data.shape}")
    if data.shape[1] != config.encoding_channels or data.shape[2] != config.encoding_rows:
        raise EncodingError(
            f"encoding shape {data.shape} does not match config "
            f"(C={config.encoding_channels}, H={config.encoding_rows})"
        )
    if not data.any():
        raise EmptyArchitectureError("encoding is all zeros: no ops to decode")
    if not ((data == 0.0) | (data == 1.0)).all():
        raise EncodingError("encoding values must be 0 or 1")

    off = _channel_offsets(config)
    M = config.M
    cursor, layer = 0, 0
    blocks = []
    for b, lay in enumerate(c.layout):
        ops = []
        for _ in range(lay.n_ops):
            where = f"window of op {layer} (block {b}, column {cursor})"
            if cursor >= data.shape[3]:
                raise EncodingError(f"{where}: encoding ends before the layout does")
            column = data[0, :, :, cursor]
            filled = column.any(axis=0)
            rows = int(filled.sum())
            if rows == 0 or not filled[:rows].all():
                raise EncodingError(f"{where}: owned rows must be a nonempty leading block")
            vec = column[:, 0]
            reads = tuple(int(i) for i in np.flatnonzero(vec[off["read"]:off["read"] + M]))
            writes = tuple(int(i) for i in np.flatnonzero(vec[off["write"]:off["write"] + M]))
            if not reads or not writes:
                raise EncodingError(f"{where}: read and write sets must be nonempty")
            n_in = len(reads) * lay.bank_channels
            if n_in % config.D:
                raise EncodingError(f"{where}: n_in={n_in} not divisible by D")
            width = n_in // config.D
            window = data[0, :, :, cursor:cursor + width]
            if window.shape[2] != width:
                raise EncodingError(f"{where}: window runs past the last column")
            if window[:, rows:, :].any() or not (window[:, :rows, :] == vec[:, None, None]).all():
                raise EncodingError(f"{where}: cells inside the window disagree")
            n_out, rem = divmod(rows * config.N * config.N, config.N_max)
            if rem:
                raise EncodingError(f"{where}: {rows} rows is not a legal op width")
            d0 = _one_hot_index(vec[off["dil0"]:off["dil0"] + config.d_max], "dilation", where) + 1
            if config.variant == "v1":
                op = OpSpec(reads, writes, n_out, (d0,), (3,))
            else:
                mask = tuple(bool(v) for v in vec[off["mask"]:off["mask"] + 4])
                n_active = sum(mask)
                if n_active == 0:
                    raise EncodingError(f"{where}: conv mask has no active convolution")
                dilations = [d0]
                for slot in range(3):
                    seg = vec[off["dil_ext"] + slot * config.d_max:off["dil_ext"] + (slot + 1) * config.d_max]
                    idx = _one_hot_index(seg, f"dilation slot {slot + 1}", where, optional=slot + 1 >= n_active)
                    if slot + 1 < n_active:
                        dilations.append(idx + 1)
                    elif idx is not None:
                        raise EncodingError(f"{where}: dilation given for an inactive convolution")
                nf = len(config.allowed_filter_sizes)
                filters = []
                for slot in range(4):
                    seg = vec[off["filter"] + slot * nf:off["filter"] + (slot + 1) * nf]
                    idx = _one_hot_index(seg, f"filter slot {slot}", where, optional=slot >= n_active)
                    if slot < n_active:
                        filters.append(config.allowed_filter_sizes[idx])
                    elif idx is not None:
                        raise EncodingError(f"{where}: filter size given for an inactive convolution")
                g_idx = _one_hot_index(
                    vec[off["groups"]:off["groups"] + len(config.allowed_groups)], "groups", where
                )
                op = OpSpec(
                    reads, writes, n_out, tuple(dilations), tuple(filters), mask, config.allowed_groups[g_idx]
                )
            ops.append(op)
            cursor += width
            layer += 1
        blocks.append(BlockSpec(lay.bank_count, lay.bank_channels, tuple(ops)))
    if cursor != data.shape[3]:
        raise EncodingError(f"{data.shape[3] - cursor} trailing columns are not owned by any op")
    return ArchitectureSpec(tuple(blocks), config)


# -- corruption --------------------------------------------------------------------

CORRUPTION_MODES = ("shuffle_dilations", "shuffle_reads", "swap_layers")


def corrupt_encoding(
    c: EncodingTensor, mode: str, rng: np.random.Generator, config: SearchSpaceConfig
) -> EncodingTensor:
    """Encode a different architecture with the same encoding shape.

    ``shuffle_dilations`` permutes the dilation lists across all ops,
    ``shuffle_reads`` permutes read sets among ops of the same block and
    ``swap_layers`` exchanges two distinct ops inside a block. When the mode
    has nothing to change, the input is returned and a
    ``NoOpCorruptionWarning`` is issued.
    """
    if mode not in CORRUPTION_MODES:
        raise ValueError(f"unknown corruption mode {mode!r}; choose from {CORRUPTION_MODES}")
    arch = decode(c, config)
    if mode == "shuffle_dilations":
        new = _shuffle_dilations(arch, rng)
    elif mode == "shuffle_reads":
        new = _shuffle_reads(arch, rng)
    else:
        new = _swap_layers(arch, rng)
    if new is None:
        warnings.warn(f"{mode}: architecture offers nothing to corrupt; encoding unchanged", NoOpCorruptionWarning)
        return c
    return encode(new)


def _derange(rng, items: list, key=lambda x: x) -> list | None:
    """A permutation of ``items`` that differs from the original order, if one exists."""
    if len({repr(key(x)) for x in items}) < 2:
        return None
    for _ in range(100):
        perm = [items[i] for i in rng.permutation(len(items))]
        if [key(x) for x in perm] != [key(x) for x in items]:
            return perm
    # fall back to swapping the first differing pair
    j = next(k for k in range(1, len(items)) if key(items[k]) != key(items[0]))
    perm = list(items)
    perm[0], perm[j] = perm[j], perm[0]
    return perm


def _rebuild(arch: ArchitectureSpec, ops_by_block: list[list[OpSpec]]) -> ArchitectureSpec:
    blocks = tuple(BlockSpec(b.bank_count, b.bank_channels, tuple(ops)) for b, ops in zip(arch.blocks, ops_by_block))
    return ArchitectureSpec(blocks, arch.config)


def _shuffle_dilations(arch: ArchitectureSpec, rng) -> ArchitectureSpec | None:
    ops = [op for _, _, op, _ in arch.layers()]
    # only permute among ops whose active-conv count (and filter sizes) accept the dilations
    groups: dict[tuple, list[int]] = {}
    for i, op in enumerate(ops):
        groups.setdefault(op.filter_sizes, []).append(i)
    new_dils = [op.dilations for op in ops]
    changed = False
    for idx in groups.values():
        perm = _derange(rng, [ops[i].dilations for i in idx])
        if perm is not None:
            for i, d in zip(idx, perm):
                new_dils[i] = d
            changed = True
    if not changed:
        return None
    out, k = [], 0
    for block in arch.blocks:
        row = []
        for op in block.ops:
            row.append(OpSpec(op.read_set, op.write_set, op.n_out, new_dils[k], op.filter_sizes, op.conv_mask, op.groups))
            k += 1
        out.append(row)
    candidate = _rebuild(arch, out)
    return candidate if not validate(candidate) else None


def _shuffle_reads(arch: ArchitectureSpec, rng) -> ArchitectureSpec | None:
    out, changed = [], False
    for block in arch.blocks:
        perm = _derange(rng, [op.read_set for op in block.ops]) if block.ops else None
        if perm is None:
            out.append(list(block.ops))
            continue
        changed = True
        out.append(
            [
                OpSpec(r, op.write_set, op.n_out, op.dilations, op.filter_sizes, op.conv_mask, op.groups)
                for op, r in zip(block.ops, perm)
            ]
        )
    if not changed:
        return None
    candidate = _rebuild(arch, out)
    return candidate if not validate(candidate) else None


def _swap_layers(arch: ArchitectureSpec, rng) -> ArchitectureSpec | None:
    choices = [
        (b, i, j)
        for b, block in enumerate(arch.blocks)
        for i in range(len(block.ops))
        for j in range(i + 1, len(block.ops))
        if block.ops[i] != block.ops[j]
    ]
    if not choices:
        return None
    b, i, j = choices[int(rng.integers(len(choices)))]
    out = [list(block.ops) for block in arch.blocks]
    out[b][i], out[b][j] = out[b][j], out[b][i]
    return _rebuild(arch, out)
