"""ResNet, DenseNet and FractalNet blocks written as memory-bank programs."""

from __future__ import annotations

from .config import SearchSpaceConfig
from .spec import ArchitectureSpec, BlockSpec, OpSpec

KINDS = ("resnet", "densenet", "fractalnet")


def fractal_columns(ops_per_block: int) -> int:
    """Number of fractal columns ``C`` with ``2**C - 1 == ops_per_block``."""
    columns = (ops_per_block + 1).bit_length() - 1
    if ops_per_block < 1 or 2**columns - 1 != ops_per_block:
        raise ValueError(f"fractalnet needs 2**C - 1 ops per block (1, 3, 7, ...), got {ops_per_block}")
    return columns


def _op(reads, writes, width) -> OpSpec:
    return OpSpec(tuple(reads), tuple(writes), width)


def fractal_program(columns: int, src: int, dst: int, next_bank: list[int]) -> list[tuple[int, int]]:
    """``(read_bank, write_bank)`` pairs for ``f_C``: ``f_1 = conv``, ``f_C = f_{C-1} . f_{C-1} + conv``.

    The deep path routes through a fresh intermediate bank; the short path and
    the deep path both add into ``dst``, which realizes the join.
    """
    if columns == 1:
        return [(src, dst)]
    mid = next_bank[0]
    next_bank[0] += 1
    return (
        fractal_program(columns - 1, src, mid, next_bank)
        + fractal_program(columns - 1, mid, dst, next_bank)
        + [(src, dst)]
    )


def canonical_block(kind: str, ops_per_block: int, width: int, config: SearchSpaceConfig) -> BlockSpec:
    if kind == "resnet":
        ops = [_op((0,), (0,), width) for _ in range(ops_per_block)]
        banks = 1
    elif kind == "densenet":
        banks = ops_per_block + 1
        if banks > config.M:
            raise ValueError(f"densenet with {ops_per_block} ops needs {banks} banks but M={config.M}")
        ops = [_op(range(i + 1), (i + 1,), width) for i in range(ops_per_block)]
    elif kind == "fractalnet":
        columns = fractal_columns(ops_per_block)
        counter = [2]
        pairs = fractal_program(columns, 0, 1, counter)
        banks = counter[0]
        ops = [_op((r,), (w,), width) for r, w in pairs]
    else:
        raise ValueError(f"unknown pattern {kind!r}; choose from {KINDS}")
    if banks > config.M:
        raise ValueError(f"{kind} with {ops_per_block} ops needs {banks} banks but M={config.M}")
    return BlockSpec(banks, width, tuple(ops))


def canonical_pattern(kind: str, ops_per_block: int, config: SearchSpaceConfig) -> ArchitectureSpec:
    width = min(config.bank_channel_choices)
    block = canonical_block(kind, ops_per_block, width, config)
    return ArchitectureSpec((block,) * config.num_blocks, config)
