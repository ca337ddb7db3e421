"""Random architecture sampling and element-wise perturbation."""

from __future__ import annotations

import itertools

import numpy as np

from .config import SearchSpaceConfig
from .spec import V1_MASK, ArchitectureSpec, BlockSpec, OpSpec, param_count, validate

MAX_RESAMPLES = 1000
REPAIR_RETRIES = 100

_ALL_MASKS = tuple(m for m in itertools.product((False, True), repeat=4) if any(m))


class BudgetError(ValueError):
    """The parameter budget cannot hold even the smallest architecture."""


class PerturbationError(RuntimeError):
    """No legal perturbation was found within the retry bound."""


def _choice(rng: np.random.Generator, options):
    options = list(options)
    return options[int(rng.integers(len(options)))]


def _subset(rng: np.random.Generator, pool, size: int) -> tuple[int, ...]:
    pool = list(pool)
    picked = rng.choice(len(pool), size=size, replace=False)
    return tuple(sorted(pool[int(i)] for i in picked))


# -- per-element samplers ------------------------------------------------------


def _legal_n_out(cfg: SearchSpaceConfig, bank_count: int, bank_channels: int) -> list[int]:
    return [n for n in range(bank_channels, cfg.N_max + 1, bank_channels) if n // bank_channels <= bank_count]


def _legal_read_sizes(cfg: SearchSpaceConfig, available: int, bank_channels: int) -> list[int]:
    top = min(available, cfg.max_reads)
    return [k for k in range(1, top + 1) if (k * bank_channels) % cfg.D == 0]


def _sample_reads(rng, cfg, available: tuple[int, ...], bank_channels: int) -> tuple[int, ...]:
    sizes = _legal_read_sizes(cfg, len(available), bank_channels)
    if not sizes:
        raise BudgetError(f"no read width divisible by D={cfg.D} with bank_channels={bank_channels}")
    return _subset(rng, available, _choice(rng, sizes))


def _sample_mask(rng, cfg: SearchSpaceConfig) -> tuple[bool, ...]:
    if cfg.variant == "v1":
        return V1_MASK
    weights = np.array([cfg.conv_mask_all_weight if all(m) else 1.0 for m in _ALL_MASKS])
    return _ALL_MASKS[int(rng.choice(len(_ALL_MASKS), p=weights / weights.sum()))]


def _legal_filter_dilations(cfg: SearchSpaceConfig) -> list[tuple[int, int]]:
    pairs = []
    for k in cfg.allowed_filter_sizes:
        for d in range(1, cfg.d_max + 1):
            if cfg.variant == "v1" or (k - 1) * d + 1 <= cfg.max_filter_extent:
                pairs.append((k, d))
    return pairs


def _sample_filter(rng, cfg) -> int:
    return _choice(rng, cfg.allowed_filter_sizes)


def _sample_dilation(rng, cfg, filter_size: int) -> int:
    legal = [d for k, d in _legal_filter_dilations(cfg) if k == filter_size]
    return _choice(rng, legal)


def _legal_groups(cfg: SearchSpaceConfig, n_out: int, bottleneck: int) -> list[int]:
    return [g for g in cfg.allowed_groups if n_out % g == 0 and bottleneck % g == 0]


def _sample_op(rng, cfg: SearchSpaceConfig, bank_count: int, bank_channels: int, available) -> OpSpec:
    n_out = _choice(rng, _legal_n_out(cfg, bank_count, bank_channels))
    writes = _subset(rng, range(bank_count), n_out // bank_channels)
    reads = _sample_reads(rng, cfg, tuple(available), bank_channels)
    mask = _sample_mask(rng, cfg)
    filters = tuple(_sample_filter(rng, cfg) for _ in range(sum(mask)))
    dilations = tuple(_sample_dilation(rng, cfg, k) for k in filters)
    bottleneck = cfg.bottleneck_width(len(reads) * bank_channels, n_out)
    groups = _choice(rng, _legal_groups(cfg, n_out, bottleneck))
    return OpSpec(reads, writes, n_out, dilations, filters, mask, groups)


def _sample_block(rng, cfg: SearchSpaceConfig) -> BlockSpec:
    lo, hi = cfg.banks_per_block_range
    bank_count = int(rng.integers(lo, min(hi, cfg.M) + 1))
    bank_channels = _choice(rng, cfg.bank_channel_choices)
    lo, hi = cfg.op_count_budget_range
    n_ops = int(rng.integers(lo, hi + 1))
    written = {0}
    ops = []
    for _ in range(n_ops):
        op = _sample_op(rng, cfg, bank_count, bank_channels, sorted(written))
        written.update(op.write_set)
        ops.append(op)
    return BlockSpec(bank_count, bank_channels, tuple(ops))


def minimal_architecture(cfg: SearchSpaceConfig) -> ArchitectureSpec:
    """The cheapest legal architecture: one narrow op per block (when ops are required)."""
    n_ops = cfg.op_count_budget_range[0]
    bc = min(cfg.bank_channel_choices)
    reads = min(k for k in range(1, cfg.max_reads + 1) if (k * bc) % cfg.D == 0)
    blocks = []
    for _ in range(cfg.num_blocks):
        count = max(cfg.banks_per_block_range[0], reads)
        op = OpSpec(
            tuple(range(reads)),
            (0,),
            bc,
            (1,),
            (min(cfg.allowed_filter_sizes),),
            V1_MASK,
            1,
        )
        blocks.append(BlockSpec(count, bc, (op,) * n_ops))
    return ArchitectureSpec(tuple(blocks), cfg)


def sample_architecture(
    config: SearchSpaceConfig, rng: np.random.Generator, budget: int | None = None
) -> ArchitectureSpec:
    """Sample blocks independently; resample the whole network until it fits the budget."""
    budget = config.param_budget if budget is None else budget
    if param_count(minimal_architecture(config)) > budget:
        raise BudgetError(f"parameter budget {budget} cannot fit one minimal op per block")
    for _ in range(MAX_RESAMPLES):
        arch = ArchitectureSpec(tuple(_sample_block(rng, config) for _ in range(config.num_blocks)), config)
        if param_count(arch) <= budget and not validate(arch):
            return arch
    raise BudgetError(f"no architecture under {budget} parameters after {MAX_RESAMPLES} draws")


# -- perturbation -----------------------------------------------------------------

OP_ELEMENTS_V1 = ("n_out", "read_set", "write_set", "dilation")
OP_ELEMENTS_V2 = OP_ELEMENTS_V1 + ("conv_mask", "filter_sizes", "groups")


def op_elements(config: SearchSpaceConfig) -> tuple[str, ...]:
    return OP_ELEMENTS_V1 if config.variant == "v1" else OP_ELEMENTS_V2


def perturb(arch: ArchitectureSpec, rate: float, rng: np.random.Generator) -> ArchitectureSpec:
    """Resample each categorical element of each op with probability ``rate``.

    Block topology (bank counts, widths, op counts) is kept. Elements made
    illegal by another change (e.g. a write set whose size no longer matches
    ``n_out``) are re-drawn locally; the whole draw is retried when the result
    breaks the parameter budget.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"perturbation rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return arch
    cfg = arch.config
    for _ in range(REPAIR_RETRIES):
        blocks = tuple(_perturb_block(block, cfg, rate, rng) for block in arch.blocks)
        candidate = ArchitectureSpec(blocks, cfg)
        if not validate(candidate):
            return candidate
    raise PerturbationError(f"no legal perturbation found in {REPAIR_RETRIES} attempts")


def _perturb_block(block: BlockSpec, cfg: SearchSpaceConfig, rate: float, rng) -> BlockSpec:
    bc, count = block.bank_channels, block.bank_count
    written = {0}
    ops = []
    for op in block.ops:
        flips = {name: rng.random() < rate for name in op_elements(cfg)}
        n_out = _choice(rng, _legal_n_out(cfg, count, bc)) if flips["n_out"] else op.n_out
        writes = op.write_set
        if flips["write_set"] or len(writes) != n_out // bc:
            writes = _subset(rng, range(count), n_out // bc)
        reads = op.read_set
        if flips["read_set"]:
            reads = _sample_reads(rng, cfg, tuple(sorted(written)), bc)
        mask, filters, dilations, groups = op.conv_mask, op.filter_sizes, op.dilations, op.groups
        if cfg.variant == "v2":
            if flips["conv_mask"]:
                mask = _sample_mask(rng, cfg)
            if flips["filter_sizes"] or len(filters) != sum(mask):
                filters = tuple(_sample_filter(rng, cfg) for _ in range(sum(mask)))
            if len(dilations) != len(filters):
                dilations = tuple(_sample_dilation(rng, cfg, k) for k in filters)
        if flips["dilation"]:
            dilations = tuple(_sample_dilation(rng, cfg, k) for k in filters)
        dilations = tuple(
            d if (cfg.variant == "v1" or (k - 1) * d + 1 <= cfg.max_filter_extent) else _sample_dilation(rng, cfg, k)
            for k, d in zip(filters, dilations)
        )
        bottleneck = cfg.bottleneck_width(len(reads) * bc, n_out)
        legal_groups = _legal_groups(cfg, n_out, bottleneck)
        if cfg.variant == "v2" and (flips["groups"] or groups not in legal_groups):
            groups = _choice(rng, legal_groups)
        new = OpSpec(reads, writes, n_out, dilations, filters, mask, groups)
        written.update(new.write_set)
        ops.append(new)
    return BlockSpec(count, bc, tuple(ops))
