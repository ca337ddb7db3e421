"""Execution of memory-bank architectures.

Two parameterizations share one forward pass:

``smash`` mode
    1x1 kernels come from a :class:`~smashnas.hypernet.WeightBank` and are
    weight-normalized; the op convolutions, stem, transitions and classifier
    are slices of per-block shared parameters sized for the largest op.
``retrain`` mode
    every op owns its parameters and BatchNorm precedes each activation.

Memory banks are per-forward dictionaries ``bank index -> Tensor``; a bank
that was never written reads as exact zeros.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .arch import ArchitectureSpec, BlockSpec, OpSpec, SearchSpaceConfig, encode
from .arch.spec import PATHS
from .hypernet import HyperNet, WeightBank, generate_weights, slice_layer_weights
from .params import ParamStore, he_normal
from .tensor import Tensor

MODES = ("smash", "retrain")
PHASES = ("train", "eval", "eval_batch")
SLOPE = 0.02
SMASH_1X1_GAIN = True


# -- parameter construction -----------------------------------------------------------


def conv_positions(config: SearchSpaceConfig) -> tuple[int, ...]:
    """Conv slots an op may activate: only the fixed first conv in v1."""
    return (0,) if config.variant == "v1" else (0, 1, 2, 3)


def _add_bn(store: ParamStore, name: str, width: int) -> None:
    store.add(f"{name}.gamma", np.ones(width))
    store.add(f"{name}.beta", np.zeros(width))
    store.add_buffer(f"{name}.running_mean", np.zeros(width))
    store.add_buffer(f"{name}.running_var", np.ones(width))


def init_shared(
    config: SearchSpaceConfig, rng: np.random.Generator, free_mix: float = 0.0, dtype=np.float32
) -> ParamStore:
    """Freely learned parameters for SMASH training, sized to the search-space maxima.

    ``free_mix > 0`` adds a per-block free 1x1 kernel bank (indexed by input
    bank) that is mixed into every generated kernel, shifting capacity from
    the hypernet to ordinary parameters.
    """
    store = ParamStore(dtype)
    store.meta = {"kind": "shared", "free_mix": float(free_mix)}
    bc = config.max_bank_channels
    kmax = config.max_filter_size
    mb = config.max_bottleneck
    full = config.M * bc
    store.add("stem.weight", he_normal(rng, (bc, config.in_channels, 3, 3), config.in_channels * 9))
    for b in range(config.num_blocks):
        for p in conv_positions(config):
            store.add(f"block{b}.conv{p}.weight", he_normal(rng, (config.N_max, mb, kmax, kmax), mb * kmax * kmax))
        if free_mix > 0:
            store.add(f"block{b}.free1x1", he_normal(rng, (mb, full), full))
        _add_bn(store, f"block{b}.out_bn", full)
        if b + 1 < config.num_blocks:
            store.add(f"block{b}.transition.weight", he_normal(rng, (bc, full, 1, 1), full))
    store.add("classifier.weight", he_normal(rng, (config.num_classes, full), full, slope=1.0))
    store.add("classifier.bias", np.zeros(config.num_classes))
    return store


def init_free(arch: ArchitectureSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    """Per-op parameters for training ``arch`` normally; count equals ``param_count(arch)``."""
    cfg = arch.config
    store = ParamStore(dtype)
    store.meta = {"kind": "free"}
    bc0 = arch.blocks[0].bank_channels
    store.add("stem.weight", he_normal(rng, (bc0, cfg.in_channels, 3, 3), cfg.in_channels * 9))
    for b, i, op, n_in in arch.layers():
        prefix = f"block{b}.op{i}"
        bottleneck = cfg.bottleneck_width(n_in, op.n_out)
        _add_bn(store, f"{prefix}.in_bn", n_in)
        store.add(f"{prefix}.w1x1", he_normal(rng, (bottleneck, n_in, 1, 1), n_in))
        for p, width, k, _ in op.conv_layout(bottleneck):
            _add_bn(store, f"{prefix}.conv{p}.bn", width)
            fan_in = (width // op.groups) * k * k
            store.add(f"{prefix}.conv{p}.weight", he_normal(rng, (op.n_out, width // op.groups, k, k), fan_in))
    for b, block in enumerate(arch.blocks):
        width = len(block.nonempty_banks()) * block.bank_channels
        _add_bn(store, f"block{b}.out_bn", width)
        if b + 1 < len(arch.blocks):
            nxt = arch.blocks[b + 1].bank_channels
            store.add(f"block{b}.transition.weight", he_normal(rng, (nxt, width, 1, 1), width))
    width = len(arch.blocks[-1].nonempty_banks()) * arch.blocks[-1].bank_channels
    store.add("classifier.weight", he_normal(rng, (cfg.num_classes, width), width, slope=1.0))
    store.add("classifier.bias", np.zeros(cfg.num_classes))
    return store


# -- forward pass -----------------------------------------------------------------------


def _lead(t: Tensor, *sizes: int) -> Tensor:
    """Leading slice along the first axes; returns ``t`` itself when nothing is cut."""
    if all(s == n for s, n in zip(sizes, t.shape)):
        return t
    return t[tuple(slice(0, s) for s in sizes)]


def _norm(store: ParamStore, name: str, x: Tensor, phase: str) -> Tensor:
    width = x.shape[1]
    gamma = _lead(store[f"{name}.gamma"], width)
    beta = _lead(store[f"{name}.beta"], width)
    mean = store.buffers[f"{name}.running_mean"][:width]
    var = store.buffers[f"{name}.running_var"][:width]
    if phase == "eval":
        return F.batch_norm(x, gamma, beta, mean, var, training=False)
    if phase == "eval_batch":
        mean, var = mean.copy(), var.copy()
    return F.batch_norm(x, gamma, beta, mean, var, training=True)


class _Context:
    def __init__(self, arch, params, weights, mode, phase):
        self.arch = arch
        self.cfg = arch.config
        self.params = params
        self.weights = weights
        self.mode = mode
        self.phase = phase
        self.free_mix = params.meta.get("free_mix", 0.0) if mode == "smash" else 0.0


def _read(banks: dict, op: OpSpec, block: BlockSpec, like: Tensor) -> Tensor:
    parts = []
    for k in op.read_set:
        bank = banks.get(k)
        if bank is None:
            bank = Tensor(np.zeros((like.shape[0], block.bank_channels) + like.shape[2:], dtype=like.dtype))
        parts.append(bank)
    return parts[0] if len(parts) == 1 else F.concat_channels(parts)


def _smash_1x1(ctx: _Context, b: int, block: BlockSpec, op: OpSpec, n_in: int, bottleneck: int) -> Tensor:
    if not ctx.free_mix:
        return slice_layer_weights(ctx.weights, n_in, op.n_out, bottleneck)
    gen = slice_layer_weights(ctx.weights, n_in, op.n_out, bottleneck, normalize=False)
    bc = block.bank_channels
    cols = np.concatenate([np.arange(k * bc, (k + 1) * bc) for k in op.read_set])
    free = ctx.params[f"block{b}.free1x1"][:bottleneck][:, cols]
    return F.normalize_filter(gen + free.reshape(bottleneck, n_in, 1, 1) * ctx.free_mix)


def run_op(ctx: _Context, banks: dict, b: int, i: int, op: OpSpec, like: Tensor) -> None:
    """Execute one op and add its output chunks into the write banks."""
    block = ctx.arch.blocks[b]
    cfg = ctx.cfg
    n_in = op.n_in(block.bank_channels)
    bottleneck = cfg.bottleneck_width(n_in, op.n_out)
    x = _read(banks, op, block, like)
    prefix = f"block{b}.op{i}"

    if ctx.mode == "smash":
        kernel = _smash_1x1(ctx, b, block, op, n_in, bottleneck)
        h = F.conv2d(F.leaky_relu(x, SLOPE), kernel)
        if SMASH_1X1_GAIN:
            h = h * float(np.sqrt(bottleneck))
    else:
        h = F.conv2d(F.leaky_relu(_norm(ctx.params, f"{prefix}.in_bn", x, ctx.phase), SLOPE), ctx.params[f"{prefix}.w1x1"])

    layout = {p: (width, k, d) for p, width, k, d in op.conv_layout(bottleneck)}
    out = None
    for path in PATHS:
        z = None
        for p in path:
            if p not in layout:
                continue
            width, k, d = layout[p]
            src = h if z is None else z
            if ctx.mode == "smash":
                shared = ctx.params[f"block{b}.conv{p}.weight"]
                c0 = (shared.shape[2] - k) // 2
                w = shared[: op.n_out, : width // op.groups, c0:c0 + k, c0:c0 + k]
                pre = F.leaky_relu(src, SLOPE)
            else:
                w = ctx.params[f"{prefix}.conv{p}.weight"]
                pre = F.leaky_relu(_norm(ctx.params, f"{prefix}.conv{p}.bn", src, ctx.phase), SLOPE)
            z = F.conv2d(pre, w, dilation=d, groups=op.groups, padding=d * (k - 1) // 2)
        if z is not None:
            out = z if out is None else out + z
    if out is None:
        raise ValueError(f"{prefix} has no active convolution")

    bc = block.bank_channels
    for j, bank in enumerate(op.write_set):
        chunk = out if len(op.write_set) == 1 else out[:, j * bc:(j + 1) * bc]
        banks[bank] = chunk if banks.get(bank) is None else F.accumulate(banks[bank], chunk)


def _check_inputs(arch: ArchitectureSpec, weights, params: ParamStore, x: Tensor, mode: str, phase: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}, got {phase!r}")
    if not arch.blocks or arch.num_ops == 0:
        raise ValueError("architecture has no ops")
    cfg = arch.config
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise F.ShapeError(f"input must be [B, {cfg.in_channels}, H, W], got {x.shape}")
    factor = 2 ** (len(arch.blocks) - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise F.ShapeError(
            f"spatial dims {x.shape[2:]} underflow: must be divisible by {factor} for {len(arch.blocks)} blocks"
        )
    kind = params.meta.get("kind")
    if mode == "smash":
        if kind != "shared":
            raise ValueError("smash mode needs shared parameters from init_shared")
        if not isinstance(weights, WeightBank):
            raise ValueError("smash mode needs a WeightBank from generate_weights")
        need = 4 * cfg.N_max * arch.n_ch
        if weights.flat.shape[1] != need:
            raise ValueError(
                f"weight bank holds {weights.flat.shape[1]} columns but the architecture needs {need}"
            )
    elif kind != "free":
        raise ValueError("retrain mode needs per-architecture parameters from init_free")


def forward(
    arch: ArchitectureSpec,
    weights: WeightBank | None,
    params: ParamStore,
    x,
    mode: str = "smash",
    phase: str = "train",
) -> Tensor:
    """Logits ``[B, num_classes]``.

    ``phase`` selects BatchNorm behaviour: ``train`` uses batch statistics and
    updates the running averages, ``eval`` uses the running averages, and
    ``eval_batch`` uses batch statistics without touching any buffer.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    _check_inputs(arch, weights, params, x, mode, phase)
    if weights is not None:
        weights.reset()
    ctx = _Context(arch, params, weights, mode, phase)

    bc0 = arch.blocks[0].bank_channels
    h = F.conv2d(x, _lead(params["stem.weight"], bc0), padding=1)
    n_blocks = len(arch.blocks)
    for b, block in enumerate(arch.blocks):
        banks = {0: h}
        for i, op in enumerate(block.ops):
            run_op(ctx, banks, b, i, op, h)
        live = [banks[k] for k in block.nonempty_banks()]
        feats = live[0] if len(live) == 1 else F.concat_channels(live)
        z = F.leaky_relu(_norm(params, f"block{b}.out_bn", feats, phase), SLOPE)
        width = feats.shape[1]
        if b + 1 < n_blocks:
            nxt = arch.blocks[b + 1].bank_channels
            w = _lead(params[f"block{b}.transition.weight"], nxt, width)
            h = F.avg_pool2d(F.conv2d(z, w), 2)
        else:
            pooled = F.global_avg_pool(z)
            w = _lead(params["classifier.weight"], params["classifier.weight"].shape[0], width)
            logits = F.linear(pooled, w, params["classifier.bias"])
    if mode == "smash" and weights.cursor != weights.flat.shape[1]:
        raise ValueError("architecture did not consume its weight bank exactly")
    return logits


def loss_and_grads(
    arch: ArchitectureSpec,
    hypernet: HyperNet | None,
    params: ParamStore,
    batch,
    mode: str = "smash",
    phase: str = "train",
) -> float:
    """One tape from encoding to loss; leaves gradients in ``.grad`` of every parameter."""
    x, y = batch
    params.zero_grad()
    weights = None
    if mode == "smash":
        hypernet.params.zero_grad()
        weights = generate_weights(hypernet, encode(arch), arch.config)
    loss = F.softmax_cross_entropy(forward(arch, weights, params, x, mode, phase), y)
    loss.backward()
    return float(loss.data)


def grad_wrt_encoding(
    arch: ArchitectureSpec, hypernet: HyperNet, params: ParamStore, batch, phase: str = "eval"
) -> np.ndarray:
    """Gradient of the loss with respect to the encoding, treated as continuous."""
    x, y = batch
    c = Tensor(encode(arch).data.astype(hypernet.params.dtype), requires_grad=True)
    weights = generate_weights(hypernet, c, arch.config)
    loss = F.softmax_cross_entropy(forward(arch, weights, params, x, "smash", phase), y)
    loss.backward()
    hypernet.params.zero_grad()
    params.zero_grad()
    return c.grad
