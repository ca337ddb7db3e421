"""SMASH training, candidate scoring, ranking, refinement and the diagnostic studies."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import functional as F
from . import telemetry
from .arch import (
    ArchitectureSpec,
    NoOpCorruptionWarning,
    SearchSpaceConfig,
    corrupt_encoding,
    encode,
    perturb,
    sample_architecture,
    validate,
)
from .data import Dataset, augment
from .dynnet import forward, init_free, init_shared, loss_and_grads
from .hypernet import HyperNet, build_hypernet, generate_weights
from .optim import cosine_anneal, init_state, optimizer_step
from .params import ParamStore
from .tensor import no_grad


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, arch: ArchitectureSpec):
        super().__init__(message)
        self.arch = arch
        self.arch_json = arch.to_json()


class CorrelationUndefinedError(ValueError):
    pass


# -- settings -----------------------------------------------------------------------------


@dataclass
class SmashSettings:
    epochs: int = 10
    batch_size: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    augment: str = "none"
    hypernet_layers: tuple[int, ...] = (8, 10, 4)
    growth_rate: int = 10
    free_mix: float = 0.0

    def adam(self, lr: float) -> dict:
        return {"lr": lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay}


@dataclass
class RetrainSettings:
    epochs: int = 30
    batch_size: int = 50
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: str = "none"
    eval_split: str = "test"


@dataclass
class ScoreSettings:
    batch_size: int = 250
    bn_phase: str = "eval"


# -- SMASH training ------------------------------------------------------------------------


def _step_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


class SmashTrainer:
    """Resumable SMASH training loop.

    All randomness after construction is drawn from generators seeded by
    ``(seed, purpose, step)``, so a run restored from a checkpoint at step
    ``t`` continues exactly as the uninterrupted run would.
    """

    def __init__(
        self,
        config: SearchSpaceConfig,
        data: Dataset,
        settings: SmashSettings,
        seed: int,
        hypernet: HyperNet | None = None,
        shared: ParamStore | None = None,
    ):
        self.config = config
        self.data = data
        self.settings = settings
        self.seed = int(seed)
        init_rng = np.random.default_rng([self.seed, 0])
        self.hypernet = hypernet or build_hypernet(
            config, init_rng, dense_block_layers=tuple(settings.hypernet_layers), growth_rate=settings.growth_rate
        )
        self.shared = shared or init_shared(config, init_rng, free_mix=settings.free_mix)
        self.params = {**{f"H.{k}": v for k, v in self.hypernet.params.params.items()},
                       **{f"S.{k}": v for k, v in self.shared.params.items()}}
        self.opt = init_state(self.params, "adam")
        n_train = len(data.splits["train"])
        self.steps_per_epoch = max(1, n_train // settings.batch_size)
        self.total_steps = settings.epochs * self.steps_per_epoch
        self.step = 0
        self.history: list[float] = []

    def _batch(self, step: int):
        epoch, pos = divmod(step, self.steps_per_epoch)
        idx = self.data.splits["train"]
        perm = _step_rng(self.seed, 1, epoch).permutation(len(idx))
        sel = idx[perm[pos * self.settings.batch_size:(pos + 1) * self.settings.batch_size]]
        x = self.data.images[sel]
        if self.settings.augment != "none":
            x = augment(x, self.settings.augment, _step_rng(self.seed, 3, step))
        return x, self.data.labels[sel]

    def train_step(self) -> float:
        if self.step >= self.total_steps:
            raise RuntimeError("training schedule already finished")
        arch = sample_architecture(self.config, _step_rng(self.seed, 2, self.step))
        loss = loss_and_grads(arch, self.hypernet, self.shared, self._batch(self.step), "smash")
        if not math.isfinite(loss):
            telemetry.emit("non_finite_loss", "error", step=self.step, arch=arch.to_dict())
            raise NonFiniteLossError(f"non-finite loss {loss} at step {self.step}", arch)
        lr = cosine_anneal(self.settings.lr, self.step, self.total_steps)
        optimizer_step(self.params, self.opt, "adam", self.settings.adam(lr))
        self.step += 1
        self.history.append(loss)
        return loss

    def run(self, until: int | None = None) -> list[float]:
        until = self.total_steps if until is None else min(until, self.total_steps)
        while self.step < until:
            self.train_step()
            if self.step % self.steps_per_epoch == 0:
                epoch_losses = self.history[-self.steps_per_epoch:]
                telemetry.emit(
                    "smash_epoch",
                    epoch=self.step // self.steps_per_epoch,
                    step=self.step,
                    loss=float(np.mean(epoch_losses)),
                )
        return self.history

    # checkpoint plumbing
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"hypernet/{k}": v for k, v in self.hypernet.params.arrays().items()}
        out.update({f"shared/{k}": v for k, v in self.shared.arrays().items()})
        out.update({f"optim/{k}": v for k, v in self.opt.arrays().items()})
        out["trainer/history"] = np.asarray(self.history, dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        def part(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        self.hypernet.params.load_arrays(part("hypernet/"))
        self.shared.load_arrays(part("shared/"))
        opt = part("optim/")
        if set(opt) != set(self.opt.buffers):
            raise KeyError("optimizer state in checkpoint does not match the model")
        for k, v in opt.items():
            self.opt.buffers[k][...] = v
        self.opt.step = step
        self.step = step
        self.history = [float(v) for v in arrays.get("trainer/history", np.zeros(0))]


def train_smash(
    config: SearchSpaceConfig, data: Dataset, epochs: int, rng, settings: SmashSettings | None = None
) -> tuple[HyperNet, ParamStore]:
    settings = settings or SmashSettings()
    settings = SmashSettings(**{**asdict(settings), "epochs": epochs})
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    trainer = SmashTrainer(config, data, settings, seed)
    trainer.run()
    return trainer.hypernet, trainer.shared


# -- scoring -------------------------------------------------------------------------------


def evaluate_error(
    arch: ArchitectureSpec,
    params: ParamStore,
    x: np.ndarray,
    y: np.ndarray,
    mode: str,
    hypernet: HyperNet | None = None,
    c=None,
    batch_size: int = 250,
    phase: str = "eval",
) -> float:
    """Classification error fraction over ``(x, y)``."""
    wrong = 0
    with no_grad():
        weights = None
        if mode == "smash":
            weights = generate_weights(hypernet, encode(arch) if c is None else c, arch.config)
        for start in range(0, len(y), batch_size):
            logits = forward(arch, weights, params, x[start:start + batch_size], mode, phase)
            wrong += int((F.predict(logits) != y[start:start + batch_size]).sum())
    return wrong / len(y)


def smash_score(
    hypernet: HyperNet,
    shared: ParamStore,
    arch: ArchitectureSpec,
    val_data,
    settings: ScoreSettings | None = None,
    c=None,
) -> float:
    """Validation error of ``arch`` under generated weights."""
    settings = settings or ScoreSettings()
    x, y = val_data.split("val") if isinstance(val_data, Dataset) else val_data
    return evaluate_error(arch, shared, x, y, "smash", hypernet, c, settings.batch_size, settings.bn_phase)


@dataclass
class ScoreRecord:
    arch_id: int
    arch: ArchitectureSpec
    smash_error: float
    param_count: int
    true_error: float | None = None

    def __post_init__(self):
        for v in (self.smash_error, self.true_error):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"error fraction {v} outside [0, 1]")

    def sort_key(self):
        return (self.smash_error, self.param_count, self.arch_id)


def rank_candidates(
    hypernet: HyperNet,
    shared: ParamStore,
    config: SearchSpaceConfig,
    n: int,
    val_data,
    rng: np.random.Generator,
    settings: ScoreSettings | None = None,
) -> list[ScoreRecord]:
    """Score ``n`` fresh samples; ascending error, ties by parameter count then sample index."""
    if n < 1:
        raise ValueError("need at least one candidate")
    records = []
    for i in range(n):
        arch = sample_architecture(config, rng)
        records.append(ScoreRecord(i, arch, smash_score(hypernet, shared, arch, val_data, settings), arch.param_count))
    return sorted(records, key=ScoreRecord.sort_key)


def mcmc_refine(
    hypernet: HyperNet,
    shared: ParamStore,
    base: ArchitectureSpec,
    val_data,
    n_warm: int = 100,
    n_chain: int = 100,
    rate: float = 0.05,
    rng: np.random.Generator | None = None,
    settings: ScoreSettings | None = None,
    history: list | None = None,
) -> ArchitectureSpec:
    """Best of ``n_warm`` perturbations of ``base``, then an accept-if-strictly-better chain.

    ``history`` (if given) receives the incumbent score after the warm phase
    and after every chain step.
    """
    if validate(base):
        raise ValueError("base architecture is not valid")
    rng = rng or np.random.default_rng()

    def score(a):
        return smash_score(hypernet, shared, a, val_data, settings)

    best, best_score = base, score(base)
    if history is not None:
        history.append(best_score)
    for _ in range(n_warm):
        cand = perturb(base, rate, rng)
        s = score(cand)
        if s < best_score:
            best, best_score = cand, s
    if history is not None and n_warm:
        history.append(best_score)
    for step in range(n_chain):
        cand = perturb(best, rate, rng)
        s = score(cand)
        if s < best_score:
            best, best_score = cand, s
        if history is not None:
            history.append(best_score)
        telemetry.emit("mcmc_step", "debug", step=step, score=best_score)
    return best


# -- retraining ----------------------------------------------------------------------------


def retrain(
    arch: ArchitectureSpec,
    data: Dataset,
    settings: RetrainSettings | None,
    rng,
) -> tuple[ParamStore, float]:
    """Train ``arch`` from scratch with free weights; returns params and error on ``settings.eval_split``."""
    settings = settings or RetrainSettings()
    if validate(arch):
        raise ValueError("cannot retrain an invalid architecture")
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    params = init_free(arch, np.random.default_rng([seed, 0]))
    opt = init_state(params.params, "nesterov")
    idx = data.splits["train"]
    per_epoch = max(1, len(idx) // settings.batch_size)
    total = settings.epochs * per_epoch
    step = 0
    for epoch in range(settings.epochs):
        perm = _step_rng(seed, 1, epoch).permutation(len(idx))
        for pos in range(per_epoch):
            sel = idx[perm[pos * settings.batch_size:(pos + 1) * settings.batch_size]]
            x = data.images[sel]
            if settings.augment != "none":
                x = augment(x, settings.augment, _step_rng(seed, 3, step))
            loss = loss_and_grads(arch, None, params, (x, data.labels[sel]), "retrain")
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss {loss} while retraining at step {step}", arch)
            hyper = {"lr": cosine_anneal(settings.lr, step, total), "momentum": settings.momentum,
                     "weight_decay": settings.weight_decay}
            optimizer_step(params.params, opt, "nesterov", hyper)
            step += 1
    x, y = data.split(settings.eval_split)
    return params, evaluate_error(arch, params, x, y, "retrain")


# -- studies -------------------------------------------------------------------------------


def spearman(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Spearman rho with the one-sided p-value for a positive association.

    Undefined (both NaN) when either input is constant.
    """
    if np.ptp(np.asarray(a, dtype=float)) == 0 or np.ptp(np.asarray(b, dtype=float)) == 0:
        return float("nan"), float("nan")
    res = stats.spearmanr(a, b, alternative="greater")
    return float(res.statistic), float(res.pvalue)


@dataclass
class SearchReport:
    records: list[ScoreRecord]
    spearman_rho: float | None = None
    spearman_p: float | None = None
    pearson_r: float | None = None
    fit_slope: float | None = None
    fit_intercept: float | None = None
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    CSV_FIELDS = ("arch_id", "smash_error", "true_error", "param_count", "arch")

    def complete(self) -> list[ScoreRecord]:
        return [r for r in self.records if r.true_error is not None]

    def compute_statistics(self) -> None:
        pairs = self.complete()
        if len(pairs) < 3:
            raise CorrelationUndefinedError(f"need at least 3 complete pairs, have {len(pairs)}")
        s = np.array([r.smash_error for r in pairs])
        t = np.array([r.true_error for r in pairs])
        self.spearman_rho, self.spearman_p = spearman(s, t)
        self.pearson_r = float(stats.pearsonr(s, t).statistic) if np.ptp(s) and np.ptp(t) else float("nan")
        if np.ptp(s):
            self.fit_slope, self.fit_intercept = (float(v) for v in np.polyfit(s, t, 1))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.records:
            true = "" if r.true_error is None else repr(r.true_error)
            w.writerow([r.arch_id, repr(r.smash_error), true, r.param_count, r.arch.to_json()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, config: SearchSpaceConfig) -> "SearchReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != cls.CSV_FIELDS:
            raise ValueError("not a search report CSV (header mismatch)")
        records = []
        for row in rows[1:]:
            arch = ArchitectureSpec.from_json(row[4], config)
            records.append(ScoreRecord(int(row[0]), arch, float(row[1]), int(row[3]), float(row[2]) if row[2] else None))
        return cls(records)

    def to_json(self) -> str:
        return json.dumps(
            {
                "records": [
                    {"arch_id": r.arch_id, "smash_error": r.smash_error, "true_error": r.true_error,
                     "param_count": r.param_count, "arch": r.arch.to_dict()}
                    for r in self.records
                ],
                "spearman_rho": self.spearman_rho,
                "spearman_p": self.spearman_p,
                "pearson_r": self.pearson_r,
                "fit": {"slope": self.fit_slope, "intercept": self.fit_intercept},
                "seeds": self.seeds,
                "config": self.config,
            },
            indent=2,
            allow_nan=True,
        )


def correlation_study(
    hypernet: HyperNet,
    shared: ParamStore,
    config: SearchSpaceConfig,
    data: Dataset,
    n_sample: int = 250,
    keep_every: int = 5,
    retrain_epochs: int = 30,
    rng: np.random.Generator | None = None,
    retrain_settings: RetrainSettings | None = None,
    score_settings: ScoreSettings | None = None,
) -> SearchReport:
    """Score ``n_sample`` random architectures, retrain every ``keep_every``-th by rank, correlate."""
    rng = rng or np.random.default_rng()
    base = retrain_settings or RetrainSettings(eval_split="val")
    settings = RetrainSettings(**{**asdict(base), "epochs": retrain_epochs})
    ranked = rank_candidates(hypernet, shared, config, n_sample, data, rng, score_settings)
    retrain_seed = int(rng.integers(2**63))
    for k, rec in enumerate(ranked):
        if k % keep_every:
            continue
        _, rec.true_error = retrain(rec.arch, data, settings, np.random.default_rng([retrain_seed, rec.arch_id]))
        telemetry.emit("retrained", arch_id=rec.arch_id, smash_error=rec.smash_error, true_error=rec.true_error)
    report = SearchReport(ranked, config=config.to_dict())
    report.compute_statistics()
    return report


@dataclass
class ProbeRow:
    arch_index: int
    mode: str
    clean: float
    corrupted: float

    @property
    def delta(self) -> float:
        return self.corrupted - self.clean


@dataclass
class ProbeTable:
    rows: list[ProbeRow]

    def fraction_clean_better(self, mode: str | None = None) -> float:
        rows = [r for r in self.rows if mode is None or r.mode == mode]
        return sum(r.clean < r.corrupted for r in rows) / len(rows) if rows else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("arch_index", "mode", "clean", "corrupted", "delta"))
        for r in self.rows:
            w.writerow((r.arch_index, r.mode, repr(r.clean), repr(r.corrupted), repr(r.delta)))
        return buf.getvalue()


def corruption_probe(
    hypernet: HyperNet,
    shared: ParamStore,
    archs: Sequence[ArchitectureSpec],
    modes: Sequence[str],
    val_data,
    rng: np.random.Generator,
    settings: ScoreSettings | None = None,
) -> ProbeTable:
    """Score each architecture with its own encoding and with a corrupted one."""
    import warnings

    rows = []
    for i, arch in enumerate(archs):
        c = encode(arch)
        clean = smash_score(hypernet, shared, arch, val_data, settings, c=c)
        for mode in modes:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NoOpCorruptionWarning)
                bad = corrupt_encoding(c, mode, rng, arch.config)
            corrupted = clean if bad == c else smash_score(hypernet, shared, arch, val_data, settings, c=bad)
            rows.append(ProbeRow(i, mode, clean, corrupted))
    return ProbeTable(rows)


@dataclass
class AblationArm:
    hypernet_scale: float
    free_mix: float
    report: SearchReport
    hypernet_params: int
    free_params: int


def capacity_ablation(
    configs: Sequence[tuple[float, float]],
    data: Dataset,
    rng: np.random.Generator,
    space: SearchSpaceConfig,
    smash: SmashSettings | None = None,
    n_sample: int = 30,
    keep_every: int = 3,
    retrain_epochs: int = 2,
) -> list[AblationArm]:
    """One SMASH run plus correlation study per ``(hypernet scale, free-parameter mix)`` arm.

    Scale multiplies the hypernet growth rate; the mix weight blends free
    1x1 parameters into every generated kernel. Scores are never compared
    across arms.
    """
    if len(configs) < 2:
        raise ValueError("capacity ablation needs at least two arms")
    smash = smash or SmashSettings()
    seed = int(rng.integers(2**63))
    arms = []
    for k, (scale, mix) in enumerate(configs):
        growth = max(1, int(round(smash.growth_rate * scale)))
        settings = SmashSettings(**{**asdict(smash), "growth_rate": growth, "free_mix": mix})
        trainer = SmashTrainer(space, data, settings, seed)
        trainer.run()
        report = correlation_study(
            trainer.hypernet, trainer.shared, space, data, n_sample, keep_every, retrain_epochs,
            np.random.default_rng([seed, 1]),
        )
        report.seeds = {"seed": seed, "arm": k}
        arms.append(AblationArm(scale, mix, report, trainer.hypernet.params.num_params(), trainer.shared.num_params()))
    return arms
