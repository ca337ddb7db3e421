"""Command-line entry point: ``smashnas <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import telemetry
from .arch import CORRUPTION_MODES, ArchitectureSpec, sample_architecture, to_graphviz
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, load_idx, split_dataset, synth_dataset, with_test_split
from .gradcheck import gradcheck_params
from .runconfig import ConfigError, RunConfig
from .search import (
    RetrainSettings,
    SearchReport,
    SmashTrainer,
    corruption_probe,
    correlation_study,
    mcmc_refine,
    rank_candidates,
    retrain,
    smash_score,
)

CHECKPOINT_NAME = "smash.ckpt"
IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smashnas", description="One-shot architecture search with a weight-generating hypernetwork.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, candidates=None):
        p.add_argument("--config", help="JSON run config (unknown keys are errors)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--data", help="directory holding IDX files; synthetic data when omitted")
        p.add_argument("--out", default="runs/default", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="json")
        if candidates is not None:
            p.add_argument("--candidates", type=int, default=None, help=f"number of sampled architectures (default: run config, {candidates} for v1)")

    p = sub.add_parser("train", help="SMASH training")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this many total steps")

    p = sub.add_parser("rank", help="score random candidates with generated weights")
    common(p, candidates=500)

    p = sub.add_parser("search", help="rank candidates, then refine the best by MCMC")
    common(p, candidates=500)
    p.add_argument("--warm", type=int)
    p.add_argument("--chain", type=int)
    p.add_argument("--rate", type=float)

    p = sub.add_parser("retrain", help="train one architecture normally")
    common(p)
    p.add_argument("--arch", help="architecture JSON (default: best_arch.json in --out)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("correlate", help="SMASH score vs retrained error study")
    common(p, candidates=250)
    p.add_argument("--keep-every", type=int)
    p.add_argument("--epochs", type=int, help="retraining epochs per kept architecture")

    p = sub.add_parser("probe", help="diagnostics")
    probe = p.add_subparsers(dest="probe", parser_class=_Parser)
    q = probe.add_parser("corrupt", help="clean vs corrupted encoding scores")
    common(q, candidates=20)
    q.add_argument("--modes", default="shuffle_dilations", help=f"comma list from {','.join(CORRUPTION_MODES)}")
    q = probe.add_parser("gradc", help="finite-difference check of the full pipeline")
    common(q)
    q.add_argument("--coords", type=int, default=20)

    p = sub.add_parser("export-dot", help="Graphviz dot for an architecture")
    common(p)
    p.add_argument("--arch", help="architecture JSON; a random sample when omitted")

    p = sub.add_parser("report", help="summarize a correlation or ranking report")
    common(p)
    p.add_argument("--input", help="report JSON (default correlation.json in --out)")
    return parser


# -- helpers ------------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default("desk")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_data(cfg: RunConfig, data_dir: str | None) -> Dataset:
    ds = cfg.data
    if data_dir:
        base = Path(data_dir)
        paths = {k: base / (getattr(ds, k) or name) for k, name in IDX_NAMES.items()}
        train = load_idx(paths["train_images"], paths["train_labels"], ds.classes)
        if paths["test_images"].exists():
            test = load_idx(paths["test_images"], paths["test_labels"], ds.classes)
            # standardize test data with the training statistics
            raw = test.images * test.std[None, :, None, None] + test.mean[None, :, None, None]
            test_x = ((raw - train.mean[None, :, None, None]) / train.std[None, :, None, None]).astype(np.float32)
            n = len(train)
            full = Dataset(
                np.concatenate([train.images, test_x]),
                np.concatenate([train.labels, test.labels]),
                ds.classes,
                {"train": np.arange(n), "test": np.arange(n, n + len(test))},
                train.mean,
                train.std,
            )
        else:
            full = with_test_split(train, ds.test_fraction, ds.seed)
    else:
        full = synth_dataset(ds.kind, ds.n, ds.classes, ds.size, ds.seed, cfg.space.in_channels, ds.noise)
        full = with_test_split(full, ds.test_fraction, ds.seed)
    return split_dataset(full, ds.val_fraction, ds.seed + 1)


def _trainer(cfg: RunConfig, data: Dataset) -> SmashTrainer:
    return SmashTrainer(cfg.space, data, cfg.smash_settings(), cfg.seed)


def _save_trainer(trainer: SmashTrainer, cfg: RunConfig, path: Path) -> None:
    ckpt = Checkpoint(
        trainer.state_arrays(),
        cfg.to_dict(),
        trainer.step,
        {"seed": trainer.seed, "bit_generator": np.random.default_rng([trainer.seed, 2, trainer.step]).bit_generator.state},
        {"total_steps": trainer.total_steps},
    )
    save_checkpoint(path, ckpt)


def _restore(out: Path, data_dir) -> tuple[RunConfig, Dataset, SmashTrainer]:
    path = out / CHECKPOINT_NAME
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run `train` first")
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.config)
    data = _load_data(cfg, data_dir)
    trainer = _trainer(cfg, data)
    trainer.load_state_arrays(ckpt.tensors, ckpt.step)
    return cfg, data, trainer


def _write(out: Path, stem: str, payload, fmt: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv" and hasattr(payload, "to_csv"):
        path = out / f"{stem}.csv"
        path.write_text(payload.to_csv())
    else:
        path = out / f"{stem}.json"
        text = payload.to_json() if hasattr(payload, "to_json") else json.dumps(payload, indent=2)
        path.write_text(text if text.endswith("\n") else text + "\n")
    return path


# -- subcommands -------------------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        cfg, data, trainer = _restore(out, args.data)
    else:
        cfg = _load_config(args)
        if args.epochs is not None:
            cfg.smash.epochs = args.epochs
        data = _load_data(cfg, args.data)
        trainer = _trainer(cfg, data)
    trainer.run(args.stop_after)
    _save_trainer(trainer, cfg, out / CHECKPOINT_NAME)
    losses = trainer.history
    print(json.dumps({"step": trainer.step, "total_steps": trainer.total_steps,
                      "final_loss": losses[-1] if losses else None}))
    return 0


def cmd_rank(args) -> int:
    cfg, data, trainer = _restore(Path(args.out), args.data)
    n = args.candidates or cfg.search.candidates
    ranked = rank_candidates(trainer.hypernet, trainer.shared, cfg.space, n, data,
                             np.random.default_rng([cfg.seed, 10]), cfg.score)
    report = SearchReport(ranked, seeds={"seed": cfg.seed}, config=cfg.to_dict())
    path = _write(Path(args.out), "ranking", report, args.format)
    print(json.dumps({"best_smash_error": ranked[0].smash_error, "report": str(path)}))
    return 0


def cmd_search(args) -> int:
    cfg, data, trainer = _restore(Path(args.out), args.data)
    n = args.candidates or cfg.search.candidates
    rng = np.random.default_rng([cfg.seed, 11])
    ranked = rank_candidates(trainer.hypernet, trainer.shared, cfg.space, n, data, rng, cfg.score)
    history: list[float] = []
    best = mcmc_refine(
        trainer.hypernet, trainer.shared, ranked[0].arch, data,
        cfg.search.mcmc_warm if args.warm is None else args.warm,
        cfg.search.mcmc_chain if args.chain is None else args.chain,
        cfg.search.perturb_rate if args.rate is None else args.rate,
        rng, cfg.score, history,
    )
    out = Path(args.out)
    (out / "best_arch.json").write_text(best.to_json() + "\n")
    summary = {"base_score": ranked[0].smash_error, "final_score": history[-1], "history": history,
               "param_count": best.param_count}
    _write(out, "search", summary, "json")
    print(json.dumps({"base_score": ranked[0].smash_error, "final_score": history[-1]}))
    return 0


def cmd_retrain(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    arch_path = Path(args.arch) if args.arch else out / "best_arch.json"
    arch = ArchitectureSpec.from_json(arch_path.read_text(), cfg.space)
    data = _load_data(cfg, args.data)
    settings = RetrainSettings(**{**cfg.retrain.__dict__})
    if args.epochs is not None:
        settings.epochs = args.epochs
    _, err = retrain(arch, data, settings, np.random.default_rng([cfg.seed, 12]))
    result = {"test_error": err, "param_count": arch.param_count, "epochs": settings.epochs}
    _write(out, "retrain", result, "json")
    print(json.dumps(result))
    return 0


def cmd_correlate(args) -> int:
    cfg, data, trainer = _restore(Path(args.out), args.data)
    report = correlation_study(
        trainer.hypernet, trainer.shared, cfg.space, data,
        args.candidates or cfg.search.correlate_candidates,
        args.keep_every or cfg.search.keep_every,
        args.epochs or cfg.search.retrain_epochs,
        np.random.default_rng([cfg.seed, 13]),
        RetrainSettings(**{**cfg.retrain.__dict__, "eval_split": "val"}),
        cfg.score,
    )
    report.seeds = {"seed": cfg.seed}
    report.config = cfg.to_dict()
    _write(Path(args.out), "correlation", report, args.format)
    print(json.dumps({"spearman_rho": report.spearman_rho, "p_one_sided": report.spearman_p,
                      "pearson_r": report.pearson_r, "pairs": len(report.complete())}))
    return 0


def cmd_probe(args) -> int:
    if args.probe == "corrupt":
        cfg, data, trainer = _restore(Path(args.out), args.data)
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        bad = [m for m in modes if m not in CORRUPTION_MODES]
        if bad:
            raise UsageError(f"unknown corruption modes {bad}; choose from {CORRUPTION_MODES}")
        rng = np.random.default_rng([cfg.seed, 14])
        archs = [sample_architecture(cfg.space, rng) for _ in range(args.candidates or 20)]
        table = corruption_probe(trainer.hypernet, trainer.shared, archs, modes, data, rng, cfg.score)
        path = Path(args.out) / "probe_corrupt.csv"
        Path(args.out).mkdir(parents=True, exist_ok=True)
        path.write_text(table.to_csv())
        print(json.dumps({m: table.fraction_clean_better(m) for m in modes}))
        return 0
    if args.probe == "gradc":
        return _gradc(args)
    raise UsageError("probe needs a subcommand: corrupt or gradc")


def _gradc(args) -> int:
    from . import functional as F
    from .arch import encode
    from .dynnet import forward, init_shared
    from .hypernet import build_hypernet, generate_weights

    cfg = _load_config(args)
    rng = np.random.default_rng([cfg.seed, 15])
    space = cfg.space
    arch = sample_architecture(space, rng)
    H = build_hypernet(space, rng, dtype=np.float64, dense_block_layers=(2,), growth_rate=4)
    S = init_shared(space, rng, dtype=np.float64)
    side = 2 ** (space.num_blocks - 1) * 4
    x = rng.standard_normal((4, space.in_channels, side, side))
    y = rng.integers(0, space.num_classes, 4)
    c = encode(arch)

    def loss():
        return F.softmax_cross_entropy(forward(arch, generate_weights(H, c, space), S, x, "smash", "train"), y)

    params = {**{f"H.{k}": v for k, v in H.params.params.items()}, **{f"S.{k}": v for k, v in S.params.items()}}
    err = gradcheck_params(loss, params, args.coords, rng, h=1e-7)
    print(json.dumps({"relative_error": err, "coords": args.coords, "ops": arch.num_ops}))
    return 0 if err < 1e-4 else 2


def cmd_export_dot(args) -> int:
    cfg = _load_config(args)
    if args.arch:
        arch = ArchitectureSpec.from_json(Path(args.arch).read_text(), cfg.space)
    else:
        arch = sample_architecture(cfg.space, np.random.default_rng([cfg.seed, 16]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "architecture.dot"
    path.write_text(to_graphviz(arch))
    print(str(path))
    return 0


def cmd_report(args) -> int:
    src = Path(args.input) if args.input else Path(args.out) / "correlation.json"
    data = json.loads(src.read_text())
    records = data.get("records", [])
    summary = {
        "records": len(records),
        "retrained": sum(r.get("true_error") is not None for r in records),
        "spearman_rho": data.get("spearman_rho"),
        "p_one_sided": data.get("spearman_p"),
        "pearson_r": data.get("pearson_r"),
        "fit": data.get("fit"),
    }
    if args.format == "csv":
        print(",".join(summary))
        print(",".join("" if v is None else str(v) for v in summary.values()))
    else:
        print(json.dumps(summary, indent=2))
    return 0


COMMANDS = {
    "train": cmd_train,
    "rank": cmd_rank,
    "search": cmd_search,
    "retrain": cmd_retrain,
    "correlate": cmd_correlate,
    "probe": cmd_probe,
    "export-dot": cmd_export_dot,
    "report": cmd_report,
}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "smashnas: error: a subcommand is required")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    telemetry.configure()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"smashnas {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
