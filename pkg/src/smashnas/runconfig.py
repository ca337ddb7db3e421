"""Run configuration: one JSON document describing a whole experiment.

Every section has defaults; a config file only lists what it changes.
Unknown keys anywhere are rejected.

Schema (all keys optional)::

    {
      "preset": "v1" | "v2" | "desk",          # search-space starting point
      "space":   {SearchSpaceConfig fields},    # overrides on top of the preset
      "hypernet": {"dense_block_layers": [8, 10, 4], "growth_rate": 10, "slope": 0.02},
      "smash":   {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "weight_decay", "augment", "free_mix"},
      "retrain": {"epochs", "batch_size", "lr", "momentum", "weight_decay", "augment", "eval_split"},
      "score":   {"batch_size", "bn_phase"},
      "search":  {"candidates", "mcmc_warm", "mcmc_chain", "perturb_rate",
                  "correlate_candidates", "keep_every", "retrain_epochs"},
      "data":    {"source": "synthetic" | "idx", "kind", "n", "size", "noise", "classes",
                  "val_fraction", "test_fraction", "seed", "train_images", "train_labels",
                  "test_images", "test_labels"},
      "seed": 0
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .arch import SearchSpaceConfig
from .search import RetrainSettings, ScoreSettings, SmashSettings

PRESETS = {"v1": SearchSpaceConfig.v1, "v2": SearchSpaceConfig.v2, "desk": SearchSpaceConfig.desk}

# Section defaults that differ per preset; a config file still overrides any key.
# The desk preset is sized for one CPU core: 5,040 train / 1,260 val / 700 test
# cluttered glyph images, a faster Adam step, batch-statistics scoring, and
# three-epoch retrains so capacity differences show in the true error.
PRESET_SECTIONS = {
    "desk": {
        "smash": {"lr": 5e-3, "epochs": 30},
        "retrain": {"epochs": 10},
        "score": {"bn_phase": "eval_batch"},
        "search": {"candidates": 60, "correlate_candidates": 60, "keep_every": 3, "retrain_epochs": 3},
        "data": {"kind": "glyphs", "n": 7000, "noise": 0.3, "val_fraction": 0.2, "test_fraction": 0.1},
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class HyperNetSettings:
    dense_block_layers: tuple[int, ...] = (8, 10, 4)
    growth_rate: int = 10
    slope: float = 0.02


@dataclass
class SearchSettings:
    candidates: int = 500
    mcmc_warm: int = 100
    mcmc_chain: int = 100
    perturb_rate: float = 0.05
    correlate_candidates: int = 250
    keep_every: int = 5
    retrain_epochs: int = 30


@dataclass
class DataSettings:
    source: str = "synthetic"
    kind: str = "striped_textures"
    n: int = 6000
    size: int = 16
    noise: float | None = None
    classes: int = 10
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class RunConfig:
    preset: str = "v1"
    space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig.v1)
    hypernet: HyperNetSettings = field(default_factory=HyperNetSettings)
    smash: SmashSettings = field(default_factory=SmashSettings)
    retrain: RetrainSettings = field(default_factory=RetrainSettings)
    score: ScoreSettings = field(default_factory=ScoreSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    data: DataSettings = field(default_factory=DataSettings)
    seed: int = 0

    @classmethod
    def default(cls, preset: str = "v1") -> "RunConfig":
        return cls.from_dict({"preset": preset})

    def smash_settings(self) -> SmashSettings:
        """SMASH settings with the hypernet section folded in."""
        return SmashSettings(
            **{
                **asdict(self.smash),
                "hypernet_layers": tuple(self.hypernet.dense_block_layers),
                "growth_rate": self.hypernet.growth_rate,
            }
        )

    def to_dict(self) -> dict:
        smash = asdict(self.smash)
        smash.pop("hypernet_layers")
        smash.pop("growth_rate")
        hyper = asdict(self.hypernet)
        hyper["dense_block_layers"] = list(hyper["dense_block_layers"])
        return {
            "preset": self.preset,
            "space": self.space.to_dict(),
            "hypernet": hyper,
            "smash": smash,
            "retrain": asdict(self.retrain),
            "score": asdict(self.score),
            "search": asdict(self.search),
            "data": asdict(self.data),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = data.get("preset", "v1")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        try:
            space = PRESETS[preset](**_tuples(data.get("space", {})))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"space: {exc}") from exc
        data = _with_preset_sections(data, preset)
        smash_fields = {k for k in (f.name for f in fields(SmashSettings))} - {"hypernet_layers", "growth_rate"}
        hyper = _section(HyperNetSettings, data.get("hypernet", {}), "hypernet")
        if hyper.slope != 0.02:
            raise ConfigError("hypernet.slope is fixed at 0.02 in this build")
        cfg = cls(
            preset=preset,
            space=space,
            hypernet=hyper,
            smash=_section(SmashSettings, data.get("smash", {}), "smash", smash_fields),
            retrain=_section(RetrainSettings, data.get("retrain", {}), "retrain"),
            score=_section(ScoreSettings, data.get("score", {}), "score"),
            search=_section(SearchSettings, data.get("search", {}), "search"),
            data=_section(DataSettings, data.get("data", {}), "data"),
            seed=int(data.get("seed", 0)),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        problems = []
        if self.data.source not in ("synthetic", "idx"):
            problems.append(f"data.source must be 'synthetic' or 'idx', got {self.data.source!r}")
        if self.score.bn_phase not in ("eval", "eval_batch"):
            problems.append("score.bn_phase must be 'eval' or 'eval_batch'")
        for name in ("candidates", "keep_every"):
            if getattr(self.search, name) < 1:
                problems.append(f"search.{name} must be >= 1")
        if not 0 <= self.search.perturb_rate <= 1:
            problems.append("search.perturb_rate must lie in [0, 1]")
        if self.smash.batch_size < 1 or self.retrain.batch_size < 1:
            problems.append("batch sizes must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _with_preset_sections(data: dict, preset: str) -> dict:
    merged = dict(data)
    for name, base in PRESET_SECTIONS.get(preset, {}).items():
        section = data.get(name, {})
        merged[name] = {**base, **section} if isinstance(section, dict) else section
    return merged


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _section(kind, values: dict, name: str, allowed: set | None = None):
    if not isinstance(values, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = allowed if allowed is not None else {f.name for f in fields(kind)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return kind(**_tuples(values))
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
