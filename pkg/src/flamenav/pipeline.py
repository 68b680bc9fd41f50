"""End-to-end runs: worlds, datasets, the three training phases and evaluation,
all driven by one master seed and one serializable configuration."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .metrics import MetricReport
from .model import FlameModel, ModelConfig, Vocab
from .rollout import DecodeConfig, evaluate_split
from .seeding import content_hash, derive_seed
from .synth import build_nav_dataset, build_phase1_dataset, build_phase2_dataset
from .training import PHASES, Example, TrainConfig, encode_records, new_model, run_phase
from .world import NavGraph, RouteParams, WorldParams, generate_world, world_to_json

log = logging.getLogger(__name__)

RUN_FORMAT = "flamenav-run"
RUN_VERSION = 1


class ConfigError(ValueError):
    pass


def _phase_default(epochs: int) -> TrainConfig:
    return TrainConfig(lr=1e-3, batch_size=16, epochs=epochs, decay=True)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_worlds: int = 10
    world: WorldParams = field(default_factory=WorldParams)
    routes: RouteParams = field(default_factory=RouteParams)
    n_p1: int = 2000
    n_p2: int = 1500
    n_nav: int = 9000
    n_dev: int = 300
    landmark_fraction: float = 0.7
    model: ModelConfig = field(default_factory=ModelConfig)
    p1: TrainConfig = field(default_factory=lambda: _phase_default(3))
    p2: TrainConfig = field(default_factory=lambda: _phase_default(3))
    nav: TrainConfig = field(default_factory=lambda: _phase_default(8))
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    skip: tuple[str, ...] = ()  # ablation: phases left out

    def __post_init__(self):
        bad = set(self.skip) - set(PHASES)
        if bad:
            raise ConfigError(f"unknown phases in skip: {sorted(bad)}")
        if "nav" in self.skip:
            raise ConfigError("the navigation phase cannot be skipped")
        for name in ("n_worlds", "n_p1", "n_p2", "n_nav", "n_dev"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def phase(self, name: str) -> TrainConfig:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_worlds": self.n_worlds,
            "world": self.world.to_dict(),
            "routes": asdict(self.routes),
            "n_p1": self.n_p1,
            "n_p2": self.n_p2,
            "n_nav": self.n_nav,
            "n_dev": self.n_dev,
            "landmark_fraction": self.landmark_fraction,
            "model": self.model.to_dict(),
            "p1": self.p1.to_dict(),
            "p2": self.p2.to_dict(),
            "nav": self.nav.to_dict(),
            "decode": self.decode.to_dict(),
            "skip": list(self.skip),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Build from a (possibly partial) dict; nested sections merge over defaults."""
        base = cls()
        known = set(base.to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        nested = {
            "world": (WorldParams.from_dict, base.world.to_dict()),
            "routes": (lambda x: RouteParams(**x), asdict(base.routes)),
            "model": (ModelConfig.from_dict, base.model.to_dict()),
            "p1": (TrainConfig.from_dict, base.p1.to_dict()),
            "p2": (TrainConfig.from_dict, base.p2.to_dict()),
            "nav": (TrainConfig.from_dict, base.nav.to_dict()),
            "decode": (lambda x: DecodeConfig(**x), base.decode.to_dict()),
        }
        for k, v in d.items():
            if k in nested:
                build, default = nested[k]
                extra = set(v) - set(default)
                if extra:
                    raise ConfigError(f"unknown keys in {k!r}: {sorted(extra)}")
                try:
                    kw[k] = build({**default, **v})
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"bad {k!r} section: {e}") from e
            elif k == "skip":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        return cls(**kw)

    def merged(self, overrides: dict) -> "RunConfig":
        d = self.to_dict()
        for k, v in overrides.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return RunConfig.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def world_seed(master: int, index: int) -> int:
    return derive_seed("world", master, index) % (2**32)


def make_worlds(cfg: RunConfig) -> list[NavGraph]:
    return [generate_world(world_seed(cfg.seed, i), cfg.world, f"w{i}") for i in range(cfg.n_worlds)]


def worlds_hash(worlds: Sequence[NavGraph]) -> str:
    return content_hash("\n".join(world_to_json(g) for g in worlds).encode())


def make_datasets(cfg: RunConfig, worlds: Sequence[NavGraph]) -> dict[str, list[dict]]:
    s = lambda kind: derive_seed("synth", kind, cfg.seed) % (2**32)
    return {
        "p1": build_phase1_dataset(worlds, cfg.n_p1, s("p1")),
        "p2": build_phase2_dataset(worlds, cfg.n_p2, s("p2"), cfg.routes),
        "nav": build_nav_dataset(
            worlds, cfg.n_nav, s("nav"), cfg.routes, cfg.landmark_fraction, with_rationales=True
        ),
    }


def split_records(records: Sequence[dict], split: str, limit: int | None = None) -> list[dict]:
    out = [r for r in records if r["split"] == split]
    return out[:limit] if limit else out


@dataclass
class TrainedRun:
    model: FlameModel
    history: list[str]
    curves: dict[str, list[dict]]
    seconds: dict[str, float]


def train_phases(
    cfg: RunConfig,
    worlds: Sequence[NavGraph],
    data: dict[str, list[dict]],
    model: FlameModel | None = None,
    history: Sequence[str] = (),
    phases: Sequence[str] | None = None,
) -> TrainedRun:
    """Run the configured phases in order, skipping those in ``cfg.skip``."""
    W = {g.world_id: g for g in worlds}
    vocab = model.vocab if model else Vocab.from_tags(cfg.world.tag_vocab)
    if model is None:
        model = new_model(vocab, cfg.model, cfg.seed)
    history = list(history)
    curves, seconds = {}, {}
    todo = [p for p in (phases or PHASES) if p not in cfg.skip]
    for phase in todo:
        tc = replace(cfg.phase(phase), seed=cfg.seed)
        dev: list[Example] | None = None
        if phase == "nav":
            train = encode_records("nav", vocab, split_records(data["nav"], "train"), W, tc.with_rationales)
            dev = encode_records("nav", vocab, split_records(data["nav"], "dev", cfg.n_dev), W, tc.with_rationales)
        else:
            train = encode_records(phase, vocab, data[phase], W)
        expected = [p for p in PHASES[: PHASES.index(phase)] if p not in cfg.skip]
        if list(history) != expected:
            raise ConfigError(f"phase {phase} expects prior phases {expected}, have {history}")
        res = run_phase(phase, model, train, tc, dev, history, ablation=bool(cfg.skip))
        history, curves[phase], seconds[phase] = res.history, res.curve, res.seconds
        log.info("%s done in %.1fs", phase, res.seconds)
    return TrainedRun(model, history, curves, seconds)


def evaluate(cfg: RunConfig, model: FlameModel, worlds: Sequence[NavGraph], records: Sequence[dict], split: str = "dev", decode: DecodeConfig | None = None) -> MetricReport:
    W = {g.world_id: g for g in worlds}
    recs = split_records(records, split, cfg.n_dev)
    return evaluate_split(model, W, recs, decode or cfg.decode, split, config={"run": cfg.to_dict()})


def full_run(cfg: RunConfig) -> tuple[TrainedRun, MetricReport]:
    worlds = make_worlds(cfg)
    data = make_datasets(cfg, worlds)
    run = train_phases(cfg, worlds, data)
    return run, evaluate(cfg, run.model, worlds, data["nav"])
