"""Flat JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .grpo import TrainerConfig, config_hash
from .synth import SynthConfig

EMBEDDING_PROVIDERS = ("baseline", "trained")


@dataclass(frozen=True)
class RunConfig:
    # trainer
    learning_rate: float = 0.05
    group_size: int = 5
    clip_eps: float = 0.2
    kl_coef: float = 0.01
    temperature: float = 1.0
    batch_size: int = 32
    max_response_len: int = 8
    inner_updates: int = 2
    w_penalty: float = 0.3
    w1: float = 0.01
    w2: float = 0.01
    tau: float = 0.1
    seed: int = 0
    max_epochs: int = 15
    patience: int = 1
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    # world / paths
    world_dir: str | None = None
    catalog: str | None = None
    interactions: str | None = None
    interactions_header: bool = False
    queries: str | None = None
    embeddings: str | None = None
    # embeddings
    embedding_provider: str = "trained"
    embedding_dims: int = 16
    embedding_epochs: int = 50
    embedding_lr: float = 0.05
    # synthetic world
    n_items: int = 200
    n_genres: int = 8
    n_actors: int = 40
    n_directors: int = 20
    n_years: int = 30
    attributes_per_item: int = 3
    n_users: int = 300
    interactions_per_user: int = 20
    preference_strength: float = 2.0
    n_candidates: int = 20
    n_queries: int = 2000
    category_mix: tuple[float, float, float] = (0.5, 0.3, 0.2)
    max_retries: int = 100
    # sweep
    sweep_values: tuple[float, ...] = field(default=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5))

    def __post_init__(self):
        object.__setattr__(self, "category_mix", tuple(float(x) for x in self.category_mix))
        object.__setattr__(self, "sweep_values", tuple(float(x) for x in self.sweep_values))
        if self.embedding_provider not in EMBEDDING_PROVIDERS:
            raise ConfigError(f"embedding_provider must be one of {EMBEDDING_PROVIDERS}")
        if self.embedding_dims < 2 or self.embedding_epochs < 0:
            raise ConfigError("embedding_dims must be >= 2 and embedding_epochs >= 0")
        self.trainer_config()
        self.synth_config()

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["category_mix"] = list(self.category_mix)
        d["sweep_values"] = list(self.sweep_values)
        return d

    def to_json(self) -> str:
        """Canonical form: every key, sorted, two-space indent, trailing newline."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def replace(self, **changes) -> RunConfig:
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(d)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def trainer_config(self) -> TrainerConfig:
        names = {f.name for f in fields(TrainerConfig)}
        return TrainerConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def synth_config(self) -> SynthConfig:
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def world_paths(self, default_dir: str | Path | None = None) -> dict[str, Path]:
        base = Path(self.world_dir or default_dir or ".")
        return {
            "catalog": Path(self.catalog) if self.catalog else base / "catalog.jsonl",
            "interactions": Path(self.interactions) if self.interactions else base / "interactions.csv",
            "queries": Path(self.queries) if self.queries else base / "queries.jsonl",
        }
