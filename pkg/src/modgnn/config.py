"""Run configuration: flat TOML with dotted section keys.

Example::

    seed = 0
    env.n_agents = 8
    train.epochs = 30
    matrix.K = [1, 2, 3]
    paths.dataset = "out/dataset.jsonl"

Every sub-seed (data, model init, batches, evaluation suite) comes from the
master ``seed`` through :func:`modgnn.seeding.derive_seed`, so sections do
not take their own seeds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .flocksim import ConfigError, EnvConfig, FlockingGains
from .model import VARIANTS, ModelConfig
from .seeding import derive_seed
from .trainer import TrainConfig

CONFIG_FORMAT_VERSION = 1


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    n_episodes: int = 50


@dataclass
class ModelSection:
    K: int = 2
    L: int = 1
    hidden: int = 32
    msg_width: int = 10
    layer_width: int = 10
    activation: str = "tanh"
    gcn_activation: str = "tanh"
    share_hops: bool = False


@dataclass
class EvalSection:
    episodes: int = 5
    mode: str = "centralized"


@dataclass
class MatrixSection:
    variants: list[str] = field(default_factory=lambda: ["modgnn_mlp", "gcn"])
    K: list[int] = field(default_factory=lambda: [2])
    N: list[int] = field(default_factory=lambda: [4, 8, 16])


@dataclass
class PathsSection:
    dataset: str = "out/dataset.jsonl"
    checkpoints: str = "out/checkpoints"
    reports: str = "out/reports"


@dataclass
class EnvSection:
    n_agents: int = 8
    r_com: float = 3.5
    dt: float = 0.05
    episode_len: int = 200
    spawn_box: list[float] = field(default_factory=lambda: [4.0, 4.0, 4.0])
    min_separation: float = 1.0
    leader_noise: float = 0.02
    max_speed: float = 2.0
    tracking_gain: float = 5.0
    action_noise: float = 0.5
    spawn_attempts: int = 10000


@dataclass
class GainsSection:
    c_c: float = 0.05
    c_s: float = 1.0
    c_a: float = 0.1


SECTIONS = {
    "env": EnvSection,
    "gains": GainsSection,
    "train": TrainSection,
    "model": ModelSection,
    "eval": EvalSection,
    "matrix": MatrixSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    gains: GainsSection = field(default_factory=GainsSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    matrix: MatrixSection = field(default_factory=MatrixSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # -- derived objects ------------------------------------------------

    def env_config(self, n_agents: int | None = None) -> EnvConfig:
        d = dataclasses.asdict(self.env)
        if n_agents is not None:
            d["n_agents"] = n_agents
        return EnvConfig(**d, seed=derive_seed(self.seed, "data"))

    def flocking_gains(self) -> FlockingGains:
        return FlockingGains(**dataclasses.asdict(self.gains))

    def model_config(self, variant: str, K: int | None = None, n_agents: int | None = None) -> ModelConfig:
        d = dataclasses.asdict(self.model)
        if K is not None:
            d["K"] = K
        return ModelConfig(
            variant=variant,
            n_agents=self.env.n_agents if n_agents is None else n_agents,
            seed=derive_seed(self.seed, "model"),
            **d,
        )

    def train_config(self, variant: str, K: int | None = None, n_agents: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            model=self.model_config(variant, K, n_agents),
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            val_fraction=t.val_fraction,
            seed=derive_seed(self.seed, "train"),
        )

    @property
    def eval_seed(self) -> int:
        return derive_seed(self.seed, "eval")

    def path(self, key: str) -> Path:
        p = Path(getattr(self.paths, key))
        return p if p.is_absolute() else self.base_dir / p

    def resolved(self) -> dict:
        """Plain-dict form embedded in every output artifact."""
        d = {"format_version": CONFIG_FORMAT_VERSION, "seed": self.seed}
        for name in SECTIONS:
            d[name] = dataclasses.asdict(getattr(self, name))
        return d


def _check_type(key: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} has the wrong type: {value!r}")
    return value


def config_from_dict(doc: dict, base_dir: Path | str = ".") -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir))
    for key, value in doc.items():
        if key == "seed":
            cfg.seed = _check_type("seed", value, 0)
            continue
        if key not in SECTIONS or not isinstance(value, dict):
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(cfg, key)
        known = {f.name: f for f in dataclasses.fields(section)}
        for sub, subval in value.items():
            dotted = f"{key}.{sub}"
            if sub not in known:
                raise ConfigError(f"unknown config key {dotted!r}")
            setattr(section, sub, _check_type(dotted, subval, getattr(section, sub)))
    bad = [v for v in cfg.matrix.variants if v not in VARIANTS and v != "expert"]
    if bad:
        raise ConfigError(f"matrix.variants has unknown variants {bad}")
    if cfg.eval.mode not in ("centralized", "delayed"):
        raise ConfigError(f"eval.mode must be 'centralized' or 'delayed', got {cfg.eval.mode!r}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent)
