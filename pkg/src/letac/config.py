"""INI configuration with line-numbered diagnostics.

Sections and keys (every key optional, defaults in brackets)::

    [collect]   materials [rigid,hard_rubber,soft_rubber,gel], trials_per_material [60],
                no_contact [auto = 5 per trial], val_fraction [0.2], seed [0],
                impedance_stiffness, max_dx, max_dy, grip_force, recoil_damping,
                kinetic_ratio, width_noise, obs_noise
    [model]     N [15], M [20], dt [0.04], hidden [32], depth [2], Q_v [0.02], Q_a [5e-5],
                P [5], eps [1e-4]
    [train]     every TrainingConfig field, plus checkpoint_every [10] (epochs)
    [deploy]    K_v [100], K_a [2], K_d [0.02], period [0.04],
                p_min, p_max, v_min, v_max, a_min, a_max
    [scenario]  seeds [10], threshold [0.15], jobs [1]
    [bench]     steps [500], seed [0]
"""
import configparser
import dataclasses
import re
from dataclasses import dataclass, field

from .controllers import DeploymentConfig, SaturationBounds
from .data import CollectionConfig
from .sim import CANONICAL
from .training import TrainingConfig


class ConfigError(ValueError):
    """Bad configuration file; the message carries path and line."""


@dataclass
class ModelConfig:
    N: int = 15
    M: int = 20
    dt: float = 1.0 / 25.0
    hidden: int = 32
    depth: int = 2
    Q_v: float = 0.02
    Q_a: float = 5e-5
    P: float = 5.0
    eps: float = 1e-4


@dataclass
class CollectSettings:
    materials: tuple = ("rigid", "hard_rubber", "soft_rubber", "gel")
    trials_per_material: int = 60
    no_contact: int = None
    val_fraction: float = 0.2
    seed: int = 0


@dataclass
class ScenarioSettings:
    seeds: int = 10
    threshold: float = 0.15
    jobs: int = 1


@dataclass
class BenchSettings:
    steps: int = 500
    seed: int = 0


@dataclass
class Config:
    collect: CollectSettings = field(default_factory=CollectSettings)
    collection: CollectionConfig = field(default_factory=CollectionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    checkpoint_every: int = 10
    deploy: DeploymentConfig = field(default_factory=DeploymentConfig)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    source: str = "<defaults>"

    def to_dict(self):
        out = {}
        for name in ("collect", "collection", "model", "train", "deploy", "scenario", "bench"):
            out[name] = dataclasses.asdict(getattr(self, name))
        out["checkpoint_every"] = self.checkpoint_every
        return out


_BOUND_KEYS = tuple(f.name for f in dataclasses.fields(SaturationBounds))


def _key_lines(text):
    """Map (section, key) -> first line number, for diagnostics."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines.setdefault((section, None), no)
            continue
        m = re.match(r"^([^=:;#\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), no)
    return lines


def _convert(raw, default, where):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = tuple(x.strip() for x in raw.split(",") if x.strip())
            if not items:
                raise ValueError
            return items
        if default is None:
            return None if raw.strip().lower() in ("", "auto", "none") else int(raw)
        return raw
    except ValueError:
        kind = type(default).__name__ if default is not None else "int or auto"
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None


def _apply(obj, section, items, lines, path, skip=()):
    """Return a copy of dataclass ``obj`` with the section's keys applied."""
    names = {f.name.lower(): f.name for f in dataclasses.fields(obj)
             if not dataclasses.is_dataclass(getattr(obj, f.name))}
    updates = {}
    for key, raw in items:
        if key in skip:
            continue
        where = f"{path}:{lines.get((section, key), '?')}: [{section}] {key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown key (allowed: {', '.join(sorted(names) + list(skip))})")
        name = names[key]
        updates[name] = _convert(raw, getattr(obj, name), where)
    try:
        return dataclasses.replace(obj, **updates)
    except (ValueError, TypeError) as exc:
        line = lines.get((section, None), "?")
        raise ConfigError(f"{path}:{line}: [{section}] {exc}") from None


def parse(text, path="<string>"):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    lines = _key_lines(text)
    cfg = Config(source=path)
    known = {"collect", "model", "train", "deploy", "scenario", "bench"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"{path}:{lines.get((sec, None), '?')}: unknown section [{sec}] "
                              f"(allowed: {', '.join(sorted(known))})")
    if cp.has_section("collect"):
        items = cp.items("collect")
        coll_keys = {f.name.lower() for f in dataclasses.fields(CollectionConfig)}
        cfg.collection = _apply(cfg.collection, "collect", [kv for kv in items if kv[0] in coll_keys],
                                lines, path)
        cfg.collect = _apply(cfg.collect, "collect", [kv for kv in items if kv[0] not in coll_keys],
                             lines, path)
    if cp.has_section("model"):
        cfg.model = _apply(cfg.model, "model", cp.items("model"), lines, path)
    if cp.has_section("train"):
        items = cp.items("train")
        cfg.train = _apply(cfg.train, "train", items, lines, path, skip=("checkpoint_every",))
        for k, raw in items:
            if k == "checkpoint_every":
                cfg.checkpoint_every = _convert(raw, 10, f"{path}:{lines.get(('train', k), '?')}: [train] {k}")
    if cp.has_section("deploy"):
        items = cp.items("deploy")
        bounds = _apply(cfg.deploy.bounds, "deploy", [kv for kv in items if kv[0] in _BOUND_KEYS], lines, path)
        cfg.deploy = _apply(cfg.deploy, "deploy", [kv for kv in items if kv[0] not in _BOUND_KEYS],
                            lines, path, skip=())
        cfg.deploy = dataclasses.replace(cfg.deploy, bounds=bounds)
    if cp.has_section("scenario"):
        cfg.scenario = _apply(cfg.scenario, "scenario", cp.items("scenario"), lines, path)
    if cp.has_section("bench"):
        cfg.bench = _apply(cfg.bench, "bench", cp.items("bench"), lines, path)
    _check(cfg, path)
    return cfg


def _check(cfg, path):
    unknown = [m for m in cfg.collect.materials if m not in CANONICAL]
    if unknown:
        raise ConfigError(f"{path}: [collect] unknown materials {unknown} (allowed: {', '.join(CANONICAL)})")
    if cfg.collect.trials_per_material < 2:
        raise ConfigError(f"{path}: [collect] trials_per_material must be >= 2 for the regression fill")
    if not 0.0 <= cfg.collect.val_fraction < 1.0:
        raise ConfigError(f"{path}: [collect] val_fraction must lie in [0, 1)")
    if cfg.scenario.seeds < 1 or cfg.scenario.jobs < 1:
        raise ConfigError(f"{path}: [scenario] seeds and jobs must be >= 1")
    if cfg.checkpoint_every < 1:
        raise ConfigError(f"{path}: [train] checkpoint_every must be >= 1")
    if cfg.model.N < 1 or cfg.model.M < 1 or not cfg.model.dt > 0:
        raise ConfigError(f"{path}: [model] N, M >= 1 and dt > 0 required")
    if not (cfg.model.Q_v > 0 and cfg.model.Q_a > 0 and cfg.model.P > 0 and cfg.model.eps > 0):
        raise ConfigError(f"{path}: [model] Q_v, Q_a, P and eps must be positive")


def load(path=None):
    """Parse ``path`` (None gives the defaults). I/O errors propagate as OSError."""
    if path is None:
        return Config()
    with open(path) as fh:
        text = fh.read()
    return parse(text, str(path))
