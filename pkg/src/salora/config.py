"""Experiment configuration: an INI-style ``key = value`` file with fixed sections.

Sections: ``[experiment]`` (method, ranks, seed), ``[train]`` (optimizer and
loop), ``[world]`` (synthetic world generation), ``[probe]`` and ``[paths]``.
Unknown sections or keys are rejected so typos do not silently fall back to
defaults.
"""
import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .trainer import LossKind, Method, TrainConfig


@dataclass
class WorldParams:
    dims: int = 32
    layers: int = 3
    planted_rank: int = 4
    n_benign: int = 512
    n_protected: int = 64
    activation: str = "tanh"
    weight_scale: float = 0.8
    planted_strength_low: float = 0.8
    planted_strength_high: float = 1.2
    protected_mean: float = 0.5
    protected_noise: float = 0.1
    teacher_rank: int = 2
    teacher_strength: float = 2.0
    teacher_alignment: float = 0.7
    teacher_principal: float = 0.8

    def build_kwargs(self):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw["planted_strength"] = (kw.pop("planted_strength_low"), kw.pop("planted_strength_high"))
        return kw


@dataclass
class ProbeParams:
    iters: int = 500
    lr: float = 0.1


@dataclass
class PathParams:
    world: str = ""
    out: str = ""


# the workbench trains harder than the LLM-scale defaults in TrainConfig;
# at width 32 and 2e-4 x 1 epoch the adapters barely move
WORKBENCH_TRAIN = TrainConfig(learning_rate=2e-3, epochs=5)


@dataclass
class ExperimentConfig:
    method: Method = Method.SALORA
    r: int = 4
    r_s: int | None = None
    r_t: int | None = None
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: replace(WORKBENCH_TRAIN))
    world: WorldParams = field(default_factory=WorldParams)
    probe: ProbeParams = field(default_factory=ProbeParams)
    paths: PathParams = field(default_factory=PathParams)

    def __post_init__(self):
        self.method = Method(self.method)
        if self.r_t is None:
            self.r_t = self.r
        if self.r_s is None:
            self.r_s = self.r_t
        for name in ("r", "r_s", "r_t"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.r < 1:
            raise ConfigurationError("adapter rank r must be at least 1")
        self.train.seed = self.seed

    def with_overrides(self, method=None, seed=None):
        cfg = replace(self, train=replace(self.train), world=replace(self.world),
                      probe=replace(self.probe), paths=replace(self.paths))
        if method is not None:
            cfg.method = Method(method)
        if seed is not None:
            cfg.seed = int(seed)
            cfg.train.seed = cfg.seed
        return cfg


_TRAIN_KEYS = ("learning_rate", "batch_size", "epochs", "beta1", "beta2", "eps", "weight_decay", "loss")


def _convert(value, default, where):
    try:
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def _fill(obj, section, name):
    known = {f.name for f in fields(obj)} - {"seed"}
    for key, value in section.items():
        if key not in known:
            raise ConfigurationError(f"unknown key [{name}] {key}")
        setattr(obj, key, _convert(value, getattr(obj, key), f"[{name}] {key}"))


def loads(text):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}".splitlines()[0]) from None
    allowed = {"experiment", "train", "world", "probe", "paths"}
    for name in parser.sections():
        if name not in allowed:
            raise ConfigurationError(f"unknown section [{name}]")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    unknown = set(exp) - {"method", "r", "r_s", "r_t", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown key [experiment] {sorted(unknown)[0]}")

    def opt_int(key):
        if key not in exp:
            return None
        return _convert(exp[key], 0, f"[experiment] {key}")

    train = replace(WORKBENCH_TRAIN)
    if parser.has_section("train"):
        for key, value in parser["train"].items():
            if key not in _TRAIN_KEYS:
                raise ConfigurationError(f"unknown key [train] {key}")
            current = getattr(train, key)
            setattr(train, key, LossKind(value) if key == "loss" else _convert(value, current, f"[train] {key}"))
        try:
            train = TrainConfig(**{k: getattr(train, k) for k in _TRAIN_KEYS})
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
    world, probe, paths = WorldParams(), ProbeParams(), PathParams()
    for obj, name in ((world, "world"), (probe, "probe"), (paths, "paths")):
        if parser.has_section(name):
            _fill(obj, parser[name], name)
    try:
        method = Method(exp.get("method", Method.SALORA.value))
    except ValueError:
        raise ConfigurationError(f"unknown method {exp['method']!r}") from None
    return ExperimentConfig(
        method=method,
        r=opt_int("r") if "r" in exp else 4,
        r_s=opt_int("r_s"),
        r_t=opt_int("r_t"),
        seed=opt_int("seed") if "seed" in exp else 0,
        train=train,
        world=world,
        probe=probe,
        paths=paths,
    )


def load(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg):
    """Canonical serialization: fixed section and key order, ``repr`` for floats."""
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        if hasattr(v, "value"):
            return v.value
        return str(v)

    sections = {
        "experiment": {"method": cfg.method, "r": cfg.r, "r_s": cfg.r_s, "r_t": cfg.r_t, "seed": cfg.seed},
        "train": {k: getattr(cfg.train, k) for k in _TRAIN_KEYS},
        "world": {f.name: getattr(cfg.world, f.name) for f in fields(cfg.world)},
        "probe": {f.name: getattr(cfg.probe, f.name) for f in fields(cfg.probe)},
        "paths": {f.name: getattr(cfg.paths, f.name) for f in fields(cfg.paths)},
    }
    out = io.StringIO()
    for name, entries in sections.items():
        out.write(f"[{name}]\n")
        for key, value in entries.items():
            out.write(f"{key} = {fmt(value)}\n")
        out.write("\n")
    return out.getvalue()


def dump(cfg, path):
    Path(path).write_text(dumps(cfg), encoding="utf-8")
