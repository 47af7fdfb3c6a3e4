"""INI run configuration: parsing, validation and the template."""

from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nv_physics as nv
from .acquisition import PROTOCOLS, RigSettings, config_hash
from .instruments import ApdConfig, DriftState
from .pulse_seq import ReferenceStrategy, SequenceError, TimingConfig

SERIAL = "serial"
STRATEGIES = (ReferenceStrategy.MAX_POLARIZED.value, ReferenceStrategy.PARTIAL_DEPOLARIZED.value, SERIAL)

# drift used when the config does not say otherwise; strong enough to show up in serial mode
DEFAULT_DRIFT = DriftState(step_sigma=1e-3, clamp=0.05)


class ConfigError(nv.ConfigError):
    """Invalid run configuration; the message names the offending key."""


@dataclass(frozen=True)
class ProtocolConfig:
    kind: str
    seed: int
    start: float
    stop: float
    points: int
    strategy: str
    n_averages: int = 50
    f_rabi: float = 2.5e6
    t_pi2: float = 100e-9
    t_deph: float = 1e-6
    shuffle: bool = False
    workers: int = 1


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "odmr-output"
    emit_waveforms: bool = False


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolConfig
    ensemble: nv.EnsembleConfig = field(default_factory=nv.EnsembleConfig)
    apd: ApdConfig = field(default_factory=ApdConfig)
    drift: DriftState = DEFAULT_DRIFT
    timing: TimingConfig = field(default_factory=TimingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def sweep_values(self) -> np.ndarray:
        p = self.protocol
        return np.linspace(p.start, p.stop, p.points)

    @property
    def settings(self) -> RigSettings:
        return RigSettings(self.ensemble, self.apd, self.drift, self.timing, self.protocol.f_rabi,
                           self.protocol.n_averages)

    @property
    def builder_params(self) -> dict[str, float]:
        return {"t_pi2": self.protocol.t_pi2, "t_deph": self.protocol.t_deph}

    def digest(self) -> str:
        # the output directory does not change the physics, so it stays out of the hash
        return config_hash(self.protocol, self.ensemble, self.apd, self.drift, self.timing,
                           self.output.emit_waveforms)


# ----------------------------------------------------------------------------
# value conversion

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_lines(text: str) -> tuple[tuple[float, float], ...]:
    """``offset:weight`` pairs separated by commas, offsets in Hz."""
    pairs = []
    for item in text.split(","):
        if item.strip():
            offset, _, weight = item.partition(":")
            pairs.append((float(offset), float(weight)))
    return tuple(pairs)


def _format_lines(lines) -> str:
    return ", ".join(f"{o!r}:{w!r}" for o, w in lines)


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, enum.Enum):
        return type(default)
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if default is None:
        return lambda text: None if text.strip().lower() == "none" else float(text)
    if isinstance(default, tuple):
        return _parse_lines
    return str


def _format(value) -> str:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return _format_lines(value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _defaults_of(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


# instrument section key -> (target, field)
_INSTRUMENT_KEYS = {f.name: ("apd", f.name) for f in fields(ApdConfig)}
_INSTRUMENT_KEYS.update({f"drift_{f.name}": ("drift", f.name) for f in fields(DriftState)})


def _instrument_defaults() -> dict:
    objs = {"apd": ApdConfig(), "drift": DEFAULT_DRIFT}
    return {k: getattr(objs[t], f) for k, (t, f) in _INSTRUMENT_KEYS.items()}


def _read_section(parser, section: str, defaults: dict) -> dict:
    values = {}
    if not parser.has_section(section):
        return values
    for key, text in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"{section}.{key}: unknown key (known: {', '.join(sorted(defaults))})")
        try:
            values[key] = _converter(defaults[key])(text)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {text!r} ({exc})") from None
    return values


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (ValueError, SequenceError) as exc:
        text = str(exc)
        raise ConfigError(text if text.startswith(f"{section}.") else f"{section}: {text}") from None


def parse_config_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(parser.sections()) - {"ensemble", "instrument", "timing", "protocol", "output"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    if not parser.has_section("protocol"):
        raise ConfigError("protocol: section is required")

    ensemble = _build("ensemble", nv.EnsembleConfig,
                      _read_section(parser, "ensemble", _defaults(nv.EnsembleConfig)))
    timing = _build("timing", TimingConfig, _read_section(parser, "timing", _defaults(TimingConfig)))
    inst = _read_section(parser, "instrument", _instrument_defaults())
    apd = _build("instrument", ApdConfig, {f: v for k, v in inst.items() for t, f in [_INSTRUMENT_KEYS[k]]
                                           if t == "apd"})
    drift_values = {f: v for k, v in inst.items() for t, f in [_INSTRUMENT_KEYS[k]] if t == "drift"}
    drift = _build("instrument", DriftState, {**_defaults_of(DEFAULT_DRIFT), **drift_values})
    output = _build("output", OutputConfig, _read_section(parser, "output", _defaults(OutputConfig)))
    protocol = _parse_protocol(parser)
    return RunConfig(protocol, ensemble, apd, drift, timing, output)


def _parse_protocol(parser) -> ProtocolConfig:
    raw = dict(parser.items("protocol"))
    kind = raw.get("kind")
    if kind is None:
        raise ConfigError("protocol.kind: required")
    if kind not in PROTOCOLS:
        raise ConfigError(f"protocol.kind: unknown protocol {kind!r} (known: {', '.join(PROTOCOLS)})")
    if "seed" not in raw:
        raise ConfigError("protocol.seed: required (runs are never seeded from the clock)")
    spec = PROTOCOLS[kind]
    start, stop, points = spec.sweep
    defaults = _defaults(ProtocolConfig)
    defaults.update(kind=kind, seed=0, start=start, stop=stop, points=points,
                    strategy=spec.default_strategy.value)
    values = _read_section(parser, "protocol", defaults)
    cfg = ProtocolConfig(**{**defaults, **values})
    if cfg.strategy not in STRATEGIES:
        raise ConfigError(f"protocol.strategy: {cfg.strategy!r} is not one of {', '.join(STRATEGIES)}")
    if cfg.seed < 0:
        raise ConfigError("protocol.seed: must be a non-negative integer")
    if kind != "repolarization":
        if cfg.points < 2:
            raise ConfigError(f"protocol.points: a sweep needs at least 2 points, got {cfg.points}")
        if not cfg.stop > cfg.start or cfg.start < 0:
            raise ConfigError("protocol.start/stop: need 0 <= start < stop")
    for name in ("n_averages", "workers"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"protocol.{name}: must be at least 1")
    for name in ("f_rabi", "t_pi2", "t_deph"):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"protocol.{name}: must be positive")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)


def with_overrides(cfg: RunConfig, seed: int | None = None, directory: str | None = None) -> RunConfig:
    if seed is not None:
        if seed < 0:
            raise ConfigError("protocol.seed: must be a non-negative integer")
        cfg = replace(cfg, protocol=replace(cfg.protocol, seed=seed))
    if directory is not None:
        cfg = replace(cfg, output=replace(cfg.output, directory=directory))
    return cfg


def template(kind: str = "rabi", seed: int = 1) -> str:
    """A complete config with every key at its default for ``kind``."""
    if kind not in PROTOCOLS:
        raise KeyError(f"unknown protocol {kind!r}; known: {', '.join(PROTOCOLS)}")
    spec = PROTOCOLS[kind]
    start, stop, points = spec.sweep
    proto = ProtocolConfig(kind, seed, start, stop, points, spec.default_strategy.value)
    sections = {
        "protocol": {f.name: getattr(proto, f.name) for f in fields(ProtocolConfig)},
        "ensemble": _defaults(nv.EnsembleConfig),
        "instrument": _instrument_defaults(),
        "timing": _defaults(TimingConfig),
        "output": _defaults(OutputConfig),
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


__all__ = ["ConfigError", "DEFAULT_DRIFT", "OutputConfig", "ProtocolConfig", "RunConfig", "STRATEGIES", "SERIAL",
           "load_config", "parse_config_text", "template", "with_overrides"]
