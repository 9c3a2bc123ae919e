"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "EXPERIMENTS", "parse_config", "load_config"]

EXPERIMENTS = ("simulate", "fkpp", "green-check", "vfunc-scan", "clt-check", "bgp-check", "coeff-check")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; carries the offending line."""

    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__((", ".join(where) + ": " if where else "") + message)
        self.line = line
        self.key = key


def _number(text: str) -> float:
    # accepts 0.25, 1e-3 and fractions such as 1/64
    return float(Fraction(text.strip())) if "/" in text else float(text.strip())


def _float(text):
    return _number(text)


def _int(text):
    v = _number(text)
    if v != int(v):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(v)


def _list(conv):
    def parse(text):
        items = [s for s in text.replace(",", " ").split() if s]
        if not items:
            raise ValueError("empty list")
        return [conv(s) for s in items]
    return parse


def _str_list(text):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return items


def _truncation(text):
    t = text.strip().lower()
    return None if t == "auto" else _int(t)


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    epsilon: list = field(default_factory=lambda: [1 / 16])
    kappa: list = field(default_factory=lambda: [0.0])
    gamma: float | None = None
    law: str = "binary"
    truncation: int | None = None
    horizon: float = 1.0
    replicas: list = field(default_factory=lambda: [1000])
    rho0: str = "const:1"
    phi: list = field(default_factory=lambda: ["const"])
    cases: list = field(default_factory=lambda: ["equilibrium"])
    times: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    t: float = 0.5
    window: float = 0.1
    bin_width: float = 0.01
    initial_replicas: int = 20000
    S: float = 10.0
    S_grid: list = field(default_factory=list)
    S_grid_replicas: int = 0
    window_start: float = 0.1
    sub_bins: int = 20
    pilot_fraction: float = 0.1
    continuum_sites: int = 256
    spde_modes: int = 64
    spde_replicas: int = 10000
    spde_dt: float = 5e-3
    mckean_replicas: int = 0
    site: int = 0
    export_replicas: int = 5
    kernel: str = "particles"
    residual_sites: int = 8
    residual_replicas: int = 100000
    residual_time: float = 0.25
    jobs: int = 1
    out: str = "out"
    source: dict = field(default_factory=dict, repr=False)

    def echo(self) -> list[tuple[str, str]]:
        """Resolved key/value pairs in a stable order."""
        out = []
        for f in fields(self):
            if f.name == "source":
                continue
            out.append((f.name, _fmt(getattr(self, f.name))))
        return out


def _fmt(v):
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_PARSERS = {
    "experiment": str.strip,
    "seed": _int,
    "epsilon": _list(_float),
    "kappa": _list(_float),
    "gamma": _float,
    "law": str.strip,
    "truncation": _truncation,
    "horizon": _float,
    "replicas": _list(_int),
    "rho0": str.strip,
    "phi": _str_list,
    "cases": _str_list,
    "times": _list(_float),
    "t": _float,
    "window": _float,
    "bin_width": _float,
    "initial_replicas": _int,
    "S": _float,
    "S_grid": _list(_float),
    "S_grid_replicas": _int,
    "window_start": _float,
    "sub_bins": _int,
    "pilot_fraction": _float,
    "continuum_sites": _int,
    "spde_modes": _int,
    "spde_replicas": _int,
    "spde_dt": _float,
    "mckean_replicas": _int,
    "site": _int,
    "export_replicas": _int,
    "kernel": str.strip,
    "residual_sites": _int,
    "residual_replicas": _int,
    "residual_time": _float,
    "jobs": _int,
    "out": str.strip,
}


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``experiment`` (the CLI subcommand) fills in or must agree with the
    ``experiment`` key.
    """
    values: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _PARSERS:
            raise ConfigError("unknown key", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", lineno, key)
        if not val:
            raise ConfigError("missing value", lineno, key)
        try:
            values[key] = _PARSERS[key](val)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(str(exc), lineno, key) from None
        lines[key] = lineno
    if experiment is not None:
        if "experiment" in values and values["experiment"] != experiment:
            raise ConfigError(f"config is for '{values['experiment']}', not '{experiment}'",
                              lines["experiment"], "experiment")
        values["experiment"] = experiment
    if "experiment" not in values:
        raise ConfigError("missing required key", None, "experiment")
    if "seed" not in values:
        raise ConfigError("missing required key", None, "seed")
    cfg = ExperimentConfig(**values)
    cfg.source = lines
    validate(cfg)
    return cfg


def load_config(path, experiment: str | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc.strerror}") from None
    return parse_config(text, experiment)


def _require(cfg, cond, key, msg):
    if not cond:
        raise ConfigError(msg, cfg.source.get(key), key)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg, cfg.experiment in EXPERIMENTS, "experiment",
             f"unknown experiment (choose from {', '.join(EXPERIMENTS)})")
    _require(cfg, cfg.seed >= 0, "seed", "seed must be non-negative")
    _require(cfg, all(0 < e <= 0.5 for e in cfg.epsilon), "epsilon", "epsilon must lie in (0, 1/2]")
    _require(cfg, all(0 <= k < 1 for k in cfg.kappa), "kappa", "kappa must lie in [0, 1)")
    _require(cfg, cfg.horizon > 0, "horizon", "horizon must be positive")
    _require(cfg, all(r >= 2 for r in cfg.replicas), "replicas", "need at least two replicas")
    _require(cfg, len(cfg.replicas) in (1, len(cfg.epsilon)), "replicas",
             "give one replica count or one per epsilon")
    _require(cfg, all(0 <= t <= cfg.horizon for t in cfg.times), "times", "times must lie in [0, horizon]")
    _require(cfg, list(cfg.times) == sorted(set(cfg.times)), "times", "times must be strictly increasing")
    _require(cfg, cfg.kernel in ("particles", "fenwick"), "kernel", "kernel must be particles or fenwick")
    _require(cfg, 0 < cfg.pilot_fraction <= 1, "pilot_fraction", "pilot_fraction must lie in (0, 1]")
    _require(cfg, cfg.sub_bins >= 1, "sub_bins", "need at least one sub-bin")
    _require(cfg, cfg.S > 0, "S", "S must be positive")
    _require(cfg, cfg.jobs >= 1, "jobs", "jobs must be at least 1")
    _require(cfg, cfg.spde_modes >= 4 and cfg.spde_modes % 2 == 0, "spde_modes",
             "spde_modes must be an even number >= 4")
    for c in cfg.cases:
        _require(cfg, c in ("equilibrium", "bump"), "cases", f"unknown case {c!r}")
    if cfg.experiment == "vfunc-scan":
        _require(cfg, 0 < cfg.window < cfg.t, "window", "window must lie in (0, t)")
        _require(cfg, cfg.t + cfg.window <= cfg.horizon, "t", "t + window exceeds the horizon")
        n = cfg.window / cfg.bin_width
        _require(cfg, abs(n - round(n)) < 1e-9 and round(n) >= 1, "bin_width", "window must be a multiple of bin_width")
        m = cfg.t / cfg.bin_width
        _require(cfg, abs(m - round(m)) < 1e-9, "bin_width", "t must be a multiple of bin_width")
    if cfg.experiment == "bgp-check":
        for e in cfg.epsilon:
            _require(cfg, cfg.window_start + e * e * max([cfg.S] + cfg.S_grid) <= cfg.horizon,
                     "S", "window exceeds the horizon")
