"""Pipeline configuration read from an INI file.

Example::

    [pipeline]
    out = results
    seeds = 0, 1, 2, 3, 4
    methods = alphamix, sac, random, market_average

    [markets]
    SYN = data/synthetic.csv

    [split]
    phases = 1
    span = 200D

    [agent]
    buffer_size = 2000
    warmup_steps = 2000

    [extreme]
    SYN = 2016-06-01, 2016-07-31

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .errors import MissingInputError, ValidationError
from .metrics import EXTREME_WINDOWS
from .training import METHODS, AgentConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


@dataclass
class PipelineConfig:
    markets: dict
    out: Path = Path("results")
    seeds: tuple = DEFAULT_SEEDS
    methods: tuple = METHODS
    phases: int = 3
    span: str = "1Y"
    agent: AgentConfig = field(default_factory=AgentConfig)
    extreme: dict = field(default_factory=lambda: dict(EXTREME_WINDOWS))
    reference: str = "market_average"
    k_pct: float = 20.0
    n_boot: int = 2000
    entropy_form: str = "shannon"
    enb_power: int = 2

    def validate(self) -> "PipelineConfig":
        if not self.markets:
            raise ValidationError("config names no markets")
        for name, path in self.markets.items():
            if not Path(path).is_file():
                raise MissingInputError(f"market {name}: data file {path} not found")
        if not self.seeds:
            raise ValidationError("seed list is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValidationError(f"unknown methods {bad}; choose from {METHODS}")
        if self.reference not in self.methods:
            raise ValidationError(f"reference method {self.reference!r} must be among the methods")
        if self.phases < 1:
            raise ValidationError("phases must be >= 1")
        if self.entropy_form not in ("shannon", "exponential"):
            raise ValidationError(f"unknown entropy form {self.entropy_form!r}")
        return self

    def to_mapping(self) -> dict:
        return {
            "pipeline": {"out": str(self.out), "seeds": ",".join(map(str, self.seeds)),
                         "methods": ",".join(self.methods), "reference": self.reference,
                         "k_pct": repr(self.k_pct), "n_boot": str(self.n_boot),
                         "entropy_form": self.entropy_form, "enb_power": str(self.enb_power)},
            "markets": {k: str(v) for k, v in sorted(self.markets.items())},
            "split": {"phases": str(self.phases), "span": self.span},
            "agent": {k: str(v) for k, v in self.agent.to_mapping().items()},
            "extreme": {k: f"{a},{b}" for k, (a, b) in sorted(self.extreme.items())},
        }


def parse_config(text: str, base: Path | str = ".", overrides=()) -> PipelineConfig:
    """Build a validated config from INI text; ``overrides`` are ``section.key=value`` strings."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config: {exc}") from exc
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    known = {"pipeline", "markets", "split", "agent", "extreme"}
    extra = set(cp.sections()) - known
    if extra:
        raise ValidationError(f"unknown config sections {sorted(extra)}")
    base = Path(base)

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else base / path

    pipe = cp["pipeline"] if cp.has_section("pipeline") else {}
    markets = {k: resolve(v) for k, v in cp["markets"].items()} if cp.has_section("markets") else {}
    kw = {}
    try:
        if "out" in pipe:
            kw["out"] = resolve(pipe["out"])
        if "seeds" in pipe:
            kw["seeds"] = tuple(int(s) for s in _list(pipe["seeds"]))
        if "methods" in pipe:
            kw["methods"] = tuple(_list(pipe["methods"]))
        for key, conv in (("reference", str), ("k_pct", float), ("n_boot", int), ("entropy_form", str),
                          ("enb_power", int)):
            if key in pipe:
                kw[key] = conv(pipe[key])
        unknown = set(pipe) - {"out", "seeds", "methods", "reference", "k_pct", "n_boot", "entropy_form",
                               "enb_power"}
        if unknown:
            raise ValidationError(f"unknown pipeline keys {sorted(unknown)}")
        if cp.has_section("split"):
            split = cp["split"]
            unknown = set(split) - {"phases", "span"}
            if unknown:
                raise ValidationError(f"unknown split keys {sorted(unknown)}")
            if "phases" in split:
                kw["phases"] = int(split["phases"])
            if "span" in split:
                kw["span"] = split["span"]
        if cp.has_section("agent"):
            kw["agent"] = AgentConfig.from_mapping(dict(cp["agent"]))
        if cp.has_section("extreme"):
            windows = {}
            for name, value in cp["extreme"].items():
                parts = _list(value)
                if len(parts) != 2:
                    raise ValidationError(f"extreme window {name!r} needs 'start, end'")
                windows[name] = (parts[0], parts[1])
            kw["extreme"] = windows
    except ValueError as exc:
        raise ValidationError(f"config: {exc}") from exc
    return PipelineConfig(markets, **kw).validate()


def load_config(path, overrides=()) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"config file {path} not found")
    return parse_config(path.read_text(), path.parent, overrides)
