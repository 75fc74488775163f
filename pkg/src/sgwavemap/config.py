"""Run configuration: INI files with sections grid, time, matter, target, output."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import ConfigError
from .evolution import EvolutionConfig, InitialDataSpec
from .fields import RadialGrid
from .target import get_target

DEFAULTS = {
    "grid": {"n": "1024", "r_max": "4.0"},
    "time": {"t_end": "1.0", "cfl": "0.5", "output_every": "4"},
    "matter": {"family": "compact_bump", "amplitude": "0.0", "center": "0.5", "width": "0.3",
               "momentum": "time_symmetric", "alpha": "1.0", "k": "1"},
    "target": {},
    "output": {"dir": "runs"},
}
REQUIRED = {"target": ("name",)}


@dataclass
class RunConfig:
    values: dict  # section -> key -> string

    def get(self, section: str, key: str, default=None) -> Optional[str]:
        return self.values.get(section, {}).get(key, default)

    def _num(self, section, key, cast):
        raw = self.get(section, key)
        try:
            return cast(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {cast.__name__}") from None

    @property
    def n_cells(self) -> int:
        return self._num("grid", "n", int)

    def with_cells(self, n: int) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals["grid"]["n"] = str(int(n))
        return RunConfig(vals)

    def target(self):
        name = self.get("target", "name")
        coeffs = self.get("target", "coefficients")
        c = None
        if coeffs:
            try:
                c = [float(x) for x in coeffs.replace(",", " ").split()]
            except ValueError:
                raise ConfigError(f"target.coefficients: cannot parse {coeffs!r}") from None
        try:
            return get_target(name, c)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"target.name: {exc}") from None

    def evolution_config(self) -> EvolutionConfig:
        n = self.n_cells
        if n < 32:
            raise ConfigError("grid.n must be at least 32 cells")
        grid = RadialGrid.from_cells(n, self._num("grid", "r_max", float))
        return EvolutionConfig(grid, self._num("time", "t_end", float), self.target(),
                               cfl=self._num("time", "cfl", float),
                               alpha=self._num("matter", "alpha", float),
                               k=self._num("matter", "k", int),
                               output_every=self._num("time", "output_every", int))

    def initial_data(self) -> InitialDataSpec:
        frac = self.get("matter", "energy_fraction")
        return InitialDataSpec(
            family=self.get("matter", "family"),
            amplitude=self._num("matter", "amplitude", float),
            center=self._num("matter", "center", float),
            width=self._num("matter", "width", float),
            momentum=self.get("matter", "momentum"),
            energy_fraction=None if frac in (None, "") else self._num("matter", "energy_fraction", float),
        )

    def canonical(self) -> dict:
        """Config snapshot without output placement (which does not affect results)."""
        return {s: dict(sorted(kv.items())) for s, kv in sorted(self.values.items())
                if s != "output"}

    def run_id(self) -> str:
        rid = self.get("output", "run_id")
        if rid:
            return rid
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def parse_overrides(items: Iterable[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value.strip()
    return out


def load_config(path: Optional[str] = None, overrides: Iterable[str] = (),
                text: Optional[str] = None) -> RunConfig:
    """Read an INI file (or text), apply section.key=value overrides and validate."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        if text is not None:
            parser.read_string(text, source="<string>")
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"{exc.source}: line {exc.lineno}: missing section header") from None
    except configparser.ParsingError as exc:
        lines = ", ".join(str(ln) for ln, _ in exc.errors)
        raise ConfigError(f"{exc.source}: cannot parse line(s) {lines}") from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"{exc.source}: line {exc.lineno}: duplicate key {exc.option!r}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}]")
        values[section].update(parser[section])
    for section, kv in parse_overrides(overrides).items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown section [{section}] in override")
        values[section].update(kv)
    for section, keys in REQUIRED.items():
        for key in keys:
            if not values[section].get(key):
                raise ConfigError(f"missing required key {section}.{key}")
    cfg = RunConfig(values)
    cfg.evolution_config()
    cfg.initial_data()
    return cfg
