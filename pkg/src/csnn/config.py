"""Run configuration: a small ``key = value`` format with ``[sections]``.

The stdlib ``configparser`` cannot report the line a value came from, and
every validation error here names one, so the parser is hand-rolled::

    preset = desk-gaussian-12x12      # optional, before any section

    [grid]
    x = 12
    y = 12

    [run]
    workers = 1,2,4
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .connectome import DEFAULT_MAX_SYNAPSES, DelayRule
from .model import (
    ConnectivityKernel,
    ExternalDrive,
    GridSpec,
    InvariantError,
    KernelShape,
    NeuronParams,
)


class ConfigError(ValueError):
    def __init__(self, kind: str, message: str, line: int | None = None,
                 column: int | None = None, source: str = "<config>"):
        where = source
        if line is not None:
            where += f":{line}"
            if column is not None:
                where += f":{column}"
        super().__init__(f"{where}: {kind}: {message}")
        self.kind = kind
        self.message = message
        self.line = line
        self.column = column
        self.source = source


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int(text: str) -> int:
    value = float(text) if any(c in text for c in ".eE") else int(text, 0)
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {text!r}")
        value = int(value)
    return value


def _int_list(text: str) -> tuple[int, ...]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(_int(t) for t in items)


def _shape(text: str) -> KernelShape:
    try:
        return KernelShape(text.lower())
    except ValueError:
        raise ValueError(f"kernel shape must be 'gaussian' or 'exponential', got {text!r}") from None


# section -> key -> (target field, converter)
SCHEMA: dict[str, dict[str, tuple[str, Callable[[str], Any]]]] = {
    "grid": {
        "x": ("grid_x", _int),
        "y": ("grid_y", _int),
        "alpha": ("alpha", float),
        "neurons_per_column": ("neurons_per_column", _int),
        "excitatory_fraction": ("excitatory_fraction", float),
    },
    "kernel": {
        "shape": ("shape", _shape),
        "amplitude": ("amplitude", float),
        "scale": ("scale", float),
        "cutoff": ("cutoff", float),
        "local_probability": ("local_probability", float),
    },
    "neuron": {f.name: (f.name, float) for f in dataclasses.fields(NeuronParams)},
    "external": {
        "synapses_per_neuron": ("synapses_per_neuron", _int),
        "rate": ("rate_per_synapse", float),
        "weight": ("weight", float),
    },
    "synapse": {
        "min_delay": ("min_delay", float),
        "delay_mode": ("mode", str),
        "conduction_velocity": ("conduction_velocity", float),
    },
    "run": {
        "dt": ("dt", float),
        "duration": ("duration", float),
        "warmup": ("warmup", float),
        "seed": ("seed", _int),
        "workers": ("workers", _int_list),
        "transport": ("transport", str),
        "timeout": ("timeout", float),
        "max_synapses": ("max_synapses", _int),
    },
    "output": {
        "dir": ("out_dir", str),
        "dump_raster": ("dump_raster", _bool),
        "raster_format": ("raster_format", str),
        "dump_connectome": ("dump_connectome", _bool),
    },
}

TRANSPORTS = ("inproc", "tcp")


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec
    kernel: ConnectivityKernel
    neuron: NeuronParams = NeuronParams()
    drive: ExternalDrive = ExternalDrive()
    delays: DelayRule = DelayRule()
    dt: float = 0.1
    duration: float = 1000.0
    warmup: float = 200.0
    seed: int = 1
    workers: tuple[int, ...] = (1,)
    transport: str = "inproc"
    timeout: float = 60.0
    max_synapses: int = DEFAULT_MAX_SYNAPSES
    out_dir: str = "out"
    dump_raster: bool = False
    raster_format: str = "text"
    dump_connectome: bool = False
    tcp_addresses: tuple[tuple[int, str, int], ...] = ()
    name: str = ""

    def __post_init__(self):
        if not self.dt > 0:
            raise InvariantError("dt", "must be > 0")
        if not self.duration >= 0:
            raise InvariantError("duration", "must be >= 0")
        if not 0 <= self.warmup <= self.duration:
            raise InvariantError("warmup", "must lie in [0, duration]")
        if not 0 <= self.seed < 2**64:
            raise InvariantError("seed", "must be an unsigned 64-bit value")
        if not self.workers or any(p < 1 for p in self.workers):
            raise InvariantError("workers", "worker counts must be >= 1")
        if len(set(self.workers)) != len(self.workers):
            raise InvariantError("workers", "duplicate worker counts")
        if max(self.workers) > self.grid.n_columns:
            raise InvariantError(
                "workers", f"{max(self.workers)} workers exceed the "
                f"{self.grid.n_columns} columns of the grid; shrink the worker count")
        if self.transport not in TRANSPORTS:
            raise InvariantError("transport", f"must be one of {', '.join(TRANSPORTS)}")
        if not self.timeout > 0:
            raise InvariantError("timeout", "must be > 0")
        if self.max_synapses < 0:
            raise InvariantError("max_synapses", "must be >= 0")
        if self.raster_format not in ("text", "binary"):
            raise InvariantError("raster_format", "must be 'text' or 'binary'")
        self.delays.min_steps(self.dt)

    @property
    def window_steps(self) -> int:
        return self.delays.min_steps(self.dt)

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup / self.dt))

    def model_dict(self) -> dict:
        """Everything that determines the simulated dynamics, and nothing else."""
        return {
            "grid": dataclasses.asdict(self.grid),
            "kernel": {**dataclasses.asdict(self.kernel), "shape": self.kernel.shape.value},
            "neuron": dataclasses.asdict(self.neuron),
            "external": dataclasses.asdict(self.drive),
            "synapse": dataclasses.asdict(self.delays),
            "dt": self.dt,
            "duration": self.duration,
            "warmup": self.warmup,
            "seed": self.seed,
        }

    @property
    def digest(self) -> str:
        canon = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Resolved config in the input format; parses back to an equal config."""
        g, k, n, e, s = self.grid, self.kernel, self.neuron, self.drive, self.delays
        lines = [f"# config_digest = {self.digest}"]
        if self.name:
            lines.append(f"# from preset {self.name}")
        sections = {
            "grid": {"x": g.grid_x, "y": g.grid_y, "alpha": g.alpha,
                     "neurons_per_column": g.neurons_per_column,
                     "excitatory_fraction": g.excitatory_fraction},
            "kernel": {"shape": k.shape.value, "amplitude": k.amplitude, "scale": k.scale,
                       "cutoff": k.cutoff, "local_probability": k.local_probability},
            "neuron": dataclasses.asdict(n),
            "external": {"synapses_per_neuron": e.synapses_per_neuron,
                         "rate": e.rate_per_synapse, "weight": e.weight},
            "synapse": {"min_delay": s.min_delay, "delay_mode": s.mode,
                        "conduction_velocity": s.conduction_velocity},
            "run": {"dt": self.dt, "duration": self.duration, "warmup": self.warmup,
                    "seed": self.seed, "workers": ",".join(map(str, self.workers)),
                    "transport": self.transport, "timeout": self.timeout,
                    "max_synapses": self.max_synapses},
            "output": {"dir": self.out_dir, "dump_raster": str(self.dump_raster).lower(),
                       "raster_format": self.raster_format,
                       "dump_connectome": str(self.dump_connectome).lower()},
        }
        for name, items in sections.items():
            lines.append(f"\n[{name}]")
            lines.extend(f"{key} = {_render(val)}" for key, val in items.items())
        if self.tcp_addresses:
            lines.append("\n[tcp]")
            lines.extend(f"{w} = {h}:{p}" for w, h, p in self.tcp_addresses)
        return "\n".join(lines) + "\n"


def _render(val) -> str:
    return repr(val) if isinstance(val, float) else str(val)


def _full_size(shape: str, size: int) -> dict:
    kernel = ({"shape": "gaussian", "amplitude": "0.05", "scale": "100"} if shape == "gaussian"
              else {"shape": "exponential", "amplitude": "0.03", "scale": "290"})
    kernel.update(cutoff="0.001", local_probability="0.8")
    return {
        "grid": {"x": str(size), "y": str(size), "alpha": "100",
                 "neurons_per_column": "1240", "excitatory_fraction": "0.8"},
        "kernel": kernel,
        "external": {"synapses_per_neuron": "540", "rate": "3"},
    }


def _desk(shape: str, size: int, per_column: int) -> dict:
    d = _full_size(shape, size)
    d["grid"]["neurons_per_column"] = str(per_column)
    return d


# paper-* presets are the full-size problems (1240 neurons per column). The
# desk-* presets shrink the grid and/or the column population for workstation
# runs and are NOT the full-size problems.
PRESETS: dict[str, dict] = {}
for _shape in ("gaussian", "exponential"):
    for _size in (24, 48, 96):
        PRESETS[f"paper-{_shape}-{_size}x{_size}"] = _full_size(_shape, _size)
    for _size, _npc in ((8, 40), (12, 124), (24, 124)):
        PRESETS[f"desk-{_shape}-{_size}x{_size}"] = _desk(_shape, _size, _npc)


@dataclass
class _Entry:
    value: str
    line: int | None
    column: int | None
    key_column: int | None = None


def _tokenize(text: str, source: str) -> tuple[dict[str, dict[str, _Entry]], dict[str, int]]:
    values: dict[str, dict[str, _Entry]] = {"": {}}
    section_lines: dict[str, int] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(" #", 1)[0].rstrip() if " #" in raw else raw.rstrip()
        stripped = line.strip()
        if not stripped or stripped[0] in "#;":
            continue
        col = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            if not stripped.endswith("]") or len(stripped) < 3:
                raise ConfigError("syntax", "malformed section header", lineno, col, source)
            section = stripped[1:-1].strip().lower()
            if section not in SCHEMA and section != "tcp":
                raise ConfigError("unknown key", f"unknown section [{section}]", lineno, col, source)
            if section in section_lines:
                raise ConfigError("syntax", f"section [{section}] repeated", lineno, col, source)
            section_lines[section] = lineno
            values.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError("syntax", "expected 'key = value'", lineno, col + len(stripped), source)
        key, _, val = stripped.partition("=")
        key = key.strip().lower()
        val = val.strip()
        vcol = line.index("=") + 2 + (len(line.split("=", 1)[1]) - len(line.split("=", 1)[1].lstrip()))
        if not key:
            raise ConfigError("syntax", "missing key before '='", lineno, col, source)
        if not val:
            raise ConfigError("syntax", f"missing value for '{key}'", lineno, vcol, source)
        if key in values[section]:
            raise ConfigError("syntax", f"duplicate key '{key}'", lineno, col, source)
        values[section][key] = _Entry(val, lineno, vcol, col)
    return values, section_lines


def parse_config(text: str, *, preset: str | None = None,
                 source: str = "<config>") -> RunConfig:
    """Parse and fully validate a config.

    ``preset`` (or a top-level ``preset = ...`` line) supplies base values
    that the text then overrides. The grid is mandatory one way or another.
    """
    values, section_lines = _tokenize(text, source)
    top = values.pop("")
    for key, entry in top.items():
        if key != "preset":
            raise ConfigError("unknown key", f"'{key}' must sit inside a section",
                              entry.line, entry.key_column, source)
    name = preset
    if "preset" in top:
        entry = top["preset"]
        if preset is not None and preset != entry.value:
            raise ConfigError("semantic", f"preset {entry.value!r} conflicts with {preset!r}",
                              entry.line, entry.column, source)
        name = entry.value
    merged: dict[str, dict[str, _Entry]] = {}
    if name is not None:
        if name not in PRESETS:
            raise ConfigError("semantic", f"unknown preset {name!r}; choose from "
                              f"{', '.join(sorted(PRESETS))}",
                              top["preset"].line if "preset" in top else None, None, source)
        for sec, items in PRESETS[name].items():
            merged[sec] = {k: _Entry(v, None, None) for k, v in items.items()}
    for sec, items in values.items():
        merged.setdefault(sec, {}).update(items)

    def line_of(sec: str, fieldname: str | None = None):
        items = merged.get(sec, {})
        for key, (target, _) in SCHEMA.get(sec, {}).items():
            if target == fieldname and key in items and items[key].line is not None:
                return items[key].line, items[key].column
        return section_lines.get(sec), None

    def convert(sec: str) -> dict[str, Any]:
        out = {}
        for key, entry in merged.get(sec, {}).items():
            if key not in SCHEMA[sec]:
                raise ConfigError("unknown key", f"unknown key '{key}' in [{sec}]",
                                  entry.line, entry.key_column, source)
            target, conv = SCHEMA[sec][key]
            try:
                out[target] = conv(entry.value)
            except ValueError as exc:
                raise ConfigError("syntax", f"{key}: {exc}", entry.line, entry.column,
                                  source) from None
        return out

    def build(sec: str, cls, **extra):
        kwargs = convert(sec)
        kwargs.update(extra)
        try:
            return cls(**kwargs)
        except InvariantError as exc:
            line, col = line_of(sec, exc.field)
            raise ConfigError("semantic", f"[{sec}] {exc}", line, col, source) from None
        except TypeError as exc:
            raise ConfigError("semantic", f"[{sec}] {exc}", section_lines.get(sec), None,
                              source) from None

    grid_items = convert("grid")
    missing = [k for k in ("grid_x", "grid_y") if k not in grid_items]
    if missing:
        raise ConfigError("semantic", "grid is mandatory: set [grid] x and y or use a preset",
                          section_lines.get("grid"), None, source)
    grid = build("grid", GridSpec)
    kern_items = convert("kernel")
    if "shape" not in kern_items or "amplitude" not in kern_items or "scale" not in kern_items:
        raise ConfigError("semantic", "[kernel] needs shape, amplitude and scale",
                          section_lines.get("kernel"), None, source)
    kernel = build("kernel", ConnectivityKernel)
    neuron = build("neuron", NeuronParams)
    drive = build("external", ExternalDrive)
    delays = build("synapse", DelayRule)

    tcp = []
    for key, entry in merged.get("tcp", {}).items():
        try:
            host, port = entry.value.rsplit(":", 1)
            tcp.append((int(key), host, int(port)))
        except ValueError:
            raise ConfigError("syntax", "expected '<worker id> = host:port'",
                              entry.line, entry.column, source) from None

    run = convert("run")
    out = convert("output")
    try:
        return RunConfig(grid=grid, kernel=kernel, neuron=neuron, drive=drive, delays=delays,
                         tcp_addresses=tuple(sorted(tcp)), name=name or "", **run, **out)
    except InvariantError as exc:
        sec = "output" if exc.field in ("out_dir", "raster_format") else "run"
        if exc.field == "min_delay":
            sec = "synapse"
        line, col = line_of(sec, exc.field)
        raise ConfigError("semantic", f"[{sec}] {exc}", line, col, source) from None


def load_config(path: str | Path | None, preset: str | None = None) -> RunConfig:
    if path is None:
        if preset is None:
            raise ConfigError("semantic", "give a config file or --preset")
        return parse_config("", preset=preset, source=f"preset:{preset}")
    p = Path(path)
    try:
        text = p.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError("syntax", f"not UTF-8: {exc}", source=str(p)) from None
    return parse_config(text, preset=preset, source=str(p))


def preset_config(name: str, **overrides) -> RunConfig:
    cfg = parse_config("", preset=name, source=f"preset:{name}")
    return cfg.with_overrides(**overrides) if overrides else cfg
