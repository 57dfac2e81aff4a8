"""Run configuration: an INI file with [dataset], [model], [attack], [victim]
and [output] sections.

Every key has a type and either a default or is required. The canonical form
lists sections and keys sorted, with normalized values and defaults filled
in; its SHA-256 identifies a run. The [output] section does not change what
is computed and is left out of the hash.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from typing import Any, Optional

from suslab.errors import ConfigError

REQUIRED = object()


def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    if not v.strip():
        raise ValueError("empty list")
    return tuple(int(s) for s in v.split(","))


def _opt_int(v: str) -> Optional[int]:
    return None if v.strip().lower() in ("", "none") else int(v)


def _variant(v: str) -> str:
    norm = v.strip().upper().replace("-", "_")
    if norm not in ("SUS_F", "SUS_R"):
        raise ValueError("expected sus-f or sus-r")
    return norm


def _hide(v: str):
    s = v.strip().lower()
    return s if s in ("all", "fc_only") else _ints(s)


def _choice(*options):
    def parse(v: str) -> str:
        s = v.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "dataset": {
        "kind": (_choice("synthetic_digits", "external"), REQUIRED),
        "path": (str, ""),
        "seed": (_int, 0),
        "size": (_int, 6000),
        "test_fraction": (_float, 0.25),
        "poison_fraction": (_float, 0.1),
        "trigger": (_choice("corner_patch", "blend", "random_patch"), "corner_patch"),
        "trigger_size": (_int, 2),
        "trigger_value": (_float, 1.0),
        "trigger_alpha": (_float, 0.2),
        "per_sample_position": (_bool, True),
        "target": (_int, 0),
    },
    "model": {
        "dims": (_ints, REQUIRED),
        "fc_head": (_int, 0),
        "seed": (_int, 0),
    },
    "attack": {
        "variant": (_variant, REQUIRED),
        "tau_policy": (_choice("default", "fixed", "percentile"), "default"),
        "tau_value": (_float, 0.0),
        "delta": (_float, 1e-3),
        "hide_layers": (_hide, "all"),
        "hide_biases": (_bool, False),
        "phase1_epochs": (_int, 20),
        "phase1_batch_size": (_int, 32),
        "phase1_learning_rate": (_float, 0.05),
        "phase1_momentum": (_float, 0.9),
        "phase2_epochs": (_int, 20),
        "phase2_batch_size": (_int, 32),
        "phase2_learning_rate": (_float, 0.05),
        "phase2_momentum": (_float, 0.9),
        # None -> phase 2 reuses the phase-1 poison split
        "phase2_poison_seed": (_opt_int, None),
    },
    "victim": {
        "library": (_choice("full_layers", "fc_only"), "full_layers"),
        "permute": (_bool, False),
        "finetune_fraction": (_float, 0.1),
        "finetune_epochs": (_int, 2),
        "finetune_batch_size": (_int, 32),
        "finetune_learning_rate": (_float, 0.05),
        "finetune_momentum": (_float, 0.9),
    },
    "output": {
        "dir": (str, "runs/default"),
    },
}

HASHED_SECTIONS = ("attack", "dataset", "model", "victim")


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def get(self, dotted: str):
        section, key = dotted.split(".")
        return self.values[section][key]

    def replace(self, **dotted) -> "RunConfig":
        """Copy with overrides given as ``section__key=value``."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for name, v in dotted.items():
            section, key = name.split("__")
            if key not in SCHEMA.get(section, {}):
                raise ConfigError(f"{section}.{key}", "unknown field")
            vals[section][key] = v
        return RunConfig(vals)

    def canonical(self, sections=HASHED_SECTIONS) -> str:
        lines = []
        for section in sorted(sections):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_text(self) -> str:
        return self.canonical(tuple(SCHEMA))


def from_mapping(raw: dict[str, dict[str, str]]) -> RunConfig:
    values: dict[str, dict[str, Any]] = {}
    for section in raw:
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        for key in raw[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown field")
    for section, fields in SCHEMA.items():
        given = raw.get(section, {})
        out = {}
        for key, (parse, default) in fields.items():
            path = f"{section}.{key}"
            if key in given:
                try:
                    out[key] = parse(given[key])
                except ValueError as exc:
                    raise ConfigError(path, f"invalid value {given[key]!r}: {exc}") from None
            elif default is REQUIRED:
                raise ConfigError(path, "missing required field")
            else:
                out[key] = default
        values[section] = out
    return RunConfig(values)


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    return from_mapping({s: dict(parser[s]) for s in parser.sections()})


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def default_config(variant: str = "SUS_F", **overrides) -> RunConfig:
    cfg = from_mapping({
        "dataset": {"kind": "synthetic_digits"},
        "model": {"dims": "64,128,64,32,10"},
        "attack": {"variant": variant},
    })
    return cfg.replace(**overrides) if overrides else cfg
