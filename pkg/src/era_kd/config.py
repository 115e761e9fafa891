"""Flat ``key = value`` run configuration with dotted keys.

Every key has a default; the defaults describe the reference synthetic task.
Unknown keys are rejected with :class:`ConfigError` naming the key.
"""
from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError, EraError
from .losses import SCHEDULES

ENV_OUTPUT_DIR = "ERA_OUTPUT_DIR"
RESOLVED_NAME = "config.txt"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "run_id": (_str, "default"),
    "output_dir": (_str, ""),
    "data.num_classes": (int, 5),
    "data.input_dim": (int, 16),
    "data.samples_per_class": (int, 400),
    "data.radius": (float, 4.0),
    "data.cluster_scale": (float, 1.0),
    "data.label_noise": (float, 0.0),
    "data.seed": (int, 0),
    "data.train_csv": (_str, ""),
    "data.test_csv": (_str, ""),
    "teacher.hidden": (_ints, (64,)),
    "teacher.dim": (int, 32),
    "teacher.final_relu": (_bool, False),
    "teacher.epochs": (int, 40),
    "teacher.learning_rate": (float, 0.005),
    "student.hidden": (_ints, ()),
    "student.dim": (int, 2),
    "student.final_relu": (_bool, False),
    "train.epochs": (int, 40),
    "train.batch_size": (int, 64),
    "train.learning_rate": (float, 0.005),
    "train.momentum": (float, 0.9),
    "train.weight_decay": (float, 5e-4),
    "train.lr_milestones": (_floats, (0.5, 0.75)),
    "train.lr_decay": (float, 0.1),
    "loss.alpha": (float, 1.0),
    "loss.beta": (float, 2.0),
    "loss.gamma": (float, 1.0),
    "loss.lambda": (float, 1.0),
    "loss.temperature": (float, 4.0),
    "loss.schedule": (_str, "exp_decay"),
    "era.K": (int, 4),
    "era.m": (int, 2),
    "era.branch_width": (int, 0),
    "era.branch_hidden": (int, 0),
    "era.branch_feed": (_str, "cascaded"),
    "era.head_t_frozen": (_bool, True),
    "era.detach_targets": (_bool, True),
    "infer.mode": (_str, "st"),
    "infer.mu": (float, 0.5),
    "infer.branches": (int, -1),
    "ablate.seeds": (int, 5),
}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved run configuration; read values with ``cfg["train.epochs"]``."""

    def __init__(self, values: dict | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        parser = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = parser(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}", key=key) from None
        self._values[key] = value
        self._check(key)

    def _check(self, key: str) -> None:
        v = self._values[key]
        if key == "loss.schedule" and v not in SCHEDULES:
            raise ConfigError(f"loss.schedule must be one of {SCHEDULES}, got {v!r}", key=key)
        if key == "era.branch_feed" and v not in ("cascaded", "parallel"):
            raise ConfigError(f"era.branch_feed must be cascaded or parallel, got {v!r}", key=key)
        if key == "infer.mode" and v.lower() not in ("s", "t", "st"):
            raise ConfigError(f"infer.mode must be s, t or st, got {v!r}", key=key)
        if key == "run_id" and (not v or "/" in v or v in (".", "..")):
            raise ConfigError(f"run_id must be a plain directory name, got {v!r}", key=key)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        return self._values[key]

    def items(self):
        return sorted(self._values.items())

    def copy(self, **overrides) -> "RunConfig":
        out = RunConfig(dict(self._values))
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())

    @property
    def run_dir(self) -> Path:
        root = self["output_dir"] or os.environ.get(ENV_OUTPUT_DIR) or "runs"
        return Path(root) / self["run_id"]

    def write_resolved(self, directory=None) -> Path:
        directory = Path(directory) if directory is not None else self.run_dir
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_NAME
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", key=key)
        out[key] = value
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_text(text, str(path)))
    values.update(overrides or {})
    try:
        return RunConfig(values)
    except ConfigError:
        raise
    except EraError as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``["--train.epochs", "3", "--seed=2"]`` -> ``{"train.epochs": "3", "seed": "2"}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}", key=body)
            key, value = body, tokens[i + 1]
            i += 2
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        out[key] = value
    return out
