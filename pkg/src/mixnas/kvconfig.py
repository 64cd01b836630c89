"""Flat key=value run-configuration files with include support.

Chosen over positional flags for reproducibility: the resolved text is
copied verbatim into every report. ``include other.cfg`` splices another
file at that point (relative to the including file); later assignments
override earlier ones.
"""

from __future__ import annotations

import os


class RunConfigError(ValueError):
    pass


def parse_text(text: str, base_dir: str = ".") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            target = line[len("include ") :].strip()
            path = target if os.path.isabs(target) else os.path.join(base_dir, target)
            out.update(parse_file(path))
            continue
        if "=" not in line:
            raise RunConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise RunConfigError(f"line {lineno}: empty key")
        out[key] = val
    return out


def parse_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise RunConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_text(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def dumps(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.items())


class Getter:
    """Typed access with defaults over the parsed string map."""

    def __init__(self, cfg: dict[str, str]):
        self.cfg = cfg
        self.used: set[str] = set()

    def str(self, key: str, default: str | None = None) -> str:
        self.used.add(key)
        if key in self.cfg:
            return self.cfg[key]
        if default is None:
            raise RunConfigError(f"missing required config key {key!r}")
        return default

    def int(self, key: str, default: int | None = None) -> int:
        val = self.str(key, None if default is None else str(default))
        try:
            return int(val)
        except ValueError:
            raise RunConfigError(f"{key}: expected an integer, got {val!r}") from None

    def float(self, key: str, default: float | None = None) -> float:
        val = self.str(key, None if default is None else str(default))
        try:
            return float(val)
        except ValueError:
            raise RunConfigError(f"{key}: expected a number, got {val!r}") from None

    def bool(self, key: str, default: bool) -> bool:
        val = self.str(key, str(default)).lower()
        if val in ("1", "true", "yes", "on"):
            return True
        if val in ("0", "false", "no", "off"):
            return False
        raise RunConfigError(f"{key}: expected a boolean, got {val!r}")

    def opt_int(self, key: str) -> int | None:
        if key not in self.cfg:
            return None
        return self.int(key)
