"""Flat ``key = value`` configuration files with command-line overrides."""

from .errors import FormatError, InvalidParams


def parse_kv_lines(lines):
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError("empty key", lineno)
        out[key] = value.strip()
    return out


def parse_kv_file(path):
    with open(path) as fh:
        return parse_kv_lines(fh)


def parse_overrides(items):
    """``["k=v", ...]`` from repeated ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise InvalidParams(item, "--set expects key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class Config(dict):
    """String-valued settings with typed accessors."""

    def get_float(self, key, default):
        try:
            return float(self[key]) if key in self else float(default)
        except ValueError:
            raise InvalidParams(key, f"expected a number, got {self[key]!r}") from None

    def get_int(self, key, default):
        try:
            return int(self[key]) if key in self else int(default)
        except ValueError:
            raise InvalidParams(key, f"expected an integer, got {self[key]!r}") from None

    def get_str(self, key, default=None):
        return self.get(key, default)


def load_config(path=None, overrides=None):
    cfg = Config(parse_kv_file(path) if path else {})
    cfg.update(parse_overrides(overrides))
    return cfg
