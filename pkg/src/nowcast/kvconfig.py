"""Plain ``key = value`` text configuration files."""

from .errors import ConfigurationError


def parse_kv(text, source="<text>"):
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path):
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), source=str(path))


def format_kv(mapping):
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in mapping.items())


def write_kv(path, mapping):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(mapping))


def _fmt(value):
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def to_bool(value, key="value"):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {value!r}")


def to_list(value, cast=str):
    if isinstance(value, (list, tuple)):
        return [cast(v) for v in value]
    return [cast(v.strip()) for v in str(value).split(",") if v.strip()]


def check_keys(mapping, allowed, where="config"):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{where}: unknown key(s): {', '.join(unknown)}")
