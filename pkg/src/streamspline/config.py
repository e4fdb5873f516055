"""Flat ``key = value`` config files (manifests).

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are typed on read: ints, floats, comma-separated lists of numbers,
``true``/``false``/``none``, anything else stays a string. Writing uses
17 significant digits for floats so a manifest replays bit-identically.
"""

from streamspline._io import fmt17


class ConfigError(ValueError):
    """Malformed config file or invalid setting."""


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    if "," in text:
        return [parse_value(t) for t in text.split(",")]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return fmt17(v)
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    if hasattr(v, "tolist"):
        return format_value(v.tolist())
    s = str(v)
    if "\n" in s or "#" in s:
        raise ConfigError(f"value {s!r} cannot be stored in a flat config")
    return s


def loads(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{lineno}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load(path):
    with open(path) as fh:
        return loads(fh.read(), str(path))


def dumps(settings):
    lines = []
    for key, value in settings.items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


def dump(settings, path):
    with open(path, "w") as fh:
        fh.write(dumps(settings))
