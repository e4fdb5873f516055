"""Small serialization helpers shared by the file formats."""

import json
import math

import numpy as np


def fmt17(v):
    """Render a float at 17 significant digits (round-trips any double)."""
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {v!r} cannot be serialized")
    return format(v, ".17g")


def dumps17(obj, indent=None):
    """JSON-encode ``obj`` writing every float with 17 significant digits.

    Handles dicts, lists/tuples, numpy arrays and scalars, str, int, bool
    and None. Key order is preserved so output bytes are reproducible.
    """
    return _enc(obj, indent, 0)


def _enc(obj, indent, level):
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt17(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        items = [_enc(v, None, 0) for v in obj]
        return "[" + ",".join(items) + "]"
    if isinstance(obj, dict):
        parts = [f"{json.dumps(str(k))}:{_enc(v, indent, level + 1)}" for k, v in obj.items()]
        if indent is None:
            return "{" + ",".join(parts) + "}"
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        return "{\n" + ",\n".join(pad + p for p in parts) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")
