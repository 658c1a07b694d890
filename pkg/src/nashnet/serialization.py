"""Deterministic JSON and CSV writers.

Floats are written with 17 significant digits so every value round-trips
exactly, and output never depends on locale or dict hashing.
"""

import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

FLOAT_FORMAT = ".17g"


def format_float(x):
    x = float(x)
    if math.isnan(x):
        return '"nan"'
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    out = format(x, FLOAT_FORMAT)
    # keep floats recognisable as floats after a round trip
    if "e" not in out and "." not in out and "n" not in out:
        out += ".0"
    return out


def to_builtin(obj):
    """Convert numpy containers and scalars to plain Python objects."""
    if hasattr(obj, "to_dict"):
        return to_builtin(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_builtin(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_builtin(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_builtin(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write(obj, out, indent, level):
    pad = "\n" + " " * (indent * (level + 1)) if indent else ""
    end = "\n" + " " * (indent * level) if indent else ""
    sep = "," if indent else ", "
    if obj is None:
        out.write("null")
    elif obj is True:
        out.write("true")
    elif obj is False:
        out.write("false")
    elif isinstance(obj, int):
        out.write(str(obj))
    elif isinstance(obj, float):
        out.write(format_float(obj))
    elif isinstance(obj, str):
        out.write(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            out.write("{}")
            return
        out.write("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.write(sep)
            out.write(pad + json.dumps(str(k), ensure_ascii=False) + ": ")
            _write(v, out, indent, level + 1)
        out.write(end + "}")
    elif isinstance(obj, list):
        if not obj:
            out.write("[]")
            return
        # flat numeric lists stay on one line
        flat = all(not isinstance(v, (list, dict)) for v in obj)
        out.write("[")
        for i, v in enumerate(obj):
            if i:
                out.write(", " if flat else sep)
            if not flat:
                out.write(pad)
            _write(v, out, indent, level + 1)
        out.write(("" if flat else end) + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=2):
    """Serialize to a JSON string with fixed float formatting."""
    buf = io.StringIO()
    _write(to_builtin(obj), buf, indent, 0)
    return buf.getvalue() + "\n"


def dump(obj, path, indent=2):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj, indent=indent), encoding="utf-8")
    return path


def dumps_line(obj):
    """Single-line JSON, for JSON-lines logs."""
    return dumps(obj, indent=0).strip()


def csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v).strip('"')
    return str(v)


def to_csv(header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(csv_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(header, rows), encoding="utf-8")
    return path


def config_hash(config):
    """SHA-256 of the canonical JSON form of a config document."""
    canon = json.dumps(to_builtin(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
