"""Atomic, byte-stable file writers shared by the CLI."""
import csv
import io
import json
import math
import os
import tempfile

import numpy as np


def atomic_write(path, data, mode="w"):
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode + ("b" if isinstance(data, bytes) else "")) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def clean(obj):
    """Plain-python copy of ``obj`` with non-finite floats mapped to None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps_json(obj):
    # json writes floats with repr, so values round-trip exactly
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj):
    return atomic_write(path, dumps_json(obj))


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return atomic_write(path, buf.getvalue())


def write_columns(path, columns):
    """CSV from a dict of equal-length columns, keeping the dict order."""
    header = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    rows = ([columns[k][i] for k in header] for i in range(n))
    return write_csv(path, header, rows)
