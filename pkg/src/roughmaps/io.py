"""Plain-text formats: field tables, norm reports, flat configs and versioned CSV."""

import csv
import io as _io
import os

import numpy as np

FORMAT_VERSION = 1


def fmt(x):
    """Round-trippable, platform-independent number formatting."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


# -- fields -----------------------------------------------------------------


def write_field(path, coords, values, meta=None):
    """One header line, then one row per node: coordinates followed by components.

    ``coords``: (..., k); ``values``: (..., m) with matching leading shape.
    """
    coords = np.asarray(coords, float).reshape(-1, np.shape(coords)[-1])
    values = np.asarray(values, float).reshape(len(coords), -1)
    k, m = coords.shape[1], values.shape[1]
    head = [f"# roughmaps-field v{FORMAT_VERSION}", f"dims={k}", f"components={m}", f"nodes={len(coords)}"]
    head += [f"{key}={fmt(val)}" for key, val in (meta or {}).items()]
    with open(path, "w") as fh:
        fh.write(" ".join(head) + "\n")
        for c, v in zip(coords, values):
            fh.write(" ".join(fmt(x) for x in c) + " " + " ".join(fmt(x) for x in v) + "\n")


def read_field(path):
    """Inverse of :func:`write_field`: returns ``(coords, values, meta)``."""
    with open(path) as fh:
        head = fh.readline().split()
        meta = dict(item.split("=", 1) for item in head[3:])
        data = np.loadtxt(fh, ndmin=2)
    k = int(meta["dims"])
    return data[:, :k], data[:, k:], meta


# -- key = value reports ----------------------------------------------------


def _flatten(d, prefix=""):
    out = {}
    for key, val in d.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten(val, name + "."))
        elif isinstance(val, (list, tuple)):
            out[name] = ",".join(fmt(x) for x in val)
        elif val is None:
            out[name] = "none"
        else:
            out[name] = fmt(val)
    return out


def report_text(report):
    """Dataclass or dict rendered as sorted ``key = value`` lines."""
    d = report.as_dict() if hasattr(report, "as_dict") else (report if isinstance(report, dict) else vars(report))
    flat = _flatten(d)
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


def report_row(report, keys):
    flat = _flatten(report.as_dict() if hasattr(report, "as_dict") else dict(report))
    return [flat.get(k, "") for k in keys]


def write_report(path, report):
    with open(path, "w") as fh:
        fh.write(report_text(report))


def read_kv(path):
    """Parse a ``key = value`` file (``#`` starts a comment) into a dict of strings."""
    with open(path) as fh:
        return parse_kv(fh.read())


class ConfigSyntaxError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"invalid config key {key!r}: {msg}")
        self.key = key


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(line, f"line {lineno} is not of the form key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError("", f"line {lineno} has an empty key")
        if key in out:
            raise ConfigSyntaxError(key, "duplicate key")
        out[key] = val
    return out


def format_kv(d):
    return "".join(f"{k} = {fmt(d[k])}\n" for k in d)


# -- versioned CSV ----------------------------------------------------------


def write_csv(path, columns, rows, kind="table"):
    """CSV with a leading ``# roughmaps-csv v<N> <kind>`` comment; LF line endings."""
    buf = _io.StringIO()
    buf.write(f"# roughmaps-csv v{FORMAT_VERSION} {kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path):
    """Returns ``(kind, columns, rows)`` with rows as lists of strings."""
    with open(path, newline="") as fh:
        first = fh.readline().split()
        if len(first) < 3 or first[1] != "roughmaps-csv":
            raise ValueError(f"{path}: missing version header")
        rd = list(csv.reader(fh))
    kind = first[3] if len(first) > 3 else ""
    return kind, rd[0], rd[1:]


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
