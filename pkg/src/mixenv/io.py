"""File formats: the long CSV layout for longitudinal data and a
deterministic JSON-like report writer.

CSV schema (header required, columns in this order):

    subject,time,y1,...,yr,x1,...,xp,z1,...,zq

One row per (subject, time) observation.  Subjects keep their order of first
appearance; rows within a subject are sorted by time.  Missing response or
covariate cells may be imputed by the column mean.

The report writer emits a JSON-like text: keys in insertion order, floats
printed with %.17g (so values round-trip exactly and reruns are
byte-identical), arrays as {"shape": ..., "data": ...} with the data flat in
row-major order.
"""

import csv
import math
import re

import numpy as np

from .errors import DataFormatError
from .model import LongitudinalDataset

_MISSING = {"", "na", "nan", "null", "none"}


def _parse_header(header):
    cols = [c.strip() for c in header]
    if len(cols) < 2 or cols[0] != "subject" or cols[1] != "time":
        raise DataFormatError("header must start with 'subject,time'")
    counts = {"y": 0, "x": 0, "z": 0}
    order = []
    for c in cols[2:]:
        m = re.fullmatch(r"([yxz])(\d+)", c)
        if not m:
            raise DataFormatError("unexpected column %r" % c)
        order.append(m.group(1))
        counts[m.group(1)] += 1
        if int(m.group(2)) != counts[m.group(1)]:
            raise DataFormatError("column %r out of sequence" % c)
    expected = ["y"] * counts["y"] + ["x"] * counts["x"] + ["z"] * counts["z"]
    if order != expected:
        raise DataFormatError("columns must be grouped as y*, x*, z*")
    if counts["y"] == 0:
        raise DataFormatError("need at least one response column y1")
    if counts["x"] == 0:
        raise DataFormatError("need at least one covariate column x1")
    if counts["z"] == 0:
        raise DataFormatError("need at least one random-effect design column z1")
    return counts["y"], counts["x"], counts["z"]


def ingest_csv(path, impute="none"):
    """Read the long CSV layout into a LongitudinalDataset.

    impute='none' rejects missing cells; impute='mean' fills each missing
    y/x/z cell with its column mean over the observed rows.  Returns
    (dataset, summary) where summary records the inferred sizes and the
    number of imputed cells.
    """
    if impute not in ("none", "mean"):
        raise DataFormatError("impute must be 'none' or 'mean', got %r" % (impute,))
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty CSV file")
        r, p, q = _parse_header(header)
        width = 2 + r + p + q
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise DataFormatError(
                    "line %d has %d fields, expected %d" % (lineno, len(row), width))
            rows.append((lineno, row))
    if not rows:
        raise DataFormatError("no data rows")

    values = np.empty((len(rows), r + p + q))
    missing = np.zeros_like(values, dtype=bool)
    subjects = []
    times = np.empty(len(rows))
    for k, (lineno, row) in enumerate(rows):
        subjects.append(row[0].strip())
        try:
            times[k] = float(row[1])
        except ValueError:
            raise DataFormatError("line %d: time %r is not numeric" % (lineno, row[1]))
        for j, cell in enumerate(row[2:]):
            cell = cell.strip()
            if cell.lower() in _MISSING:
                missing[k, j] = True
                values[k, j] = np.nan
                continue
            try:
                values[k, j] = float(cell)
            except ValueError:
                raise DataFormatError(
                    "line %d: field %r is not numeric" % (lineno, cell))

    n_imputed = int(missing.sum())
    if n_imputed:
        if impute == "none":
            bad = int(np.argmax(missing.any(axis=1)))
            raise DataFormatError(
                "missing value at line %d (pass impute='mean' to fill)" % rows[bad][0])
        for j in range(values.shape[1]):
            col = values[:, j]
            if missing[:, j].all():
                raise DataFormatError("column %d has no observed values" % (j + 3))
            col[missing[:, j]] = col[~missing[:, j]].mean()

    by_subject = {}
    order = []
    for k, sid in enumerate(subjects):
        if sid not in by_subject:
            by_subject[sid] = []
            order.append(sid)
        by_subject[sid].append(k)

    Ys, Xs, Zs = [], [], []
    for sid in order:
        idx = by_subject[sid]
        t = times[idx]
        if len(set(t.tolist())) != len(idx):
            raise DataFormatError("duplicate (subject, time) pair for subject %r" % sid)
        srt = [idx[j] for j in np.argsort(t, kind="stable")]
        block = values[srt]
        Ys.append(block[:, :r].T)
        Xs.append(block[:, r:r + p].T)
        Zs.append(block[:, r + p:].T)
    data = LongitudinalDataset(Ys, Xs, Zs)
    summary = {
        "n": data.n, "r": data.r, "p": data.p, "q": data.q,
        "J_total": data.J_total,
        "J_min": int(data.J.min()), "J_max": int(data.J.max()),
        "n_imputed": n_imputed,
        "subject_ids": order,
    }
    return data, summary


def export_csv(data, path, subject_ids=None):
    """Write a dataset in the long CSV layout (times are 1..J_i per subject).

    Floats are printed with %.17g, so a write/read round trip reproduces the
    numbers exactly.
    """
    if subject_ids is None:
        subject_ids = [str(i) for i in range(data.n)]
    header = (["subject", "time"]
              + ["y%d" % (k + 1) for k in range(data.r)]
              + ["x%d" % (k + 1) for k in range(data.p)]
              + ["z%d" % (k + 1) for k in range(data.q)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(data.n):
            yi, xi, zi = data.subject(i)
            for j in range(int(data.J[i])):
                row = [subject_ids[i], "%d" % (j + 1)]
                row += ["%.17g" % v for v in yi[:, j]]
                row += ["%.17g" % v for v in xi[:, j]]
                row += ["%.17g" % v for v in zi[:, j]]
                writer.writerow(row)


def _format_float(x):
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return "%.17g" % x


_ESCAPES = {"\\": "\\\\", '"': '\\"', "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _format_str(s):
    out = ['"']
    for ch in s:
        if ch in _ESCAPES:
            out.append(_ESCAPES[ch])
        elif ord(ch) < 0x20:
            out.append("\\u%04x" % ord(ch))
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def _render(obj, indent, out):
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for k, (key, val) in enumerate(items):
            out.append(pad + "  " + _format_str(str(key)) + ": ")
            _render(val, indent + 1, out)
            out.append(",\n" if k + 1 < len(items) else "\n")
        out.append(pad + "}")
    elif isinstance(obj, np.ndarray):
        flat = obj.reshape(-1)
        if obj.dtype.kind in "iu":
            data = [int(v) for v in flat]
        elif obj.dtype.kind == "b":
            data = [bool(v) for v in flat]
        else:
            data = [float(v) for v in flat]
        _render({"shape": list(obj.shape), "data": data}, indent, out)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[")
        for k, val in enumerate(obj):
            if k:
                out.append(", ")
            _render(val, indent, out)
        out.append("]")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_format_float(float(obj)))
    elif obj is None:
        out.append("null")
    elif isinstance(obj, str):
        out.append(_format_str(obj))
    else:
        raise TypeError("cannot serialize %r of type %s" % (obj, type(obj).__name__))


def dumps(obj):
    """Deterministic JSON-like text for a report object."""
    out = []
    _render(obj, 0, out)
    out.append("\n")
    return "".join(out)


def write_json(obj, path):
    text = dumps(obj)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return text
