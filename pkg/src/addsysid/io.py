"""Dataset CSV and JSON document helpers.

Dataset files have a header ``t,u1..u<n_u>,y1..y<n_y>[,r1..r<n_y>]`` and
one row per sample; the step is taken from the ``t`` column, which must be
uniform.
"""

from __future__ import annotations

import csv
import json
import re

import numpy as np

from .errors import ValidationError
from .riv import SampledDataset

_COL = re.compile(r"^([uyr])(\d+)$")


def write_dataset(path, ds):
    cols = ["t"] + [f"u{i + 1}" for i in range(ds.n_u)] + [f"y{i + 1}" for i in range(ds.n_y)]
    blocks = [ds.t[:, None], ds.u, ds.y]
    if ds.r is not None:
        cols += [f"r{i + 1}" for i in range(ds.r.shape[1])]
        blocks.append(ds.r)
    data = np.hstack(blocks)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def _parse_header(header):
    if not header or header[0].strip() != "t":
        raise ValidationError("first column must be t", "SCHEMA")
    groups = {"u": [], "y": [], "r": []}
    for j, name in enumerate(header[1:], start=1):
        m = _COL.match(name.strip())
        if not m:
            raise ValidationError(f"unexpected column {name!r}", "SCHEMA")
        groups[m.group(1)].append((int(m.group(2)), j))
    for key, items in groups.items():
        idx = sorted(i for i, _ in items)
        if idx != list(range(1, len(idx) + 1)):
            raise ValidationError(f"{key} columns must be numbered 1..n without gaps", "SCHEMA")
    if not groups["u"] or not groups["y"]:
        raise ValidationError("need at least one u and one y column", "SCHEMA")
    if groups["r"] and len(groups["r"]) != len(groups["y"]):
        raise ValidationError("r needs one column per output", "SCHEMA")
    return {k: [j for _, j in sorted(v)] for k, v in groups.items()}


def read_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path} is empty", "SCHEMA")
    cols = _parse_header(rows[0])
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}", "SCHEMA") from exc
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] != len(rows[0]):
        raise ValidationError(f"{path}: ragged or too short", "SCHEMA")
    t = data[:, 0]
    dt = np.diff(t)
    h = float(np.mean(dt))
    if not h > 0 or np.max(np.abs(dt - h)) > 1e-6 * h:
        raise ValidationError("time column must be uniformly increasing", "NON_UNIFORM")
    r = data[:, cols["r"]] if cols["r"] else None
    return SampledDataset(h, data[:, cols["u"]], data[:, cols["y"]], r, t0=float(t[0]))


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})", "SCHEMA") from exc


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
