"""Reading and writing data streams as CSV.

Two schemas are understood:

``scores``
    a ``score`` column plus optional ``x_*`` feature columns (any other
    column, such as ``t``, is ignored);
``regression``
    ``x_*`` feature columns and a ``y`` label column.

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from multivalid.core import DomainError, GroupSystem
from multivalid.harness.generators import Stream

SCHEMAS = ("scores", "regression")


class SchemaError(DomainError):
    """The CSV header does not match the requested schema."""


def _rows(fh):
    for lineno, line in enumerate(fh, 1):
        if line.startswith("#") or not line.strip():
            continue
        yield lineno, line


def _float(text: str, lineno: int, column: str, path) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DomainError(f"{path}:{lineno}: column {column!r} has non-numeric value {text!r}") \
            from None
    if math.isnan(v):
        raise DomainError(f"{path}:{lineno}: column {column!r} is NaN")
    return v


def ingest_csv(path, schema: str = "scores") -> Stream:
    """Load a stream in file order; ``feature_names`` records the ``x_*`` columns."""
    if schema not in SCHEMAS:
        raise SchemaError(f"schema must be one of {SCHEMAS}, got {schema!r}")
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DomainError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = _rows(fh)
        try:
            lineno, header_line = next(rows)
        except StopIteration:
            raise SchemaError(f"{path}: file has no header") from None
        header = [h.strip() for h in next(csv.reader([header_line]))]
        feats = [h for h in header if h.startswith("x_")]
        target = "score" if schema == "scores" else "y"
        if target not in header:
            raise SchemaError(f"{path}: {schema} schema needs a {target!r} column; "
                              f"header is {header}")
        if schema == "regression" and not feats:
            raise SchemaError(f"{path}: regression schema needs x_* feature columns")
        col = {h: j for j, h in enumerate(header)}
        X, vals = [], []
        for lineno, line in rows:
            rec = next(csv.reader([line]))
            if len(rec) != len(header):
                raise DomainError(f"{path}:{lineno}: expected {len(header)} fields, "
                                  f"got {len(rec)}")
            vals.append(_float(rec[col[target]], lineno, target, path))
            X.append([_float(rec[col[f]], lineno, f, path) for f in feats])
    if not vals:
        raise DomainError(f"{path}: no data rows")
    features = np.array(X, dtype=float).reshape(len(vals), len(feats))
    if schema == "scores":
        scores = np.array(vals)
        if np.any(scores < 0):
            raise DomainError(f"{path}: scores must be nonnegative")
        return Stream(scores=scores, features=features if feats else None,
                      feature_names=tuple(feats))
    return Stream(features=features, labels=np.array(vals), feature_names=tuple(feats))


def write_stream(stream: Stream, fh, comments=()):
    """Write a stream in the schema :func:`ingest_csv` reads back exactly."""
    for line in comments:
        fh.write(f"# {line}\n")
    w = csv.writer(fh, lineterminator="\n")
    d = 0 if stream.features is None else stream.features.shape[1]
    names = list(stream.feature_names or [f"x_{j + 1}" for j in range(d)])
    if stream.is_regression:
        w.writerow(names + ["y"])
        for x, y in zip(stream.features, stream.labels):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    else:
        w.writerow(["t"] + names + ["score"])
        for t, s in enumerate(stream.scores, 1):
            x = stream.features[t - 1] if d else ()
            w.writerow([t] + [repr(float(v)) for v in x] + [repr(float(s))])


def export_csv(stream: Stream, path, comments=()):
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            write_stream(stream, fh, comments)
    except OSError as exc:
        raise DomainError(f"cannot write {path}: {exc}") from exc


def column_groups(stream: Stream, columns) -> tuple[GroupSystem, np.ndarray]:
    """One group per distinct value of each listed feature column.

    With no columns the system is the single group ``all``.
    Returns the group system and its membership matrix over the stream.
    """
    if not columns:
        return GroupSystem.everything(), np.ones((len(stream), 1), dtype=bool)
    names = list(stream.feature_names or ())
    features = stream.features
    groups, cols = [], []
    for c in columns:
        if c not in names:
            raise SchemaError(f"group column {c!r} is not among the features {names}")
        j = names.index(c)
        for v in np.unique(features[:, j]):
            groups.append((f"{c}={v:g}", lambda x, j=j, v=v: x[j] == v))
            cols.append(features[:, j] == v)
    return GroupSystem(groups), np.column_stack(cols)
