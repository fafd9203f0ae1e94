"""CSV and JSON interchange.

Long-format records: ``id,from,to,tstart,tstop,status`` (status 1 =
transitioned, 0 = censored).  Covariates: ``id,x1,...,xp``.  Graphs are JSON
objects ``{"num_states": K, "transitions": [[j, k], ...], "absorbing": [...]}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .core import MultiStateDataset, TransitionGraph, infer_graph
from .errors import ParseError

RECORD_HEADER = ["id", "from", "to", "tstart", "tstop", "status"]


def fmt(x) -> str:
    """Shortest round-tripping text for a number."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _coerce_ids(raw_ids):
    try:
        return [int(v) for v in raw_ids]
    except ValueError:
        return list(raw_ids)


def _open_text(source):
    if isinstance(source, (str, Path)):
        return open(source, newline=""), str(source)
    return source, getattr(source, "name", None)


def read_graph(source) -> TransitionGraph:
    if isinstance(source, dict):
        return TransitionGraph.from_dict(source)
    with open(source) as fh:
        return TransitionGraph.from_dict(json.load(fh))


def write_graph(graph: TransitionGraph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), indent=2) + "\n")


def read_covariates(source):
    """Return ``(ids, matrix, names)`` from an ``id,x1,...`` CSV."""
    fh, name = _open_text(source)
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty covariate file", line=1, path=name) from None
        if not header or header[0].strip() != "id":
            raise ParseError("first column must be 'id'", line=1, path=name)
        names = [h.strip() for h in header[1:]]
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=lineno, path=name)
            try:
                rows.append([float(c) for c in row[1:]])
            except ValueError as exc:
                raise ParseError(f"non-numeric covariate: {exc}", line=lineno, path=name) from None
            ids.append(row[0].strip())
    return _coerce_ids(ids), np.array(rows, dtype=float).reshape(len(rows), len(names)), names


def read_records(source, graph: TransitionGraph | None = None, covariates=None, horizon=None) -> MultiStateDataset:
    """Parse a long-format CSV into an (unvalidated) dataset.

    ``covariates`` may be a path/file for the companion CSV or an
    ``(ids, matrix, names)`` triple.  Subjects missing from it get NaN rows.
    """
    fh, name = _open_text(source)
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty record file", line=1, path=name) from None
        if header != RECORD_HEADER:
            raise ParseError(f"header must be {','.join(RECORD_HEADER)}, got {','.join(header)}", line=1, path=name)
        raw_ids, cols = [], [[] for _ in range(5)]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise ParseError(f"expected 6 fields, got {len(row)}", line=lineno, path=name)
            try:
                a, b = int(row[1]), int(row[2])
                t0, t1 = float(row[3]), float(row[4])
                st = int(row[5])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=name) from None
            if st not in (0, 1):
                raise ParseError(f"status must be 0 or 1, got {st}", line=lineno, path=name)
            raw_ids.append(row[0].strip())
            for col, v in zip(cols, (a, b, t0, t1, st)):
                col.append(v)

    rec_ids = _coerce_ids(raw_ids)
    ids, index = [], {}
    for sid in rec_ids:
        if sid not in index:
            index[sid] = len(ids)
            ids.append(sid)
    if graph is None:
        graph = infer_graph(cols[0], cols[1], cols[4])

    names = None
    X = np.zeros((len(ids), 0))
    if covariates is not None:
        if isinstance(covariates, tuple):
            cov_ids, cov_X, names = covariates
        else:
            cov_ids, cov_X, names = read_covariates(covariates)
        lookup = {sid: i for i, sid in enumerate(cov_ids)}
        X = np.full((len(ids), cov_X.shape[1]), np.nan)
        for sid, i in index.items():
            j = lookup.get(sid)
            if j is not None:
                X[i] = cov_X[j]
    return MultiStateDataset(
        graph,
        ids,
        [index[s] for s in rec_ids],
        *cols,
        covariates=X,
        horizon=horizon,
        covariate_names=names,
    )


def records_to_csv(dataset: MultiStateDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    ids = dataset.subject_ids
    for s, a, b, t0, t1, st in zip(
        dataset.subject, dataset.from_state, dataset.to_state, dataset.t_start, dataset.t_stop, dataset.status
    ):
        w.writerow([ids[s], int(a), int(b), fmt(t0), fmt(t1), int(st)])
    return buf.getvalue()


def covariates_to_csv(dataset: MultiStateDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", *dataset.covariate_names])
    for sid, row in zip(dataset.subject_ids, dataset.covariates):
        w.writerow([sid, *(fmt(v) for v in row)])
    return buf.getvalue()


def write_dataset(dataset: MultiStateDataset, records_path, covariates_path=None) -> None:
    Path(records_path).write_text(records_to_csv(dataset))
    if covariates_path is not None:
        Path(covariates_path).write_text(covariates_to_csv(dataset))


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_rows(path) -> tuple:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
