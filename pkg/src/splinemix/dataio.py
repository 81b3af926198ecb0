"""CSV ingestion and export of longitudinal datasets.

Outcomes travel in long format (id, time, y) so each individual can have any
number of occasions; covariates travel wide (id, one named column each).
Lines starting with '#' are header/comment rows and are skipped. Designated
direct-effect covariates are standardized on ingest (sample mean 0, SD 1)
with the transform recorded so reports can state the scale.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import LongitudinalDataset
from .errors import InvalidInputError

__all__ = ["IngestResult", "ingest", "export_dataset"]


@dataclass(frozen=True)
class IngestResult:
    dataset: LongitudinalDataset
    notices: tuple  # human-readable normalization notes
    standardization: dict  # covariate -> (mean, sd) applied on ingest


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = []
        for lineno, raw in enumerate(fh, start=1):
            if raw.lstrip().startswith("#") or not raw.strip():
                continue
            rows.append((lineno, raw))
    header = None
    parsed = []
    reader = csv.reader(r for _, r in rows)
    linenos = [ln for ln, _ in rows]
    for i, fields in enumerate(reader):
        if header is None:
            header = [f.strip() for f in fields]
            continue
        parsed.append((linenos[i], [f.strip() for f in fields]))
    if header is None:
        raise InvalidInputError(f"{path}: no header row found")
    return header, parsed


def _to_float(value, path, lineno, column):
    try:
        return float(value)
    except ValueError:
        raise InvalidInputError(
            f"{path}: non-numeric value {value!r} in column {column!r} at line {lineno}"
        ) from None


def ingest(
    outcomes_path,
    covariates_path=None,
    expert_covariates=(),
    standardize: bool = True,
) -> IngestResult:
    """Load a dataset from the long-outcomes / wide-covariates CSV pair."""
    header, rows = _read_rows(outcomes_path)
    lowered = [h.lower() for h in header]
    for required in ("id", "time", "y"):
        if required not in lowered:
            raise InvalidInputError(f"{outcomes_path}: missing column {required!r}")
    id_col, t_col, y_col = (lowered.index(c) for c in ("id", "time", "y"))
    per_id: dict[str, list] = {}
    seen_pairs = set()
    for lineno, fields in rows:
        if len(fields) < len(header):
            raise InvalidInputError(f"{outcomes_path}: short row at line {lineno}")
        ident = fields[id_col]
        t = _to_float(fields[t_col], outcomes_path, lineno, "time")
        y = _to_float(fields[y_col], outcomes_path, lineno, "y")
        key = (ident, t)
        if key in seen_pairs:
            raise InvalidInputError(
                f"{outcomes_path}: duplicate (id, time) pair {key} at line {lineno}"
            )
        seen_pairs.add(key)
        per_id.setdefault(ident, []).append((t, y))
    if not per_id:
        raise InvalidInputError(f"{outcomes_path}: no data rows")

    notices = []
    ids = list(per_id)
    times, outcomes = [], []
    unsorted_ids = []
    for ident in ids:
        obs = per_id[ident]
        t = np.array([o[0] for o in obs])
        y = np.array([o[1] for o in obs])
        if np.any(np.diff(t) < 0):
            unsorted_ids.append(ident)
        order = np.argsort(t, kind="stable")
        times.append(t[order])
        outcomes.append(y[order])
    if unsorted_ids:
        notices.append(
            f"times were out of order for {len(unsorted_ids)} individual(s) and were sorted"
        )

    names: tuple = ()
    matrix = np.zeros((len(ids), 0))
    if covariates_path is not None:
        cov_header, cov_rows = _read_rows(covariates_path)
        if cov_header[0].lower() != "id":
            raise InvalidInputError(f"{covariates_path}: first column must be 'id'")
        names = tuple(cov_header[1:])
        values = {}
        for lineno, fields in cov_rows:
            if len(fields) < len(cov_header):
                raise InvalidInputError(f"{covariates_path}: short row at line {lineno}")
            ident = fields[0]
            if ident in values:
                raise InvalidInputError(f"{covariates_path}: duplicate id {ident!r} at line {lineno}")
            values[ident] = [
                _to_float(v, covariates_path, lineno, nm) for nm, v in zip(names, fields[1:])
            ]
        missing_cov = sorted(set(ids) - set(values))
        missing_out = sorted(set(values) - set(ids))
        if missing_cov or missing_out:
            raise InvalidInputError(
                "id mismatch between files; "
                f"outcomes without covariates: {missing_cov[:10]}; "
                f"covariates without outcomes: {missing_out[:10]}"
            )
        matrix = np.array([values[ident] for ident in ids], dtype=float)

    standardization = {}
    expert_covariates = tuple(expert_covariates)
    if standardize and expert_covariates:
        unknown = [nm for nm in expert_covariates if nm not in names]
        if unknown:
            raise InvalidInputError(f"unknown expert covariates: {unknown}")
        matrix = matrix.copy()
        for nm in expert_covariates:
            j = names.index(nm)
            mean = float(matrix[:, j].mean())
            sd = float(matrix[:, j].std(ddof=0))
            if sd == 0:
                raise InvalidInputError(f"covariate {nm!r} has zero variance; cannot standardize")
            matrix[:, j] = (matrix[:, j] - mean) / sd
            standardization[nm] = (mean, sd)

    dataset = LongitudinalDataset(
        ids=tuple(ids),
        times=tuple(times),
        outcomes=tuple(outcomes),
        covariate_names=names,
        covariates=matrix,
    )
    return IngestResult(dataset=dataset, notices=tuple(notices), standardization=standardization)


def export_dataset(dataset: LongitudinalDataset, outcomes_path, covariates_path, header_lines=()):
    """Write the long/wide CSV pair; floats use full round-trip precision."""
    with open(outcomes_path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "y"])
        for ident, t, y in zip(dataset.ids, dataset.times, dataset.outcomes):
            for tj, yj in zip(t, y):
                writer.writerow([ident, repr(float(tj)), repr(float(yj))])
    with open(covariates_path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", *dataset.covariate_names])
        for i, ident in enumerate(dataset.ids):
            writer.writerow([ident, *(repr(float(v)) for v in dataset.covariates[i])])
