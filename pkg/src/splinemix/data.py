"""Longitudinal dataset container.

Each individual carries their own (time, outcome) pairs — occasion counts may
differ across individuals — plus a shared table of named baseline covariates.
Which covariates act as gating (class-membership) predictors and which act as
growth-factor predictors is decided by the model spec, not by the dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

__all__ = ["LongitudinalDataset"]


@dataclass(frozen=True)
class LongitudinalDataset:
    ids: tuple
    times: tuple  # per-individual float arrays, strictly increasing
    outcomes: tuple  # per-individual float arrays, same lengths as times
    covariate_names: tuple = ()
    covariates: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))  # (n, m)

    def __post_init__(self):
        ids = tuple(self.ids)
        times = tuple(np.asarray(t, dtype=float).ravel() for t in self.times)
        outcomes = tuple(np.asarray(y, dtype=float).ravel() for y in self.outcomes)
        if not (len(ids) == len(times) == len(outcomes)):
            raise InvalidInputError("ids, times and outcomes must have equal lengths")
        if len(ids) == 0:
            raise InvalidInputError("dataset must contain at least one individual")
        if len(set(ids)) != len(ids):
            raise InvalidInputError("ids must be unique")
        for i, (t, y) in enumerate(zip(times, outcomes)):
            if t.size < 1:
                raise InvalidInputError(f"individual {ids[i]} has no observations")
            if t.size != y.size:
                raise InvalidInputError(f"individual {ids[i]} has mismatched times/outcomes")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
                raise InvalidInputError(f"individual {ids[i]} has non-finite observations")
            if np.any(np.diff(t) <= 0):
                raise InvalidInputError(f"individual {ids[i]} times must be strictly increasing")
        names = tuple(self.covariate_names)
        cov = np.asarray(self.covariates, dtype=float)
        if len(names) == 0:
            cov = np.zeros((len(ids), 0))
        else:
            if cov.shape != (len(ids), len(names)):
                raise InvalidInputError(
                    f"covariates must be {(len(ids), len(names))}, got {cov.shape}"
                )
            if not np.all(np.isfinite(cov)):
                raise InvalidInputError("covariates contain non-finite values")
            if len(set(names)) != len(names):
                raise InvalidInputError("covariate names must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "covariates", cov)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def n_obs(self) -> int:
        return int(sum(t.size for t in self.times))

    def covariate_matrix(self, names) -> np.ndarray:
        """Columns for ``names`` in order, shape (n, len(names))."""
        names = tuple(names)
        if not names:
            return np.zeros((self.n, 0))
        missing = [nm for nm in names if nm not in self.covariate_names]
        if missing:
            raise InvalidInputError(f"unknown covariates: {missing}")
        idx = [self.covariate_names.index(nm) for nm in names]
        return self.covariates[:, idx]

    def with_covariates(self, names, matrix) -> "LongitudinalDataset":
        """Copy of the dataset with a replaced covariate table."""
        return LongitudinalDataset(
            ids=self.ids,
            times=self.times,
            outcomes=self.outcomes,
            covariate_names=tuple(names),
            covariates=np.asarray(matrix, dtype=float),
        )

    def subset(self, indices) -> "LongitudinalDataset":
        """Row subset (by position); duplicated indices are allowed."""
        indices = np.asarray(indices, dtype=int)
        ids = tuple(
            self.ids[i] if c == 0 else f"{self.ids[i]}#{c}"
            for c, i in _dedup_counter(indices)
        )
        return LongitudinalDataset(
            ids=ids,
            times=tuple(self.times[i] for i in indices),
            outcomes=tuple(self.outcomes[i] for i in indices),
            covariate_names=self.covariate_names,
            covariates=self.covariates[indices] if self.covariates.size else np.zeros((len(indices), 0)),
        )


def _dedup_counter(indices):
    seen: dict[int, int] = {}
    for i in indices:
        c = seen.get(int(i), 0)
        seen[int(i)] = c + 1
        yield c, int(i)
