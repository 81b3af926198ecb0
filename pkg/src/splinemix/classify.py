"""Posterior class probabilities, modal assignment, and clustering metrics.

Accuracy and the agreement kappa align labels by the best permutation before
comparing, since mixture labels are only identified up to relabelling. The
kappa here is permutation-aligned Cohen's kappa with the large-sample SE; it
stands in for a latent-class agreement coefficient and should be read as an
approximation, not a reproduction of one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .errors import InvalidInputError
from .likelihood import LikelihoodEngine

__all__ = [
    "Assignment",
    "posterior_matrix",
    "modal_assignment",
    "accuracy",
    "entropy",
    "kappa_agreement",
    "align_labels",
]

# Landis-Koch qualitative bands for kappa (lower bound, label)
_KAPPA_BANDS = (
    (0.81, "almost perfect"),
    (0.61, "substantial"),
    (0.41, "moderate"),
    (0.21, "fair"),
    (0.0, "slight"),
)


@dataclass(frozen=True)
class Assignment:
    labels: np.ndarray  # values in 1..K
    n_classes: int
    seed: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.ndim != 1:
            raise InvalidInputError("labels must be a vector")
        if labels.size and (labels.min() < 1 or labels.max() > self.n_classes):
            raise InvalidInputError("labels must lie in 1..K")
        object.__setattr__(self, "labels", labels)


def _check_posterior(post: np.ndarray) -> np.ndarray:
    post = np.asarray(post, dtype=float)
    if post.ndim != 2:
        raise InvalidInputError("posterior matrix must be 2-D")
    if np.any(post < -1e-12) or np.any(post > 1 + 1e-12):
        raise InvalidInputError("posterior entries must lie in [0, 1]")
    if not np.allclose(post.sum(axis=1), 1.0, atol=1e-8):
        raise InvalidInputError("posterior rows must sum to one")
    return post


def posterior_matrix(fitted, data: LongitudinalDataset | None = None) -> np.ndarray:
    """Posterior class probabilities under a fitted model.

    Recomputes the kind-appropriate responsibility formula; at the converged
    estimates this matches the stored responsibilities.
    """
    if data is None:
        return fitted.responsibilities.copy()
    engine = LikelihoodEngine(fitted.spec, data)
    _, resp = engine.loglik_resp(fitted.params.to_frame(fitted.spec.frame))
    return resp


def modal_assignment(post: np.ndarray, seed: int | None = 0) -> Assignment:
    """Highest-posterior class per row; exact ties broken uniformly at random."""
    post = _check_posterior(post)
    n, k = post.shape
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=int)
    row_max = post.max(axis=1)
    for i in range(n):
        winners = np.nonzero(post[i] == row_max[i])[0]
        labels[i] = winners[0] + 1 if winners.size == 1 else int(rng.choice(winners)) + 1
    return Assignment(labels=labels, n_classes=k, seed=seed)


def _permutations(k: int):
    return itertools.permutations(range(k))


def align_labels(reference: Assignment, other: Assignment):
    """Relabel ``other`` by the permutation maximizing agreement with
    ``reference``; exhaustive for K <= 6, greedy above."""
    if reference.n_classes != other.n_classes:
        raise InvalidInputError("assignments must have the same class count")
    k = reference.n_classes
    a = reference.labels - 1
    b = other.labels - 1
    confusion = np.zeros((k, k))
    for i, j in zip(a, b):
        confusion[i, j] += 1
    if k <= 6:
        best_perm, best_hits = None, -1.0
        for perm in _permutations(k):
            hits = sum(confusion[i, perm[i]] for i in range(k))
            if hits > best_hits:
                best_hits, best_perm = hits, perm
        perm = best_perm
    else:
        perm = [-1] * k
        used = set()
        for i in np.argsort(-confusion.max(axis=1)):
            j = int(np.argmax([confusion[i, c] if c not in used else -1 for c in range(k)]))
            perm[i] = j
            used.add(j)
    mapping = np.empty(k, dtype=int)
    for i in range(k):
        mapping[perm[i]] = i
    relabeled = Assignment(labels=mapping[b] + 1, n_classes=k, seed=other.seed)
    return relabeled, tuple(perm)


def accuracy(assigned: Assignment, truth: Assignment) -> float:
    """Fraction correctly classified, maximized over label permutations."""
    if assigned.labels.size != truth.labels.size:
        raise InvalidInputError("assignments must have equal lengths")
    if assigned.n_classes != truth.n_classes:
        raise InvalidInputError("assignments must have the same class count")
    aligned, _ = align_labels(truth, assigned)
    return float(np.mean(aligned.labels == truth.labels))


def entropy(post: np.ndarray) -> float:
    """Normalized posterior-certainty index in [0, 1] (1 = full separation)."""
    post = _check_posterior(post)
    n, k = post.shape
    if k < 2:
        raise InvalidInputError("entropy requires at least two classes")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(post > 0, post * np.log(post), 0.0)
    return float(1.0 + plogp.sum() / (n * np.log(k)))


def kappa_agreement(a: Assignment, b: Assignment):
    """Permutation-aligned Cohen's kappa with a large-sample 95% CI.

    Returns (kappa, (low, high), qualitative band).
    """
    if a.labels.size != b.labels.size:
        raise InvalidInputError("assignments must have equal lengths")
    if a.n_classes != b.n_classes:
        raise InvalidInputError("assignments must have the same class count")
    n = a.labels.size
    if np.unique(a.labels).size < 2 or np.unique(b.labels).size < 2:
        raise InvalidInputError("kappa is undefined with a single observed category")
    aligned, _ = align_labels(a, b)
    k = a.n_classes
    table = np.zeros((k, k))
    for i, j in zip(a.labels - 1, aligned.labels - 1):
        table[i, j] += 1
    table /= n
    p_o = float(np.trace(table))
    p_e = float(table.sum(axis=1) @ table.sum(axis=0))
    if p_e >= 1.0:
        raise InvalidInputError("degenerate marginals; kappa undefined")
    kappa = (p_o - p_e) / (1.0 - p_e)
    se = np.sqrt(p_o * (1.0 - p_o) / (n * (1.0 - p_e) ** 2))
    ci = (float(kappa - 1.96 * se), float(kappa + 1.96 * se))
    band = "poor"
    for bound, label in _KAPPA_BANDS:
        if kappa >= bound:
            band = label
            break
    return float(kappa), ci, band
