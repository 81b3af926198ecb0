"""Likelihood-split trees and a bootstrap forest for covariate screening.

Each tree partitions individuals by baseline covariates, refitting a one-class
spline growth model (the template) in every partition; a split is kept when
it improves the deviance by more than a configurable threshold. Trees grow on
bootstrap samples with a random covariate subset per node. Importance is the
mean out-of-bag deviance degradation when a covariate's values are permuted,
averaged over the trees that used the covariate.

Split search first scans every candidate threshold with a fast profile score
(growth-factor means refit in closed form, the remaining template parameters
held at the node estimates) and then verifies the winning candidate with full
template refits on both children; the verified improvement decides
acceptance. This keeps the fit count manageable without changing what a
split means.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LongitudinalDataset
from .errors import DegenerateClassError, InvalidInputError
from .fitting import FitOptions, FittedModel, fit, knot_bounds_from_data
from .growth import Frame
from .likelihood import LikelihoodEngine
from .model import MixtureSpec, ModelKind

__all__ = [
    "ForestConfig",
    "SplitNode",
    "ImportanceReport",
    "template_fit",
    "evaluate_split",
    "grow_tree",
    "variable_importance",
]

_TEMPLATE_SPEC = MixtureSpec(kind=ModelKind.FMM, n_classes=1)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 128
    candidate_size: int = 2  # covariates sampled per node
    sampling: str = "bootstrap"  # "bootstrap" | "subsample"
    min_leaf: int = 25
    max_depth: int = 2
    min_improvement: float = 3.84  # chi-square(1) 95th percentile heuristic
    seed: int = 0
    categorical: tuple = ()
    min_oob: int = 5
    subsample_fraction: float = 0.632

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInputError("n_trees must be >= 1")
        if self.candidate_size < 1:
            raise InvalidInputError("candidate_size must be >= 1")
        if self.sampling not in ("bootstrap", "subsample"):
            raise InvalidInputError("sampling must be 'bootstrap' or 'subsample'")
        object.__setattr__(self, "categorical", tuple(self.categorical))


@dataclass
class SplitNode:
    indices: np.ndarray  # dataset positions at this node
    neg2ll: float
    packed: np.ndarray  # template estimates at this node
    depth: int
    covariate: str | None = None
    threshold: float | None = None
    level_set: tuple | None = None  # categorical: levels going left
    improvement: float = 0.0
    left: "SplitNode | None" = None
    right: "SplitNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def used_covariates(self) -> set:
        used = set()
        if not self.is_leaf:
            used.add(self.covariate)
            used |= self.left.used_covariates()
            used |= self.right.used_covariates()
        return used

    def route(self, row: np.ndarray, name_index: dict) -> "SplitNode":
        node = self
        while not node.is_leaf:
            value = row[name_index[node.covariate]]
            if node.level_set is not None:
                go_left = value in node.level_set
            else:
                go_left = value <= node.threshold
            node = node.left if go_left else node.right
        return node


_TEMPLATE_OPTIONS = FitOptions(
    max_iter=500, tol=1e-4, max_attempts=2, optimizer="direct", compute_se=False,
    direct_gtol=1e-4,
)
_WARM_OPTIONS = FitOptions(
    max_iter=120, tol=1e-4, max_attempts=1, optimizer="direct", compute_se=False,
    direct_gtol=1e-4,
)


def _sane_template(fitted, subset) -> bool:
    """Reject variance-collapse spikes (tiny residual variance propped up by
    an enormous growth-factor covariance), which poison OOB deviances."""
    cp = fitted.params.classes[0]
    y_var = float(np.var(np.concatenate(subset.outcomes)))
    if y_var <= 0:
        return False
    if not (1e-4 * y_var <= cp.theta_eps <= 1e4 * y_var):
        return False
    if float(np.diag(cp.psi).max()) > 1e4 * y_var:
        return False
    return True


def template_fit(
    data: LongitudinalDataset,
    indices,
    warm_packed: np.ndarray | None = None,
    knot_bounds: tuple | None = None,
    options: FitOptions | None = None,
):
    """One-class template fit on a row subset; returns (neg2ll, packed, fitted).

    Fits whose residual variance collapses relative to the outcome scale are
    marked non-convergent so callers discard the affected split.
    """
    subset = data.subset(np.asarray(indices, dtype=int))
    kb = knot_bounds or knot_bounds_from_data(subset)
    start = None
    if warm_packed is not None:
        from .model import ParamLayout

        layout = ParamLayout(_TEMPLATE_SPEC, knot_bounds=kb)
        start = layout.unpack(warm_packed)
    if options is None:
        options = _WARM_OPTIONS if warm_packed is not None else _TEMPLATE_OPTIONS
    fitted = fit(_TEMPLATE_SPEC, subset, start=start, options=options, knot_bounds=kb)
    if fitted.converged and not _sane_template(fitted, subset):
        fitted = replace(fitted, converged=False)
    return -2.0 * fitted.loglik, fitted.packed, fitted


def _split_children(data, indices, covariate, threshold, config, knot_bounds, warm):
    """Partition rows and fit both children; None when the split is invalid
    or a child fit fails."""
    indices = np.asarray(indices, dtype=int)
    col = data.covariate_matrix((covariate,))[:, 0][indices]
    if isinstance(threshold, (tuple, list, set, frozenset)):
        levels = frozenset(float(v) for v in threshold)
        mask = np.isin(col, list(levels))
    else:
        mask = col <= float(threshold)
    left, right = indices[mask], indices[~mask]
    if min(left.size, right.size) < config.min_leaf:
        return None
    try:
        ldev, lpacked, lfit = template_fit(data, left, warm_packed=warm, knot_bounds=knot_bounds)
        rdev, rpacked, rfit = template_fit(data, right, warm_packed=warm, knot_bounds=knot_bounds)
    except DegenerateClassError:
        return None
    if not (lfit.converged and rfit.converged):
        return None
    return left, right, ldev, lpacked, rdev, rpacked


def evaluate_split(
    data: LongitudinalDataset,
    indices,
    covariate: str,
    threshold,
    config: ForestConfig,
    parent: SplitNode | None = None,
    knot_bounds: tuple | None = None,
):
    """Deviance improvement of splitting ``indices`` on a covariate.

    ``threshold`` is a number for continuous covariates or a collection of
    levels (going left) for categorical ones. Children are refit with the
    full template; non-convergent child fits discard the candidate (None).
    Improvements are clipped at zero.
    """
    indices = np.asarray(indices, dtype=int)
    warm = parent.packed if parent is not None else None
    if parent is not None:
        parent_dev = parent.neg2ll
    else:
        parent_dev, warm, _ = template_fit(data, indices, knot_bounds=knot_bounds)
    children = _split_children(data, indices, covariate, threshold, config, knot_bounds, warm)
    if children is None:
        return None
    _, _, left_dev, _, right_dev, _ = children
    return max(0.0, parent_dev - (left_dev + right_dev))


# ---------------------------------------------------------------------------
# Fast profile screening of candidate thresholds


def _profile_stats(data, indices, packed, knot_bounds):
    """Per-individual sufficient statistics for mean-profiled deviance under
    the node's covariance/knot estimates."""
    from .model import ParamLayout

    layout = ParamLayout(_TEMPLATE_SPEC, knot_bounds=knot_bounds)
    params = layout.unpack(packed)
    cp = params.classes[0]
    subset = data.subset(indices)
    engine = LikelihoodEngine(_TEMPLATE_SPEC, subset)
    m = indices.size
    a_all = np.zeros((m, 3, 3))
    b_all = np.zeros((m, 3))
    c_all = np.zeros(m)
    const = np.zeros(m)
    from .growth import loading_rows
    from .likelihood import LOG_2PI, _det3, _inv3

    theta = cp.theta_eps
    for g in engine.packed.groups:
        lam = loading_rows(g.times, cp.gamma, cp.frame)
        m_mat = np.einsum("mja,mjb->mab", lam, lam)
        c_mat = np.eye(3) + (m_mat @ cp.psi) / theta
        det = _det3(c_mat)
        inv = _inv3(c_mat, det)
        a_inv = np.einsum("ab,mbc->mac", cp.psi, inv)
        s_mat = m_mat / theta - np.einsum("mab,mbc,mcd->mad", m_mat, a_inv, m_mat) / theta**2
        u = np.einsum("mja,mj->ma", lam, g.y)
        lam_q = np.einsum("mjk,mk->mj", lam, np.einsum("mab,mb->ma", a_inv, u))
        sid_y = g.y / theta - lam_q / theta**2  # Sigma^-1 y
        a_all[g.idx] = s_mat
        b_all[g.idx] = np.einsum("mjk,mj->mk", lam, sid_y)
        c_all[g.idx] = np.einsum("mj,mj->m", g.y, sid_y)
        n_occ = g.times.shape[1]
        const[g.idx] = n_occ * (LOG_2PI + np.log(theta)) + np.log(det)
    return a_all, b_all, c_all + const


def _profile_dev(a_sum, b_sum, rest_sum):
    try:
        mu = np.linalg.solve(a_sum, b_sum)
    except np.linalg.LinAlgError:
        return np.inf
    return float(rest_sum - b_sum @ mu)


def _screen_node(data, node, candidates, config, knot_bounds):
    """Best (covariate, threshold, screened improvement) via the profile scan."""
    a_all, b_all, r_all = _profile_stats(data, node.indices, node.packed, knot_bounds)
    parent_dev = _profile_dev(a_all.sum(0), b_all.sum(0), r_all.sum())
    best = None
    cols = data.covariate_matrix(tuple(candidates))
    for ci, name in enumerate(candidates):
        col = cols[:, ci][node.indices]
        if name in config.categorical:
            levels = np.unique(col)
            if levels.size < 2 or levels.size > 8:
                continue
            for r in range(1, levels.size):
                for combo in itertools.combinations(levels, r):
                    mask = np.isin(col, combo)
                    cand = _screen_eval(a_all, b_all, r_all, mask, parent_dev, config)
                    if cand is not None and (best is None or cand > best[0]):
                        best = (cand, name, frozenset(float(v) for v in combo))
        else:
            order = np.argsort(col, kind="stable")
            sorted_col = col[order]
            a_csum = np.cumsum(a_all[order], axis=0)
            b_csum = np.cumsum(b_all[order], axis=0)
            r_csum = np.cumsum(r_all[order])
            m = col.size
            distinct = np.nonzero(np.diff(sorted_col) > 0)[0]  # split after these
            for pos in distinct:
                n_left = pos + 1
                if n_left < config.min_leaf or m - n_left < config.min_leaf:
                    continue
                left_dev = _profile_dev(a_csum[pos], b_csum[pos], r_csum[pos])
                right_dev = _profile_dev(
                    a_csum[-1] - a_csum[pos], b_csum[-1] - b_csum[pos], r_csum[-1] - r_csum[pos]
                )
                gain = parent_dev - (left_dev + right_dev)
                if best is None or gain > best[0]:
                    thr = 0.5 * (sorted_col[pos] + sorted_col[pos + 1])
                    best = (gain, name, float(thr))
    return best


def _screen_eval(a_all, b_all, r_all, mask, parent_dev, config):
    if min(mask.sum(), (~mask).sum()) < config.min_leaf:
        return None
    left = _profile_dev(a_all[mask].sum(0), b_all[mask].sum(0), r_all[mask].sum())
    right = _profile_dev(a_all[~mask].sum(0), b_all[~mask].sum(0), r_all[~mask].sum())
    return parent_dev - (left + right)


def grow_tree(
    data: LongitudinalDataset,
    sample_indices,
    covariate_names,
    config: ForestConfig,
    rng: np.random.Generator,
    knot_bounds: tuple | None = None,
) -> SplitNode | None:
    """Grow one likelihood-split tree on a resampled index set.

    Returns None (with a warning upstream) when the root template does not
    converge.
    """
    sample_indices = np.asarray(sample_indices, dtype=int)
    knot_bounds = knot_bounds or knot_bounds_from_data(data)
    covariate_names = tuple(covariate_names)
    try:
        dev, packed, fitted = template_fit(data, sample_indices, knot_bounds=knot_bounds)
    except DegenerateClassError:
        return None
    if not fitted.converged:
        return None
    root = SplitNode(indices=sample_indices, neg2ll=dev, packed=packed, depth=0)
    stack = [root]
    while stack:
        node = stack.pop(0)
        if node.depth >= config.max_depth or node.indices.size < 2 * config.min_leaf:
            continue
        c = min(config.candidate_size, len(covariate_names))
        chosen = list(rng.choice(len(covariate_names), size=c, replace=False))
        candidates = [covariate_names[j] for j in sorted(chosen)]
        screened = _screen_node(data, node, candidates, config, knot_bounds)
        if screened is None or screened[0] <= 0:
            continue
        _, name, threshold = screened
        children = _split_children(
            data, node.indices, name, threshold, config, knot_bounds, node.packed
        )
        if children is None:
            continue
        left_idx, right_idx, ldev, lpacked, rdev, rpacked = children
        improvement = max(0.0, node.neg2ll - (ldev + rdev))
        if improvement < config.min_improvement:
            continue
        node.covariate = name
        node.level_set = tuple(sorted(threshold)) if isinstance(threshold, frozenset) else None
        node.threshold = None if isinstance(threshold, frozenset) else float(threshold)
        node.improvement = float(improvement)
        node.left = SplitNode(indices=left_idx, neg2ll=ldev, packed=lpacked, depth=node.depth + 1)
        node.right = SplitNode(indices=right_idx, neg2ll=rdev, packed=rpacked, depth=node.depth + 1)
        stack.append(node.left)
        stack.append(node.right)
    return root


@dataclass(frozen=True)
class ImportanceReport:
    covariates: tuple
    scores: dict  # name -> mean OOB deviance degradation
    ranks: dict  # name -> 1-based rank (1 = most important)
    trees_used: dict  # name -> number of trees contributing
    dispersion: dict  # name -> std of per-tree degradation
    n_trees: int
    config: ForestConfig

    def ordered(self):
        return sorted(self.covariates, key=lambda nm: (-self.scores[nm], nm))


def _leaf_deviances(data, tree, rows, name_index, knot_bounds, leaf_cache, columns):
    """Sum of per-individual deviances when routing ``rows`` through the tree."""
    from .model import ParamLayout

    layout = ParamLayout(_TEMPLATE_SPEC, knot_bounds=knot_bounds)
    total = 0.0
    for i in rows:
        leaf = tree.route(columns[i], name_index)
        key = id(leaf)
        if key not in leaf_cache:
            leaf_cache[key] = layout.unpack(leaf.packed).classes[0]
        cp = leaf_cache[key]
        from .likelihood import class_log_density

        total += -2.0 * class_log_density(
            data.outcomes[i], data.times[i], np.zeros(0), cp, include_covariate_density=False
        )
    return total


def _tree_task(args):
    (data, covariate_names, config, tree_index, knot_bounds) = args
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, tree_index)))
    n = data.n
    if config.sampling == "bootstrap":
        sample = rng.integers(0, n, size=n)
    else:
        size = max(2, int(round(config.subsample_fraction * n)))
        sample = rng.choice(n, size=size, replace=False)
    oob = np.setdiff1d(np.arange(n), np.unique(sample))
    tree = grow_tree(data, sample, covariate_names, config, rng, knot_bounds=knot_bounds)
    if tree is None:
        return tree_index, None, {}
    used = tree.used_covariates()
    if not used or oob.size < config.min_oob:
        return tree_index, tree, {}
    name_index = {nm: j for j, nm in enumerate(data.covariate_names)}
    columns = data.covariates
    leaf_cache: dict = {}
    baseline = _leaf_deviances(data, tree, oob, name_index, knot_bounds, leaf_cache, columns)
    degradations = {}
    for nm in sorted(used):
        perm_rng = np.random.default_rng(np.random.SeedSequence((config.seed, tree_index, name_index[nm])))
        permuted = columns.copy()
        permuted[oob, name_index[nm]] = columns[oob[perm_rng.permutation(oob.size)], name_index[nm]]
        shuffled = _leaf_deviances(data, tree, oob, name_index, knot_bounds, leaf_cache, permuted)
        degradations[nm] = shuffled - baseline
    return tree_index, tree, degradations


def variable_importance(
    data: LongitudinalDataset,
    covariate_names,
    config: ForestConfig | None = None,
    workers: int = 1,
    return_trees: bool = False,
):
    """Permutation importance of each covariate from a likelihood-split forest.

    Scores are mean out-of-bag deviance degradations over the trees that used
    the covariate (clipped at zero); covariates never used score exactly 0.
    """
    config = config or ForestConfig()
    covariate_names = tuple(covariate_names)
    if not covariate_names:
        raise InvalidInputError("need at least one candidate covariate")
    knot_bounds = knot_bounds_from_data(data)
    tasks = [
        (data, covariate_names, config, t, knot_bounds) for t in range(config.n_trees)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_tree_task, tasks, chunksize=4))
    else:
        results = [_tree_task(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    per_cov: dict[str, list] = {nm: [] for nm in covariate_names}
    trees = []
    for _, tree, degradations in results:
        trees.append(tree)
        for nm, val in degradations.items():
            per_cov[nm].append(val)
    scores, ranks, used_counts, dispersion = {}, {}, {}, {}
    for nm in covariate_names:
        vals = per_cov[nm]
        used_counts[nm] = len(vals)
        scores[nm] = max(0.0, float(np.mean(vals))) if vals else 0.0
        dispersion[nm] = float(np.std(vals)) if len(vals) > 1 else 0.0
    order = sorted(covariate_names, key=lambda nm: (-scores[nm], nm))
    for r, nm in enumerate(order, start=1):
        ranks[nm] = r
    report = ImportanceReport(
        covariates=covariate_names,
        scores=scores,
        ranks=ranks,
        trees_used=used_counts,
        dispersion=dispersion,
        n_trees=config.n_trees,
        config=config,
    )
    if return_trees:
        return report, trees
    return report
