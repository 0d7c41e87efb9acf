"""Linear-regression account of causal confusion and the value of guidance.

Everything here is exact, small, and numpy-only.  The regression targets play
the role of expert actions, input columns play the role of state and observed
scene variables, and column correlation stands in for visual confounds that
co-vary with the true causes during data collection but not at test time.

Conventions:
    inputs   (N, p)  rows are samples, p = state_dim + obs_dim columns
    targets  (N, m)  one column per action dimension
    weights  (p, m)
All solvers use the minimum-norm least-squares solution, so rank-deficient
designs resolve to the unique smallest-norm weight matrix rather than an
arbitrary element of the solution set.

All functions are pure and re-entrant; randomness is confined to generators
seeded from the spec, so repeated calls with equal specs return equal arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "RegressionSpec",
    "RegressionProblem",
    "ConfusionReport",
    "make_regression",
    "ols_fit",
    "nullspace_basis",
    "estimator_covariance_mc",
    "gaussian_entropy",
    "estimator_entropy",
    "estimator_entropy_mc",
    "confusion_experiment",
]

CORRELATION_MODES = ("none", "duplicated", "linear_dependence")

# Singular values below this fraction of the largest are treated as zero
# when deciding rank.
RANK_REL_TOL = 1e-8


@dataclass(frozen=True)
class RegressionSpec:
    """Recipe for a synthetic linear regression problem.

    ``state_dim`` counts target columns (actions), ``obs_dim`` counts input
    columns beyond the state-like ones, and ``feature_dim`` is the width of
    the feature map used by the estimator-statistics operations.  Correlation
    modes inject the failure cases studied here: ``duplicated`` copies one
    input column onto another, ``linear_dependence`` rewrites trailing
    columns as linear combinations of leading ones.
    """

    state_dim: int = 1
    obs_dim: int = 2
    feature_dim: int = 2
    num_samples: int = 200
    noise_std: float = 0.1
    feature_std: float = 1.0
    correlation: str = "none"
    seed: int = 0
    # Pair (kept, copy) for mode "duplicated"; defaults to the first two
    # observation columns when there are two, else the first two columns.
    duplicate_pair: Optional[Tuple[int, int]] = None
    # Number of trailing columns rewritten in mode "linear_dependence".
    dependent_columns: int = 1
    # Fixed true weights, shape (state_dim + obs_dim, state_dim); drawn from
    # the seed when omitted.  Used to share one ground truth across the
    # correlated/decorrelated problem family.
    true_weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.obs_dim < 0:
            raise ValueError("state_dim must be >= 1 and obs_dim >= 0")
        total = self.state_dim + self.obs_dim
        if not (1 <= self.feature_dim <= total):
            raise ValueError(
                f"feature_dim must lie in [1, {total}], got {self.feature_dim}"
            )
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.feature_std <= 0:
            raise ValueError("feature_std must be positive")
        if self.correlation not in CORRELATION_MODES:
            raise ValueError(
                f"correlation must be one of {CORRELATION_MODES}, got {self.correlation!r}"
            )
        if self.duplicate_pair is not None:
            i, j = self.duplicate_pair
            if i == j or not (0 <= i < total and 0 <= j < total):
                raise ValueError(f"duplicate_pair {self.duplicate_pair} out of range")
        if self.correlation == "linear_dependence":
            if not (1 <= self.dependent_columns < total):
                raise ValueError("dependent_columns must leave at least one free column")
        if self.true_weights is not None:
            w = np.asarray(self.true_weights, dtype=float)
            if w.ndim == 1:
                w = w[:, None]
            if w.shape != (total, self.state_dim):
                raise ValueError(
                    f"true_weights must have shape ({total}, {self.state_dim}), got {w.shape}"
                )
            object.__setattr__(self, "true_weights", w)

    @property
    def total_columns(self) -> int:
        return self.state_dim + self.obs_dim


@dataclass(frozen=True)
class RegressionProblem:
    """A realized dataset plus the ground truth that generated it."""

    inputs: np.ndarray           # (N, p)
    targets: np.ndarray          # (N, m)
    true_weights: np.ndarray     # (p, m)
    spec: RegressionSpec
    encoder: Optional[np.ndarray] = None  # optional (p, d) feature map


@dataclass(frozen=True)
class ConfusionReport:
    """Outcome of fitting a correlated design and probing it decorrelated."""

    learned_weights: np.ndarray          # minimum-norm fit on all columns
    masked_weights: np.ndarray           # fit restricted to relevant columns
    relevant_columns: Tuple[int, ...]
    nullspace: np.ndarray                # orthonormal basis, (p, p - rank)
    train_rmse: float
    correlated_test_rmse: float          # fresh draw, same correlation
    decorrelated_test_rmse: float        # fresh draw, correlation removed
    masked_decorrelated_rmse: float
    masked_recovery_error: float         # ||masked fit - true weights on kept columns||_F
    spec: RegressionSpec

    def summary(self) -> dict:
        return {
            "relevant_columns": list(self.relevant_columns),
            "nullspace_dim": int(self.nullspace.shape[1]),
            "train_rmse": self.train_rmse,
            "correlated_test_rmse": self.correlated_test_rmse,
            "decorrelated_test_rmse": self.decorrelated_test_rmse,
            "masked_decorrelated_rmse": self.masked_decorrelated_rmse,
            "masked_recovery_error": self.masked_recovery_error,
        }


def _default_duplicate_pair(spec: RegressionSpec) -> Tuple[int, int]:
    if spec.obs_dim >= 2:
        return (spec.state_dim, spec.state_dim + 1)
    if spec.total_columns < 2:
        raise ValueError("duplicated mode needs at least two input columns")
    return (0, 1)


def make_regression(spec: RegressionSpec) -> RegressionProblem:
    """Draw a dataset according to ``spec``.

    Inputs are zero-mean gaussian with per-column std ``feature_std``; the
    requested correlation structure is applied afterwards, so duplicated or
    dependent columns are exact (no residual jitter).  Targets are
    ``inputs @ W* + noise`` with gaussian noise of std ``noise_std``.
    """
    rng = np.random.default_rng(spec.seed)
    p = spec.total_columns
    inputs = rng.normal(0.0, spec.feature_std, size=(spec.num_samples, p))

    if spec.correlation == "duplicated":
        keep, copy = spec.duplicate_pair or _default_duplicate_pair(spec)
        inputs[:, copy] = inputs[:, keep]
    elif spec.correlation == "linear_dependence":
        k = spec.dependent_columns
        q = p - k
        coeffs = rng.normal(0.0, 1.0 / math.sqrt(q), size=(q, k))
        inputs[:, q:] = inputs[:, :q] @ coeffs

    if spec.true_weights is not None:
        weights = np.array(spec.true_weights, dtype=float, copy=True)
    else:
        weights = rng.normal(0.0, 1.0, size=(p, spec.state_dim))

    noise = rng.normal(0.0, spec.noise_std, size=(spec.num_samples, spec.state_dim))
    targets = inputs @ weights + noise
    return RegressionProblem(inputs=inputs, targets=targets, true_weights=weights, spec=spec)


def ols_fit(inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Minimum-norm ordinary least squares.

    Shape follows ``targets``: (p, m) for 2-D targets, (p,) for 1-D.  For
    rank-deficient designs this is the pseudo-inverse solution, the unique
    minimizer of ||W||_F among all least-squares solutions.
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 2:
        raise ValueError("inputs must be 2-D (samples, columns)")
    if targets.shape[0] != inputs.shape[0]:
        raise ValueError("inputs and targets disagree on sample count")
    solution, _, _, _ = np.linalg.lstsq(inputs, targets, rcond=None)
    return solution


def nullspace_basis(inputs: np.ndarray, rel_tol: float = RANK_REL_TOL) -> np.ndarray:
    """Orthonormal basis of the null space of the design's column action.

    Returns a (p, p - rank) matrix whose columns span {v : inputs @ v = 0}.
    Singular values below ``rel_tol`` times the largest count as zero; a
    full-rank design yields a (p, 0) array.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2:
        raise ValueError("inputs must be 2-D")
    _, singular, vt = np.linalg.svd(inputs, full_matrices=True)
    if singular.size == 0 or singular[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(singular > rel_tol * singular[0]))
    return vt[rank:].T


def estimator_covariance_mc(
    spec: RegressionSpec, trials: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo covariance of the OLS estimator against the closed form.

    A single design of shape (num_samples, feature_dim) is drawn from the
    spec seed and held fixed; ``trials`` independent noise draws produce
    ``trials`` estimates.  Returns ``(empirical, analytic)`` covariance
    matrices of the column-major vectorized estimate, where the analytic
    matrix is kron(I_m, noise_std^2 (Phi^T Phi)^{-1}).
    """
    if trials < 2:
        raise ValueError("trials must be at least 2")
    if spec.correlation != "none":
        raise ValueError("estimator covariance assumes an uncorrelated design")
    d, m, n_samples = spec.feature_dim, spec.state_dim, spec.num_samples
    if n_samples < d:
        raise ValueError("need at least feature_dim samples for a full-rank design")
    rng = np.random.default_rng(spec.seed)
    phi = rng.normal(0.0, spec.feature_std, size=(n_samples, d))
    gram = phi.T @ phi
    # Guard against a degenerate draw before inverting.
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= RANK_REL_TOL * max(eigvals[-1], 1.0):
        raise ValueError("design matrix is numerically singular")
    gram_inv = np.linalg.inv(gram)
    projector = gram_inv @ phi.T  # (d, N): maps noise to estimate deviation

    noise = rng.normal(0.0, spec.noise_std, size=(trials, n_samples, m))
    deviations = np.einsum("dn,tnm->tdm", projector, noise)
    # Column-major vec: output column j occupies block j of length d.
    vecs = deviations.transpose(0, 2, 1).reshape(trials, m * d)
    empirical = np.atleast_2d(np.cov(vecs, rowvar=False, ddof=1))
    analytic = np.kron(np.eye(m), spec.noise_std**2 * gram_inv)
    return empirical, analytic


def gaussian_entropy(cov: np.ndarray) -> float:
    """Differential entropy of a gaussian with the given covariance (nats)."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return 0.5 * d * (1.0 + math.log(2.0 * math.pi)) + 0.5 * logdet


def estimator_entropy(
    feature_dim: int, num_samples: int, noise_std: float, feature_std: float
) -> float:
    """Closed-form entropy of one estimated weight column, isotropic design.

    Approximates Phi^T Phi by num_samples * feature_std^2 * I, under which
    the estimator covariance is noise_std^2 / (num_samples feature_std^2) I
    and the entropy is affine in feature_dim with slope
    (1 + ln 2 pi + ln ratio) / 2.  Doubling num_samples lowers it by
    feature_dim/2 * ln 2.
    """
    if feature_dim < 1 or num_samples < 1:
        raise ValueError("feature_dim and num_samples must be positive")
    if noise_std <= 0 or feature_std <= 0:
        raise ValueError("noise_std and feature_std must be positive here")
    ratio = noise_std**2 / (num_samples * feature_std**2)
    return 0.5 * feature_dim * (1.0 + math.log(2.0 * math.pi) + math.log(ratio))


def estimator_entropy_mc(
    feature_dim: int,
    num_samples: int,
    noise_std: float,
    feature_std: float,
    trials: int = 2048,
    replicates: int = 16,
    seed: int = 0,
) -> float:
    """Monte-Carlo entropy of one estimated weight column.

    For each replicate a fresh design is drawn, ``trials`` noise draws give
    an empirical estimator covariance, and the gaussian entropy of that fit
    is recorded.  The mean over replicates integrates out design randomness;
    log-determinant fluctuations of a single design scale like
    sqrt(2 d / num_samples), too coarse for percent-level comparisons.
    """
    if trials <= feature_dim:
        raise ValueError("need more trials than feature_dim to fit a covariance")
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(replicates):
        phi = rng.normal(0.0, feature_std, size=(num_samples, feature_dim))
        projector = np.linalg.inv(phi.T @ phi) @ phi.T
        noise = rng.normal(0.0, noise_std, size=(trials, num_samples))
        estimates = noise @ projector.T
        cov = np.cov(estimates, rowvar=False, ddof=1)
        values.append(gaussian_entropy(cov))
    return float(np.mean(values))


def _rmse(inputs: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> float:
    resid = targets - inputs @ weights
    return float(np.sqrt(np.mean(resid**2)))


def confusion_experiment(
    spec: RegressionSpec, relevant_columns: Sequence[int]
) -> ConfusionReport:
    """Fit a correlated design, then probe it with the correlation removed.

    ``relevant_columns`` lists the causal input columns; the masked fit uses
    only those.  Ground-truth weights are shared across the train set, a
    correlated test set, and a decorrelated test set, so any gap between the
    last two is attributable to the learner leaning on the confound.  The
    recovery error compares the masked fit to the true weights on the kept
    columns, which is meaningful when the discarded columns carry no
    independent weight.
    """
    if spec.correlation == "none":
        raise ValueError("confusion_experiment needs a correlated spec")
    cols = tuple(sorted(set(int(c) for c in relevant_columns)))
    if not cols:
        raise ValueError("relevant_columns must be non-empty")
    if cols[0] < 0 or cols[-1] >= spec.total_columns:
        raise ValueError("relevant_columns out of range")

    train = make_regression(spec)
    truth = train.true_weights

    correlated_test = make_regression(replace(spec, seed=spec.seed + 1, true_weights=truth))
    decorrelated_test = make_regression(
        replace(spec, correlation="none", seed=spec.seed + 2, true_weights=truth)
    )

    learned = ols_fit(train.inputs, train.targets)
    masked = ols_fit(train.inputs[:, cols], train.targets)

    return ConfusionReport(
        learned_weights=learned,
        masked_weights=masked,
        relevant_columns=cols,
        nullspace=nullspace_basis(train.inputs),
        train_rmse=_rmse(train.inputs, train.targets, learned),
        correlated_test_rmse=_rmse(correlated_test.inputs, correlated_test.targets, learned),
        decorrelated_test_rmse=_rmse(
            decorrelated_test.inputs, decorrelated_test.targets, learned
        ),
        masked_decorrelated_rmse=_rmse(
            decorrelated_test.inputs[:, cols], decorrelated_test.targets, masked
        ),
        masked_recovery_error=float(np.linalg.norm(masked - truth[cols, :])),
        spec=spec,
    )
