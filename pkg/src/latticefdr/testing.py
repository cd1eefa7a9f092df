"""Multiple testing on posterior marginals.

The decision side of the pipeline. ``compute_lis`` turns fitted field
parameters into one local index of significance per voxel, the posterior
probability of the null given all statistics jointly. ``lis_test`` runs the
step-up rule on those values: sort ascending, find the longest prefix whose
running mean stays at or below the nominal level, reject that prefix. The
running mean of the rejected LIS values estimates the false discovery
proportion of the rejection set, which is what makes the rule calibrated.

``bh_test`` provides the classic p-value step-up baseline for benchmarks, and
``exact_lis_oracle`` recomputes the marginals by brute-force enumeration of
every label field, which is only feasible for a handful of voxels but needs
no mean-field approximation at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, t as student_t

from .errors import DegenerateInputError, ProblemTooLargeError
from .meanfield import (
    FieldWeights,
    build_field_lattices,
    kernel_positions,
    pairwise_weight,
    run_mean_field,
    unary_from_posterior,
)

_ENUMERATION_LIMIT = 15
# switch the normal quantile to a log-space Newton solve once the survival
# probability is too small to exponentiate safely
_DIRECT_LOG_FLOOR = np.log(1e-280)


@dataclass(frozen=True)
class LisVolume:
    """Per-voxel local index of significance, each in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DegenerateInputError("LIS values must form a nonempty vector")
        if not np.all(np.isfinite(values)):
            raise DegenerateInputError("LIS values must be finite")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise DegenerateInputError("LIS values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class TestOutcome:
    """Result of a step-up procedure at a nominal level.

    ``rejected`` marks exactly ``k`` voxels, the ones carrying the k
    smallest scores with ties broken by voxel index.
    ``sorted_running_mean`` holds (1/j) * sum of the j smallest scores
    for every prefix length j, recorded for diagnostics.
    """

    alpha: float
    k: int
    rejected: np.ndarray = field(repr=False)
    sorted_running_mean: np.ndarray = field(repr=False)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 < alpha < 1.0):
        raise DegenerateInputError("nominal level must lie strictly in (0, 1)")
    return alpha


def compute_lis(x, coords, delta_mu, params, bandwidths, iterations=5):
    """Posterior null probabilities under fitted field parameters.

    ``params`` is the ``(FieldWeights, density)`` pair produced by the EM
    fit (or supplied externally). Runs mean-field inference with the
    observation-aware unaries and returns one minus the resulting nonnull
    marginal per voxel.
    """
    weights, f1 = params
    if not isinstance(weights, FieldWeights):
        raise DegenerateInputError("params must start with field weights")
    lattices = build_field_lattices(coords, delta_mu, bandwidths)
    unary = unary_from_posterior(np.asarray(x, dtype=np.float64), f1, weights.w0)
    q = run_mean_field(unary, lattices, weights, iterations)
    return LisVolume(1.0 - q)


def lis_test(lis, alpha) -> TestOutcome:
    """Step-up rule on LIS values.

    Sorts ascending (stable, so equal values keep voxel order), then takes
    the largest prefix length whose running mean is at or below ``alpha``.
    The comparison is inclusive and an empty prefix yields k = 0 rather
    than an error.
    """
    alpha = _check_alpha(alpha)
    values = lis.values if isinstance(lis, LisVolume) else LisVolume(lis).values
    order = np.argsort(values, kind="stable")
    running = np.cumsum(values[order]) / np.arange(1, values.size + 1)
    passing = np.nonzero(running <= alpha)[0]
    k = int(passing[-1]) + 1 if passing.size else 0
    rejected = np.zeros(values.size, dtype=bool)
    rejected[order[:k]] = True
    return TestOutcome(alpha=alpha, k=k, rejected=rejected, sorted_running_mean=running)


def bh_test(pvalues, alpha) -> TestOutcome:
    """Benjamini-Hochberg step-up baseline.

    Rejects the k smallest p-values where k is the largest j with
    p_(j) <= j * alpha / m. The running mean of the sorted p-values is
    recorded in the outcome for symmetry with ``lis_test`` even though the
    rule itself compares against the linear threshold ladder.
    """
    alpha = _check_alpha(alpha)
    p = np.asarray(pvalues, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise DegenerateInputError("p-values must form a nonempty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise DegenerateInputError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    ladder = alpha * np.arange(1, m + 1) / m
    passing = np.nonzero(p[order] <= ladder)[0]
    k = int(passing[-1]) + 1 if passing.size else 0
    rejected = np.zeros(m, dtype=bool)
    rejected[order[:k]] = True
    running = np.cumsum(p[order]) / np.arange(1, m + 1)
    return TestOutcome(alpha=alpha, k=k, rejected=rejected, sorted_running_mean=running)


def exact_lis_oracle(x, coords, delta_mu, params, bandwidths, with_marginals=False):
    """Null marginals by full enumeration of every label field.

    Sums the unnormalized posterior over all 2^m label configurations with
    dense pairwise couplings, so the result carries no approximation error.
    Cost doubles per voxel; refuses instances beyond 15 voxels.

    With ``with_marginals`` a second return value carries the (m, 2)
    matrix of null and nonnull columns, each accumulated by its own
    weighted sum, so a caller can verify they pair up to one.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.size
    if m > _ENUMERATION_LIMIT:
        raise ProblemTooLargeError(
            f"exact enumeration supports at most {_ENUMERATION_LIMIT} voxels, "
            f"got {m}"
        )
    weights, f1 = params
    positions = kernel_positions(coords, delta_mu, bandwidths)
    unary = unary_from_posterior(x, f1, weights.w0)

    coupling = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            coupling[i, j] = coupling[j, i] = pairwise_weight(
                i, j, positions, weights
            )

    codes = np.arange(1 << m, dtype=np.int64)
    fields = ((codes[:, None] >> np.arange(m)[None, :]) & 1).astype(np.float64)
    # sum over unordered pairs of K_ij * 1[h_i != h_j]
    disagreement = fields @ coupling.sum(axis=1) - np.einsum(
        "ci,ij,cj->c", fields, coupling, fields
    )
    scores = fields @ unary[:, 1] - disagreement
    mass = np.exp(scores - scores.max())
    denom = mass.sum()
    nonnull = (mass @ fields) / denom
    null = (mass @ (1.0 - fields)) / denom
    if with_marginals:
        return LisVolume(null), np.column_stack([null, nonnull])
    return LisVolume(null)


def _normal_upper_quantile_from_log(log_sf: np.ndarray) -> np.ndarray:
    """Invert the standard normal survival function given its logarithm.

    Direct exponentiation is used while the probability is representable.
    Deeper in the tail the quantile is found by Newton iteration on the
    log survival function, started from the classic asymptotic expansion,
    which keeps the conversion finite for arbitrarily extreme statistics.
    """
    z = np.empty_like(log_sf)
    direct = log_sf >= _DIRECT_LOG_FLOOR
    z[direct] = norm.isf(np.exp(log_sf[direct]))
    if np.any(~direct):
        target = log_sf[~direct]
        u = -2.0 * target
        guess = np.sqrt(u - np.log(u) - np.log(2.0 * np.pi))
        for _ in range(4):
            gap = norm.logsf(guess) - target
            slope = -np.exp(norm.logpdf(guess) - norm.logsf(guess))
            guess = guess - gap / slope
        z[~direct] = guess
    return z


def t_to_z(t_values, degrees_of_freedom):
    """Map t statistics to z statistics through matching tail probabilities.

    z = Phi^{-1}(F_t(t)), evaluated on the survival side of the nearer
    tail so the transform is exactly antisymmetric and stays accurate far
    from the center. Monotone and sign preserving.
    """
    scalar = np.ndim(t_values) == 0
    t_arr = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    if not np.all(np.isfinite(t_arr)):
        raise DegenerateInputError("t statistics must be finite")
    df = float(degrees_of_freedom)
    if not np.isfinite(df) or df < 1.0:
        raise DegenerateInputError("degrees of freedom must be at least 1")
    log_sf = student_t.logsf(np.abs(t_arr), df)
    magnitude = _normal_upper_quantile_from_log(log_sf)
    z = np.where(t_arr >= 0.0, magnitude, -magnitude)
    if scalar:
        return float(z[0])
    return z
