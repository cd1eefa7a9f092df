"""Fully connected binary field and its parallel mean-field updates.

The hidden label field couples every pair of voxels through two Gaussian
kernels, an appearance kernel over (scaled) spatial coordinates plus a
local shift channel and a smoothness kernel over the coordinates alone.
The posterior over labels is approximated by independent per-voxel
marginals, refined by a fixed number of parallel updates in which the
pairwise messages are computed by lattice filtering instead of an O(m^2)
sum. A dense quadratic implementation of the same update is kept as the
validation oracle.

Unary potentials use the gauge U_i(0) = 0; only the cost of labeling a
voxel nonnull is stored. Under this gauge the initial marginals are the
row-wise softmax of the unary table and each update stays a softmax of
corrected potentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from latticefdr.errors import DegenerateInputError, ProblemTooLargeError
from latticefdr.lattice import PermutohedralLattice, build_lattice

__all__ = [
    "FieldWeights",
    "KernelBandwidths",
    "build_field_lattices",
    "dense_mean_field",
    "kernel_positions",
    "mean_field_step",
    "pairwise_weight",
    "run_mean_field",
    "unary_from_posterior",
    "unary_prior",
]

_DENSE_LIMIT = 2000


@dataclass(frozen=True)
class KernelBandwidths:
    """Per-channel bandwidths for the two pairwise kernels.

    theta_alpha scales the three spatial axes of the appearance kernel,
    theta_beta its shift channel, and theta_gamma the spatial axes of
    the smoothness kernel.
    """

    theta_alpha: tuple[float, float, float]
    theta_beta: float
    theta_gamma: tuple[float, float, float]

    def __post_init__(self):
        alpha = np.asarray(self.theta_alpha, dtype=np.float64)
        gamma = np.asarray(self.theta_gamma, dtype=np.float64)
        if alpha.shape != (3,) or gamma.shape != (3,):
            raise DegenerateInputError(
                "theta_alpha and theta_gamma must each hold 3 values"
            )
        beta = float(self.theta_beta)
        every = np.concatenate([alpha, [beta], gamma])
        if not np.all(np.isfinite(every)) or np.any(every <= 0):
            raise DegenerateInputError(
                f"bandwidths must be positive and finite, got {every}"
            )
        object.__setattr__(self, "theta_alpha", tuple(float(v) for v in alpha))
        object.__setattr__(self, "theta_beta", beta)
        object.__setattr__(self, "theta_gamma", tuple(float(v) for v in gamma))


@dataclass(frozen=True)
class FieldWeights:
    """Unary weight w0 and the two pairwise kernel weights w1, w2."""

    w0: float
    w1: float
    w2: float

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise DegenerateInputError(f"field weights must be finite, got {arr}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w0, self.w1, self.w2], dtype=np.float64)


def kernel_positions(coords, delta_mu, bandwidths: KernelBandwidths):
    """Bandwidth-scaled position matrices for the two kernels.

    Returns (appearance, smoothness). The appearance matrix carries the
    three scaled coordinates plus the scaled shift channel and is None
    when ``delta_mu`` is None; the smoothness matrix always holds the
    scaled coordinates alone.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DegenerateInputError(
            f"coords must have shape (m, 3), got {coords.shape}"
        )
    smooth = coords / np.asarray(bandwidths.theta_gamma)
    if delta_mu is None:
        return None, smooth
    delta_mu = np.asarray(delta_mu, dtype=np.float64)
    if delta_mu.shape != (coords.shape[0],):
        raise DegenerateInputError(
            f"delta_mu must have shape ({coords.shape[0]},), got {delta_mu.shape}"
        )
    if not np.all(np.isfinite(delta_mu)):
        raise DegenerateInputError("delta_mu must be finite")
    appearance = np.empty((coords.shape[0], 4))
    appearance[:, :3] = coords / np.asarray(bandwidths.theta_alpha)
    appearance[:, 3] = delta_mu / bandwidths.theta_beta
    return appearance, smooth


def build_field_lattices(coords, delta_mu, bandwidths: KernelBandwidths):
    """Build the (appearance, smoothness) lattice pair for one voxel set."""
    appearance, smooth = kernel_positions(coords, delta_mu, bandwidths)
    if appearance is None:
        raise DegenerateInputError("appearance kernel requires delta_mu")
    return build_lattice(appearance), build_lattice(smooth)


def pairwise_weight(i: int, j: int, positions, weights: FieldWeights) -> float:
    """Explicit coupling between voxels i and j, the oracle-side formula.

    ``positions`` is the (appearance, smoothness) pair from
    kernel_positions. The production path never materializes these
    weights; they exist to validate the filtered messages.
    """
    if i == j:
        raise DegenerateInputError("pairwise weight is undefined for i == j")
    appearance, smooth = positions
    total = 0.0
    if appearance is not None:
        diff = appearance[i] - appearance[j]
        total += weights.w1 * np.exp(-0.5 * float(diff @ diff))
    diff = smooth[i] - smooth[j]
    total += weights.w2 * np.exp(-0.5 * float(diff @ diff))
    return total


def _check_unary(unary: np.ndarray) -> np.ndarray:
    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 2 or unary.shape[1] != 2:
        raise DegenerateInputError(
            f"unary field must have shape (m, 2), got {unary.shape}"
        )
    if not np.all(np.isfinite(unary)):
        raise DegenerateInputError("unary potentials must be finite")
    if np.any(unary[:, 0] != 0.0):
        raise DegenerateInputError("unary gauge requires U(0) = 0 at every voxel")
    return unary


def unary_from_posterior(x, f1, w0: float) -> np.ndarray:
    """Unary table for the posterior field given observed z-statistics.

    U_i(1) = -(w0 + log phi(x_i) - log f1(x_i)) with phi the standard
    normal density; U_i(0) = 0. ``f1`` may expose ``log_density`` or be
    a plain callable returning densities.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DegenerateInputError(f"x must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DegenerateInputError("z-statistics must be finite")
    if hasattr(f1, "log_density"):
        log_f1 = np.asarray(f1.log_density(x), dtype=np.float64)
    else:
        dens = np.asarray(f1(x), dtype=np.float64)
        if np.any(dens <= 0):
            raise DegenerateInputError(
                "nonnull density vanished at an observed statistic"
            )
        log_f1 = np.log(dens)
    if not np.all(np.isfinite(log_f1)):
        raise DegenerateInputError(
            "nonnull density vanished at an observed statistic"
        )
    unary = np.zeros((x.size, 2))
    unary[:, 1] = -(w0 + norm.logpdf(x) - log_f1)
    return unary


def unary_prior(w0: float, m: int) -> np.ndarray:
    """Unary table of the label prior: U_i(1) = -w0 everywhere."""
    if m < 1:
        raise DegenerateInputError(f"m must be at least 1, got {m}")
    if not np.isfinite(w0):
        raise DegenerateInputError("w0 must be finite")
    unary = np.zeros((m, 2))
    unary[:, 1] = -w0
    return unary


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def initial_marginals(unary: np.ndarray) -> np.ndarray:
    """Row-wise softmax of the unary table, the q(h=1) start point."""
    unary = _check_unary(unary)
    return _softmax_rows(unary)[:, 1]


def mean_field_step(
    q: np.ndarray,
    unary: np.ndarray,
    lattices: tuple[PermutohedralLattice, PermutohedralLattice],
    weights: FieldWeights,
) -> np.ndarray:
    """One parallel update of every marginal from the previous iterate.

    The message for state h is the kernel-weighted average of neighbor
    marginals q_j(h) over j != i: filtering the q(1) channel gives the
    weighted sum directly, the q(0) sum follows from the cached
    homogeneous row sums since filter(1 - q) = filter(1) - filter(q),
    and both are divided by the self-excluded row mass. Both kernels
    weigh the self pair exactly 1, so subtracting the center value
    implements the j != i restriction, and because the row mass comes
    from the same filter the average is exactly convex. Normalizing
    keeps every message in [0, 1] whatever the voxel count, so the
    field weights have a scale-free meaning. The binary compatibility
    |h - h'| then swaps the two message channels, and the softmax of
    unary minus swapped messages is the new field.
    """
    unary = _check_unary(unary)
    q = np.asarray(q, dtype=np.float64)
    m = unary.shape[0]
    if q.shape != (m,):
        raise DegenerateInputError(f"q must have shape ({m},), got {q.shape}")
    message1 = np.zeros(m)
    message0 = np.zeros(m)
    for lattice, w in zip(lattices, (weights.w1, weights.w2)):
        if w == 0.0:
            continue
        if lattice.m != m:
            raise DegenerateInputError(
                "lattice voxel count does not match the field"
            )
        filtered = lattice.filter(q)
        neighbor_mass = lattice.row_sums - 1.0
        # a voxel with essentially no kernel mass on others sends and
        # receives nothing rather than amplifying roundoff
        scale = np.where(
            neighbor_mass > 1e-9, w / np.maximum(neighbor_mass, 1e-9), 0.0
        )
        message1 += scale * (filtered - q)
        message0 += scale * ((lattice.row_sums - filtered) - (1.0 - q))
    corrected = np.empty((m, 2))
    corrected[:, 0] = unary[:, 0] - message1
    corrected[:, 1] = unary[:, 1] - message0
    return _softmax_rows(corrected)[:, 1]


def run_mean_field(
    unary: np.ndarray,
    lattices: tuple[PermutohedralLattice, PermutohedralLattice],
    weights: FieldWeights,
    iterations: int = 5,
) -> np.ndarray:
    """Unrolled mean-field refinement with shared weights per iteration.

    Starts from the softmax of the unary table and applies
    ``iterations`` parallel updates, the recurrent structure used both
    at inference time and inside the Monte Carlo objective.
    """
    if iterations < 1:
        raise DegenerateInputError(
            f"iteration count must be at least 1, got {iterations}"
        )
    q = initial_marginals(unary)
    for _ in range(iterations):
        q = mean_field_step(q, unary, lattices, weights)
    return q


def dense_mean_field(
    unary: np.ndarray,
    positions,
    weights: FieldWeights,
    iterations: int = 5,
    max_points: int = _DENSE_LIMIT,
) -> np.ndarray:
    """Quadratic-time reference of run_mean_field with explicit kernels.

    Materializes each exact Gaussian kernel in full, zeroes the
    diagonal, row-normalizes it to the same neighbor-averaging form the
    lattice path uses, and runs the identical update. Only feasible for
    small m; used to validate the lattice path.
    """
    unary = _check_unary(unary)
    m = unary.shape[0]
    if m > max_points:
        raise ProblemTooLargeError(
            f"dense mean field refuses m={m} voxels (limit {max_points})"
        )
    appearance, smooth = positions
    coupling = np.zeros((m, m))
    for mat, w in zip((appearance, smooth), (weights.w1, weights.w2)):
        if mat is None or w == 0.0:
            continue
        mat = np.asarray(mat, dtype=np.float64)
        sq = np.sum(mat**2, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
        np.maximum(d2, 0.0, out=d2)
        kernel = np.exp(-0.5 * d2)
        np.fill_diagonal(kernel, 0.0)
        neighbor_mass = kernel.sum(axis=1)
        scale = np.where(
            neighbor_mass > 1e-9, w / np.maximum(neighbor_mass, 1e-9), 0.0
        )
        coupling += scale[:, None] * kernel

    q = _softmax_rows(unary)[:, 1]
    for _ in range(max(iterations, 0)):
        message1 = coupling @ q
        message0 = coupling @ (1.0 - q)
        corrected = np.empty((m, 2))
        corrected[:, 0] = unary[:, 0] - message1
        corrected[:, 1] = unary[:, 1] - message0
        q = _softmax_rows(corrected)[:, 1]
    return q
