"""Synthetic volumes and the replication benchmark loop.

Builds desk-scale experiments end to end: a blobby signal mask, z
statistics from the two-group Gaussian mixture, a signal-correlated mean
difference channel, and the replication driver that fits the field,
runs the step-up test, and scores the outcome against the known truth.
The step-up baseline on two-sided p-values is scored on the identical
data so power comparisons never depend on a second data draw.

Every stochastic piece takes an explicit seed, and the replication loop
derives per-replication streams from one master seed, so summaries are
reproducible bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import norm

from latticefdr.em import EmConfig, derive_seed, em_fit
from latticefdr.errors import DegenerateInputError, LatticeFdrError
from latticefdr.testing import TestOutcome, bh_test, compute_lis, lis_test
from latticefdr.volume import check_dims, coordinates, flatten

__all__ = [
    "Metrics",
    "ReplicationSummary",
    "SimConfig",
    "generate_delta_mu",
    "generate_signal_mask",
    "generate_statistics",
    "run_replications",
    "score",
]

_MASK_ATTEMPTS = 1000
_PROPORTION_TOLERANCE = 0.02


@dataclass(frozen=True)
class SimConfig:
    """Settings for one simulated experiment.

    ``delta_mu_mode`` selects the mean-difference channel: generated
    from the signal mask ("signal-correlated") or supplied externally
    through ``external_delta_mu``. ``all_null`` overrides the mask with
    h = 0 everywhere for calibration experiments; the target proportion
    is ignored in that case. With ``fresh_mask`` false one mask is drawn
    up front and reused by every replication.
    """

    dims: tuple[int, int, int]
    target_signal_proportion: float = 0.2
    mu1: float = -2.0
    sigma1_sq: float = 1.0
    alpha: float = 0.1
    replications: int = 1
    seed: int = 0
    delta_mu_mode: str = "signal-correlated"
    fresh_mask: bool = True
    all_null: bool = False
    em: EmConfig | None = None
    external_delta_mu: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "dims", check_dims(self.dims))
        if not self.all_null and not (0.01 < self.target_signal_proportion < 0.9):
            raise DegenerateInputError(
                "target signal proportion must lie in (0.01, 0.9), got "
                f"{self.target_signal_proportion}"
            )
        if self.sigma1_sq <= 0:
            raise DegenerateInputError("sigma1_sq must be positive")
        if self.replications < 1:
            raise DegenerateInputError("replication count must be at least 1")
        if not (0.0 < self.alpha < 1.0):
            raise DegenerateInputError("alpha must lie strictly in (0, 1)")
        if self.delta_mu_mode not in ("signal-correlated", "external"):
            raise DegenerateInputError(
                f"unknown delta-mu mode {self.delta_mu_mode!r}"
            )
        if self.delta_mu_mode == "external" and self.external_delta_mu is None:
            raise DegenerateInputError(
                "external delta-mu mode requires external_delta_mu"
            )


@dataclass(frozen=True)
class Metrics:
    """Confusion counts of one tested volume and the derived rates.

    First index is the decision (rejected or not), second the truth, so
    n10 counts false discoveries and n01 missed signals.
    """

    n00: int
    n10: int
    n01: int
    n11: int

    @property
    def n1(self) -> int:
        return self.n10 + self.n11

    @property
    def n0(self) -> int:
        return self.n00 + self.n01

    @property
    def m0(self) -> int:
        return self.n00 + self.n10

    @property
    def m1(self) -> int:
        return self.n01 + self.n11

    @property
    def fdp(self) -> float:
        return self.n10 / max(self.n1, 1)

    @property
    def fnp(self) -> float:
        return self.n01 / max(self.n0, 1)

    @property
    def tp(self) -> int:
        return self.n11


@dataclass(frozen=True)
class ReplicationSummary:
    """Per-replication rates plus their means and spreads.

    ``sd_defined`` is false for a single replication, in which case the
    SD accessors return 0 by convention.
    """

    alpha: float
    fdp: np.ndarray
    fnp: np.ndarray
    tp: np.ndarray
    runtime_s: np.ndarray
    baseline_fdp: np.ndarray
    baseline_fnp: np.ndarray
    baseline_tp: np.ndarray
    sd_defined: bool

    @property
    def replications(self) -> int:
        return self.fdp.size

    def _sd(self, values: np.ndarray) -> float:
        if not self.sd_defined:
            return 0.0
        return float(np.std(values, ddof=1))

    @property
    def fdp_mean(self) -> float:
        return float(self.fdp.mean())

    @property
    def fdp_sd(self) -> float:
        return self._sd(self.fdp)

    @property
    def fnp_mean(self) -> float:
        return float(self.fnp.mean())

    @property
    def fnp_sd(self) -> float:
        return self._sd(self.fnp)

    @property
    def tp_mean(self) -> float:
        return float(self.tp.mean())

    @property
    def tp_sd(self) -> float:
        return self._sd(self.tp)


def _neighbor_counts(mask: np.ndarray) -> np.ndarray:
    """Number of face-adjacent true voxels at each position."""
    counts = np.zeros(mask.shape, dtype=np.int32)
    for axis in range(3):
        for shift in (1, -1):
            rolled = np.roll(mask, shift, axis=axis)
            # rolling wraps around; cut the wrapped slab
            index = [slice(None)] * 3
            index[axis] = 0 if shift == 1 else -1
            rolled[tuple(index)] = False
            counts += rolled
    return counts


def _remove_isolated(mask: np.ndarray) -> np.ndarray:
    return mask & (_neighbor_counts(mask) > 0)


def generate_signal_mask(dims, target_proportion, seed) -> np.ndarray:
    """Random blobby truth mask near a target signal proportion.

    Unions axis-aligned ellipsoids (semi-axes 2 to 6 voxels, centers
    uniform over the grid) until the proportion of true voxels is
    within 2 percentage points of the target, then drops voxels with no
    face-adjacent companion. A blob that would overshoot the window is
    discarded and redrawn.
    """
    dims = check_dims(dims)
    target_proportion = float(target_proportion)
    if not (0.01 < target_proportion < 0.9):
        raise DegenerateInputError(
            f"target signal proportion must lie in (0.01, 0.9), got "
            f"{target_proportion}"
        )
    rng = np.random.default_rng(seed)
    total = dims[0] * dims[1] * dims[2]
    low = target_proportion - _PROPORTION_TOLERANCE
    high = target_proportion + _PROPORTION_TOLERANCE
    grids = np.meshgrid(
        np.arange(dims[0], dtype=np.float64),
        np.arange(dims[1], dtype=np.float64),
        np.arange(dims[2], dtype=np.float64),
        indexing="ij",
    )
    mask = np.zeros(dims, dtype=bool)
    for _ in range(_MASK_ATTEMPTS):
        if mask.sum() / total >= low:
            cleaned = _remove_isolated(mask)
            if cleaned.sum() / total >= low:
                return cleaned
            mask = cleaned
            continue
        center = rng.uniform(0.0, np.asarray(dims, dtype=np.float64))
        semi = rng.uniform(2.0, 6.0, size=3)
        quad = np.zeros(dims)
        for g, c, a in zip(grids, center, semi):
            quad += ((g - c) / a) ** 2
        candidate = mask | (quad <= 1.0)
        if candidate.sum() / total <= high:
            mask = candidate
    raise DegenerateInputError(
        f"signal proportion {target_proportion} not reached within "
        f"{_MASK_ATTEMPTS} blob attempts on grid {dims}"
    )


def generate_statistics(h: np.ndarray, mu1, sigma1_sq, seed) -> np.ndarray:
    """z statistics from the two-group mixture given the truth mask.

    Null voxels draw N(0,1). Signal voxels draw the equal-weight
    mixture of N(mu1, sigma1_sq) and N(2, 1).
    """
    sigma1_sq = float(sigma1_sq)
    if sigma1_sq <= 0:
        raise DegenerateInputError("sigma1_sq must be positive")
    h = np.asarray(h, dtype=bool)
    rng = np.random.default_rng(seed)
    nulls = rng.standard_normal(h.shape)
    pick_first = rng.random(h.shape) < 0.5
    first = rng.normal(float(mu1), np.sqrt(sigma1_sq), h.shape)
    second = rng.normal(2.0, 1.0, h.shape)
    return np.where(h, np.where(pick_first, first, second), nulls)


def generate_delta_mu(h: np.ndarray, seed) -> np.ndarray:
    """Signal-correlated mean-difference channel.

    A -0.5 plateau on the signal support, smoothed by an isotropic
    Gaussian of 2-voxel SD, plus independent N(0, 0.05^2) noise, so the
    channel carries spatial structure aligned with the truth without
    revealing it exactly.
    """
    h = np.asarray(h, dtype=bool)
    rng = np.random.default_rng(seed)
    base = gaussian_filter(-0.5 * h.astype(np.float64), sigma=2.0)
    return base + rng.normal(0.0, 0.05, h.shape)


def score(truth: np.ndarray, outcome: TestOutcome) -> Metrics:
    """Confusion counts of a test outcome against the known truth."""
    truth = np.asarray(truth)
    if truth.ndim == 3:
        truth = flatten(truth)
    truth = truth.astype(bool)
    rejected = outcome.rejected
    if truth.shape != rejected.shape:
        raise DegenerateInputError(
            f"truth has {truth.size} voxels but the outcome covers "
            f"{rejected.size}"
        )
    return Metrics(
        n00=int(np.sum(~rejected & ~truth)),
        n10=int(np.sum(rejected & ~truth)),
        n01=int(np.sum(~rejected & truth)),
        n11=int(np.sum(rejected & truth)),
    )


def _replication_truth(config: SimConfig, fixed_mask, rep_seed) -> np.ndarray:
    if config.all_null:
        return np.zeros(config.dims, dtype=bool)
    if fixed_mask is not None:
        return fixed_mask
    return generate_signal_mask(
        config.dims, config.target_signal_proportion, derive_seed(rep_seed, 0)
    )


def run_replications(config: SimConfig, progress=None) -> ReplicationSummary:
    """Run the full pipeline over independent replications and score it.

    Each replication draws its own mask, statistics, and mean-difference
    channel from seeds split off the master seed, fits the field by EM,
    tests at the configured level, and is scored against the truth; the
    p-value step-up baseline is scored on the same statistics. A failure
    in any replication aborts the loop naming the replication index.
    ``progress``, if given, is called after each replication with
    (index, metrics, baseline_metrics, runtime_seconds).
    """
    emcfg = config.em if config.em is not None else EmConfig()
    coords = coordinates(config.dims)
    fixed_mask = None
    if not config.fresh_mask and not config.all_null:
        fixed_mask = generate_signal_mask(
            config.dims,
            config.target_signal_proportion,
            derive_seed(config.seed, 1 << 32),
        )

    fdp, fnp, tp, runtimes = [], [], [], []
    base_fdp, base_fnp, base_tp = [], [], []
    for index in range(config.replications):
        started = time.perf_counter()
        try:
            rep_seed = derive_seed(config.seed, index)
            truth = _replication_truth(config, fixed_mask, rep_seed)
            stats = generate_statistics(
                truth, config.mu1, config.sigma1_sq, derive_seed(rep_seed, 1)
            )
            if config.delta_mu_mode == "external":
                delta_mu = np.asarray(config.external_delta_mu, dtype=np.float64)
                if delta_mu.shape != tuple(config.dims):
                    raise DegenerateInputError(
                        "external delta-mu shape does not match the grid"
                    )
            else:
                delta_mu = generate_delta_mu(truth, derive_seed(rep_seed, 2))

            x_flat = flatten(stats)
            dmu_flat = flatten(delta_mu)
            rep_em = replace(emcfg, seed=derive_seed(rep_seed, 3))
            weights, f1, state = em_fit(x_flat, coords, dmu_flat, rep_em)
            lis = compute_lis(
                x_flat,
                coords,
                dmu_flat,
                (weights, f1),
                state.bandwidths,
                rep_em.field_iterations,
            )
            metrics = score(truth, lis_test(lis, config.alpha))
            pvalues = 2.0 * norm.sf(np.abs(x_flat))
            baseline = score(truth, bh_test(pvalues, config.alpha))
        except Exception as exc:
            raise LatticeFdrError(f"replication {index} failed: {exc}") from exc
        elapsed = time.perf_counter() - started

        fdp.append(metrics.fdp)
        fnp.append(metrics.fnp)
        tp.append(metrics.tp)
        base_fdp.append(baseline.fdp)
        base_fnp.append(baseline.fnp)
        base_tp.append(baseline.tp)
        runtimes.append(elapsed)
        if progress is not None:
            progress(index, metrics, baseline, elapsed)

    return ReplicationSummary(
        alpha=config.alpha,
        fdp=np.asarray(fdp),
        fnp=np.asarray(fnp),
        tp=np.asarray(tp, dtype=np.float64),
        runtime_s=np.asarray(runtimes),
        baseline_fdp=np.asarray(base_fdp),
        baseline_fnp=np.asarray(base_fnp),
        baseline_tp=np.asarray(base_tp, dtype=np.float64),
        sd_defined=config.replications > 1,
    )
