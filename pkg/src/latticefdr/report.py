"""Figure rendering for the report bundles.

Every figure lands as a PNG next to the delimited outputs so a run can
be reviewed without rerunning anything. Rendering uses the Agg backend
and writes through a temp file, keeping the atomic-output rule.
"""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as handle:
            fig.savefig(handle, format="png", dpi=110)
        # mkstemp opens 0600; restore the permissions a plain open would give
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def loss_curve(loss_history, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    iterations = np.arange(1, len(loss_history) + 1)
    ax.plot(iterations, loss_history, marker="o", color="#2c5f8a")
    ax.set_xlabel("EM iteration")
    ax.set_ylabel("monitored loss")
    ax.set_title("EM convergence")
    fig.tight_layout()
    _save(fig, path)


def lis_histogram(lis_values, alpha: float, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(np.asarray(lis_values), bins=40, color="#2c5f8a")
    ax.axvline(alpha, color="#b2432f", linestyle="--", label=f"alpha={alpha}")
    ax.set_xlabel("local index of significance")
    ax.set_ylabel("voxels")
    ax.set_title("LIS distribution")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def rejection_slice(rejections, path: str) -> None:
    """Central axial slice of the rejection volume."""
    rejections = np.asarray(rejections)
    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.imshow(
        rejections[:, :, rejections.shape[2] // 2].T,
        origin="lower",
        cmap="Greys",
        interpolation="nearest",
    )
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title("rejections, central z slice")
    fig.tight_layout()
    _save(fig, path)


def fit_figures(directory, loss_history, lis_values, rejections, alpha):
    loss_curve(loss_history, os.path.join(directory, "loss_curve.png"))
    lis_histogram(lis_values, alpha, os.path.join(directory, "lis_histogram.png"))
    rejection_slice(rejections, os.path.join(directory, "rejection_slice.png"))


def fdp_per_replication(summary, alpha: float, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    reps = np.arange(1, summary.replications + 1)
    ax.bar(reps, summary.fdp, color="#2c5f8a", label="field-based")
    ax.axhline(alpha, color="#b2432f", linestyle="--", label=f"alpha={alpha}")
    ax.set_xlabel("replication")
    ax.set_ylabel("false discovery proportion")
    ax.set_title("FDP per replication")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def power_comparison(summary, path: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    reps = np.arange(1, summary.replications + 1)
    width = 0.4
    ax.bar(reps - width / 2, summary.tp, width, color="#2c5f8a",
           label="field-based")
    ax.bar(reps + width / 2, summary.baseline_tp, width, color="#999999",
           label="p-value step-up")
    ax.set_xlabel("replication")
    ax.set_ylabel("true positives")
    ax.set_title("power against the step-up baseline")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def simulate_figures(directory, summary, alpha):
    fdp_per_replication(
        summary, alpha, os.path.join(directory, "fdp_per_replication.png")
    )
    power_comparison(summary, os.path.join(directory, "power_comparison.png"))
