"""File formats, checkpoints, and the command line surface.

Volumes travel as a raw little-endian float32 payload in row-major
order next to a four-line text sidecar (``<payload>.hdr``) declaring
dims, element type, byte order, and channel name. Parameter
checkpoints are a single self-describing archive: a JSON manifest
line followed by concatenated float64 payloads. Every table is CSV
with a leading ``# records=N`` line so consumers can verify row
counts, and every write lands atomically (temp file, then rename).

Subcommands: ``fit`` runs the full testing pipeline on volume inputs,
``simulate`` runs the synthetic replication harness, ``bench`` times
the filter and one field update across sizes, ``oracle`` runs the
brute-force validation suites. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import resource
import sys
import tempfile
import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import __version__
from .em import (
    EmConfig,
    WeightedKde,
    derive_seed,
    em_fit,
    estimate_bandwidths,
    estimate_f1,
)
from .errors import (
    CheckpointFormatError,
    DegenerateInputError,
    LatticeFdrError,
    VolumeFormatError,
)
from .lattice import build_lattice, exact_gaussian_filter, lattice_filter
from .meanfield import (
    FieldWeights,
    KernelBandwidths,
    build_field_lattices,
    dense_mean_field,
    initial_marginals,
    kernel_positions,
    mean_field_step,
    run_mean_field,
    unary_from_posterior,
    unary_prior,
)
from .simulate import SimConfig, run_replications
from .testing import compute_lis, exact_lis_oracle, lis_test
from .volume import coordinates, flatten, unflatten

_VOLUME_DTYPE = "f32le"
_VOLUME_ORDER = "row-major"
_CHECKPOINT_FORMAT = "latticefdr-checkpoint"
_CHECKPOINT_VERSION = 1
_EXACT_BENCH_LIMIT = 2000


# ---------------------------------------------------------------- file layer


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write payload to path via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        # mkstemp opens 0600; restore the permissions a plain open would give
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_volume(path, volume, channel: str) -> None:
    """Write a 3-D array as payload + ``<path>.hdr`` sidecar."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 3 or min(volume.shape) < 1:
        raise VolumeFormatError(f"volume must be 3-D, got shape {volume.shape}")
    if not channel or any(c in channel for c in "=\n"):
        raise VolumeFormatError(f"bad channel name {channel!r}")
    path = str(path)
    nx, ny, nz = volume.shape
    header = (
        f"dims={nx},{ny},{nz}\n"
        f"dtype={_VOLUME_DTYPE}\n"
        f"order={_VOLUME_ORDER}\n"
        f"channel={channel}\n"
    )
    _atomic_write_bytes(path, volume.astype("<f4").tobytes(order="C"))
    _atomic_write_text(path + ".hdr", header)


def read_volume(path) -> tuple[np.ndarray, str]:
    """Read a payload + sidecar pair; returns (volume, channel name)."""
    path = str(path)
    sidecar = path + ".hdr"
    if not os.path.exists(sidecar):
        raise VolumeFormatError(f"missing sidecar {sidecar}")
    fields = {}
    with open(sidecar, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise VolumeFormatError(f"malformed sidecar line {line!r}")
            key, value = line.split("=", 1)
            fields[key] = value
    for key in ("dims", "dtype", "order", "channel"):
        if key not in fields:
            raise VolumeFormatError(f"sidecar {sidecar} lacks {key!r}")
    if fields["dtype"] != _VOLUME_DTYPE:
        raise VolumeFormatError(f"unsupported dtype {fields['dtype']!r}")
    if fields["order"] != _VOLUME_ORDER:
        raise VolumeFormatError(f"unsupported order {fields['order']!r}")
    try:
        dims = tuple(int(part) for part in fields["dims"].split(","))
    except ValueError:
        raise VolumeFormatError(f"bad dims line {fields['dims']!r}") from None
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"dims must be three positive ints, got {dims}")
    expected = 4 * dims[0] * dims[1] * dims[2]
    with open(path, "rb") as handle:
        payload = handle.read()
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload)} bytes, "
            f"dims {fields['dims']} require {expected}"
        )
    volume = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return volume.astype(np.float64), fields["channel"]


def save_checkpoint(path, weights, f1, bandwidths, loss_history) -> None:
    """Archive fitted parameters as one self-describing file."""
    arrays = [
        ("w", np.array([weights.w0, weights.w1, weights.w2])),
        ("f1_centers", np.asarray(f1.centers, dtype=np.float64)),
        ("f1_weights", np.asarray(f1.weights, dtype=np.float64)),
        ("f1_bandwidth", np.array([f1.bandwidth])),
        ("theta_alpha", np.asarray(bandwidths.theta_alpha, dtype=np.float64)),
        ("theta_beta", np.array([bandwidths.theta_beta])),
        ("theta_gamma", np.asarray(bandwidths.theta_gamma, dtype=np.float64)),
        ("loss_history", np.asarray(loss_history, dtype=np.float64)),
    ]
    manifest = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    blob += b"".join(arr.astype("<f8").tobytes(order="C") for _, arr in arrays)
    _atomic_write_bytes(str(path), blob)


def load_checkpoint(path):
    """Restore (weights, f1, bandwidths, loss_history) from an archive."""
    with open(str(path), "rb") as handle:
        blob = handle.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointFormatError(f"{path}: no manifest line")
    try:
        manifest = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: not a checkpoint archive")
    if manifest.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unknown version {manifest.get('version')!r}, "
            f"expected {_CHECKPOINT_VERSION}"
        )
    payload = blob[newline + 1 :]
    arrays = {}
    offset = 0
    for name, shape in manifest["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise CheckpointFormatError(
                f"{path}: payload holds {len(payload)} bytes, manifest "
                f"requires at least {offset + nbytes}"
            )
        arrays[name] = np.frombuffer(
            payload[offset : offset + nbytes], dtype="<f8"
        ).reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise CheckpointFormatError(
            f"{path}: {len(payload) - offset} trailing bytes after declared arrays"
        )
    missing = {
        "w", "f1_centers", "f1_weights", "f1_bandwidth",
        "theta_alpha", "theta_beta", "theta_gamma", "loss_history",
    } - set(arrays)
    if missing:
        raise CheckpointFormatError(f"{path}: missing arrays {sorted(missing)}")
    weights = FieldWeights(*arrays["w"])
    f1 = WeightedKde(
        arrays["f1_centers"], arrays["f1_weights"], float(arrays["f1_bandwidth"][0])
    )
    bandwidths = KernelBandwidths(
        tuple(arrays["theta_alpha"]),
        float(arrays["theta_beta"][0]),
        tuple(arrays["theta_gamma"]),
    )
    return weights, f1, bandwidths, list(arrays["loss_history"])


def write_table(path, header: list[str], rows: list[list]) -> None:
    """CSV with a leading record-count line; floats via repr."""
    lines = [f"# records={len(rows)}", ",".join(header)]
    for row in rows:
        lines.append(
            ",".join(
                repr(v) if isinstance(v, float) else str(v) for v in row
            )
        )
    _atomic_write_text(str(path), "\n".join(lines) + "\n")


def write_metadata(path, record: dict) -> None:
    payload = {"version": __version__, **record}
    _atomic_write_text(
        str(path), json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )


def _peak_memory_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


# ---------------------------------------------------------------- run config


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for one `fit` run."""

    zstats_path: str
    delta_mu_path: str
    out_dir: str
    mask_path: str | None = None
    alpha: float = 0.1
    seed: int = 0
    weak_signal: bool = False
    max_em: int = 25
    patience: int = 5
    field_iterations: int = 5
    mc_samples: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 5
    pair_budget: int = 100_000

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DegenerateInputError(f"alpha must be in (0, 1), got {self.alpha}")
        for name in ("max_em", "patience", "field_iterations", "mc_samples",
                     "epochs", "pair_budget"):
            if getattr(self, name) < 1:
                raise DegenerateInputError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise DegenerateInputError("bad optimizer settings")

    def em_config(self) -> EmConfig:
        return EmConfig(
            iterations=self.max_em,
            patience=self.patience,
            mc_samples=self.mc_samples,
            epochs=self.epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            field_iterations=self.field_iterations,
            weak_signal=self.weak_signal,
            pair_budget=self.pair_budget,
            seed=self.seed,
        )


def run_fit(config: RunConfig) -> dict:
    """Fit, test, and write the full report bundle; returns summary facts."""
    start = time.perf_counter()
    zvol, _ = read_volume(config.zstats_path)
    dvol, _ = read_volume(config.delta_mu_path)
    if zvol.shape != dvol.shape:
        raise DegenerateInputError(
            f"z-stats dims {zvol.shape} do not match delta-mu dims {dvol.shape}"
        )
    mask = None
    if config.mask_path is not None:
        mvol, _ = read_volume(config.mask_path)
        if mvol.shape != zvol.shape:
            raise DegenerateInputError(
                f"mask dims {mvol.shape} do not match z-stats dims {zvol.shape}"
            )
        mask = mvol != 0
        if not mask.any():
            raise DegenerateInputError("mask excludes every voxel")
    dims = zvol.shape

    coords = coordinates(dims, mask)
    x = flatten(zvol, mask)
    delta_mu = flatten(dvol, mask)
    weights, f1, state = em_fit(x, coords, delta_mu, config.em_config())
    lis = compute_lis(
        x, coords, delta_mu, (weights, f1), state.bandwidths,
        config.field_iterations,
    )
    outcome = lis_test(lis, config.alpha)
    runtime = time.perf_counter() - start

    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    write_volume(
        os.path.join(out, "lis.vol"),
        unflatten(lis.values, dims, mask, fill=0.0),
        "lis",
    )
    rejections = unflatten(
        outcome.rejected.astype(np.float64), dims, mask, fill=0.0
    )
    write_volume(os.path.join(out, "rejections.vol"), rejections, "rejections")
    save_checkpoint(
        os.path.join(out, "checkpoint.bin"),
        weights, f1, state.bandwidths, state.loss_history,
    )
    write_table(
        os.path.join(out, "loss_history.csv"),
        ["iteration", "loss"],
        [[i + 1, float(v)] for i, v in enumerate(state.loss_history)],
    )
    write_table(
        os.path.join(out, "summary.csv"),
        ["k", "alpha", "tested", "rejected", "runtime_s", "peak_memory_kb"],
        [[outcome.k, config.alpha, x.size, int(outcome.rejected.sum()),
          runtime, _peak_memory_kb()]],
    )
    write_metadata(
        os.path.join(out, "metadata.json"),
        {
            "command": "fit",
            "zstats": config.zstats_path,
            "delta_mu": config.delta_mu_path,
            "mask": config.mask_path,
            "out": out,
            "dims": list(dims),
            "tested": int(x.size),
            "alpha": config.alpha,
            "seed": config.seed,
            "weak_signal": config.weak_signal,
            "max_em": config.max_em,
            "patience": config.patience,
            "field_iterations": config.field_iterations,
            "mc_samples": config.mc_samples,
            "lr": config.lr,
            "weight_decay": config.weight_decay,
            "epochs": config.epochs,
            "pair_budget": config.pair_budget,
        },
    )
    from . import report

    report.fit_figures(
        os.path.join(out, "figures"), state.loss_history, lis.values,
        rejections, config.alpha,
    )
    return {
        "k": outcome.k,
        "tested": int(x.size),
        "em_iterations": state.iteration,
        "runtime_s": runtime,
    }


# --------------------------------------------------------------- subcommands


def _cmd_fit(args) -> int:
    config = RunConfig(
        zstats_path=args.zstats,
        delta_mu_path=args.delta_mu,
        mask_path=args.mask,
        out_dir=args.out,
        alpha=args.alpha,
        seed=args.seed,
        weak_signal=args.weak_signal,
        max_em=args.max_em,
        patience=args.patience,
        field_iterations=args.R,
        mc_samples=args.samples,
    )
    facts = run_fit(config)
    print(
        f"rejected {facts['k']} of {facts['tested']} voxels at "
        f"alpha={args.alpha} after {facts['em_iterations']} EM iterations "
        f"({facts['runtime_s']:.1f}s)"
    )
    print(f"report bundle written to {args.out}")
    return 0


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be NX,NY,NZ")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("dims must be integers") from None
    if min(dims) < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return dims


def _cmd_simulate(args) -> int:
    config = SimConfig(
        dims=args.dims,
        target_signal_proportion=args.proportion,
        mu1=args.mu1,
        sigma1_sq=args.sigma1sq,
        alpha=args.alpha,
        replications=args.reps,
        seed=args.seed,
    )

    def progress(index, metrics, baseline, elapsed):
        print(
            f"replication {index + 1}/{args.reps}: fdp={metrics.fdp:.4f} "
            f"fnp={metrics.fnp:.4f} tp={metrics.tp} "
            f"(baseline tp={baseline.tp}) {elapsed:.1f}s"
        )

    summary = run_replications(config, progress=progress)

    out = args.out
    os.makedirs(out, exist_ok=True)
    rows = [
        [i + 1, float(summary.fdp[i]), float(summary.fnp[i]),
         int(summary.tp[i]), float(summary.runtime_s[i])]
        for i in range(summary.replications)
    ]
    write_table(
        os.path.join(out, "per_replication.csv"),
        ["replication", "fdp", "fnp", "tp", "runtime_s"],
        rows,
    )
    stats = [
        ("fdp", summary.fdp), ("fnp", summary.fnp), ("tp", summary.tp),
        ("baseline_fdp", summary.baseline_fdp),
        ("baseline_fnp", summary.baseline_fnp),
        ("baseline_tp", summary.baseline_tp),
    ]
    sd = (lambda v: float(np.std(v, ddof=1))) if summary.sd_defined else (
        lambda v: 0.0
    )
    write_table(
        os.path.join(out, "summary.csv"),
        ["metric", "mean", "sd"],
        [[name, float(np.mean(v)), sd(v)] for name, v in stats],
    )
    write_metadata(
        os.path.join(out, "metadata.json"),
        {
            "command": "simulate",
            "dims": list(args.dims),
            "proportion": args.proportion,
            "mu1": args.mu1,
            "sigma1sq": args.sigma1sq,
            "alpha": args.alpha,
            "reps": args.reps,
            "seed": args.seed,
            "out": out,
        },
    )
    from . import report

    report.simulate_figures(
        os.path.join(out, "figures"), summary, args.alpha
    )
    print(
        f"mean fdp={summary.fdp_mean:.4f} (sd {summary.fdp_sd:.4f}), "
        f"mean tp={summary.tp_mean:.1f} vs baseline "
        f"{float(np.mean(summary.baseline_tp)):.1f}"
    )
    print(f"tables written to {out}")
    return 0


def _bench_instance(m: int, d: int, seed: int):
    """Synthetic voxel set mimicking pipeline geometry at size m."""
    side = int(np.ceil(m ** (1.0 / 3.0)))
    dims = (side, side, side)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(dims)
    delta_vol = gaussian_filter(noise, sigma=2.0)
    coords = coordinates(dims)[:m]
    delta_mu = flatten(delta_vol)[:m]
    bandwidths = estimate_bandwidths(
        coords, delta_mu, pair_budget=20_000, seed=derive_seed(seed, 1)
    )
    appearance, smooth = kernel_positions(coords, delta_mu, bandwidths)
    positions = appearance if d == 4 else smooth
    return coords, delta_mu, bandwidths, positions


def bench_rows(sizes, d: int, seed: int) -> list[dict]:
    """Time the filter and one field update at each size.

    Each timing is the best of three calls so scheduler noise does not
    masquerade as scaling. Ratio entries are populated only when a size
    is exactly double its predecessor; the exact filter is measured only
    up to the refusal limit.
    """
    rows = []
    previous = None
    for index, m in enumerate(sizes):
        coords, delta_mu, bandwidths, positions = _bench_instance(
            m, d, derive_seed(seed, index)
        )
        rng = np.random.default_rng(derive_seed(seed, 100 + index))
        values = np.column_stack([rng.standard_normal(m), np.ones(m)])

        t0 = time.perf_counter()
        lattice = build_lattice(positions)
        build_s = time.perf_counter() - t0
        filter_s = min(
            _timed(lambda: lattice_filter(lattice, values)) for _ in range(3)
        )

        lattices = build_field_lattices(coords, delta_mu, bandwidths)
        unary = unary_prior(0.5, m)
        q = initial_marginals(unary)
        weights = FieldWeights(0.5, 1.0, 1.0)
        step_s = min(
            _timed(lambda: mean_field_step(q, unary, lattices, weights))
            for _ in range(3)
        )

        exact_s = None
        if m <= _EXACT_BENCH_LIMIT:
            exact_s = _timed(lambda: exact_gaussian_filter(positions, values))

        filter_ratio = step_ratio = None
        if previous is not None and m == 2 * previous[0]:
            filter_ratio = filter_s / previous[1]
            step_ratio = step_s / previous[2]
        rows.append({
            "m": m, "build_s": build_s, "filter_s": filter_s,
            "step_s": step_s, "exact_s": exact_s,
            "filter_ratio": filter_ratio, "step_ratio": step_ratio,
        })
        previous = (m, filter_s, step_s)
    return rows


def _cmd_bench(args) -> int:
    sizes = args.sizes
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        print("error: sizes must be strictly ascending", file=sys.stderr)
        return 2
    print(
        "# metadata: "
        + json.dumps(
            {"command": "bench", "sizes": sizes, "d": args.d,
             "seed": args.seed, "version": __version__},
            sort_keys=True,
        )
    )
    refused = [m for m in sizes if m > _EXACT_BENCH_LIMIT]
    if refused:
        print(
            f"# exact filter skipped for m > {_EXACT_BENCH_LIMIT} "
            f"(quadratic cost): {','.join(str(m) for m in refused)}"
        )
    rows = bench_rows(sizes, args.d, args.seed)
    columns = [
        "m", "build_s", "filter_s", "step_s", "exact_s",
        "filter_ratio", "step_ratio",
    ]
    print(f"# records={len(rows)}")
    print(",".join(columns))
    for row in rows:
        print(",".join(
            "" if row[c] is None
            else repr(row[c]) if isinstance(row[c], float)
            else str(row[c])
            for c in columns
        ))
    return 0


def _timed(thunk) -> float:
    t0 = time.perf_counter()
    thunk()
    return time.perf_counter() - t0


def _oracle_filter_suite(seed: int):
    rng = np.random.default_rng(seed)
    for index in range(30):
        m = int(rng.integers(100, 1001))
        d = int(rng.choice([3, 4]))
        positions = rng.uniform(0.0, 2.5, (m, d))
        values = np.column_stack([rng.standard_normal(m), np.ones(m)])
        exact = exact_gaussian_filter(positions, values)
        approx = lattice_filter(build_lattice(positions), values)
        rel = float(
            np.linalg.norm(approx - exact) / np.linalg.norm(exact)
        )
        yield index, {"m": m, "d": d, "rel_l2": rel}, rel <= 0.05


def _oracle_meanfield_suite(seed: int):
    rng = np.random.default_rng(seed)
    for index in range(10):
        m = int(rng.integers(200, 501))
        coords = rng.uniform(0.0, 10.0, (m, 3))
        delta_mu = rng.normal(0.0, 0.3, m)
        bandwidths = estimate_bandwidths(
            coords, delta_mu, pair_budget=20_000,
            seed=derive_seed(seed, index),
        )
        x = rng.standard_normal(m) + np.where(rng.random(m) < 0.2, -2.0, 0.0)
        f1 = estimate_f1(x, np.clip(rng.random(m), 0.05, 0.95))
        weights = FieldWeights(
            float(rng.uniform(-1.0, 1.0)),
            float(np.exp(rng.uniform(np.log(0.2), np.log(5.0)))),
            float(np.exp(rng.uniform(np.log(0.2), np.log(5.0)))),
        )
        unary = unary_from_posterior(x, f1, weights.w0)
        lattices = build_field_lattices(coords, delta_mu, bandwidths)
        q_fast = run_mean_field(unary, lattices, weights, iterations=5)
        positions = kernel_positions(coords, delta_mu, bandwidths)
        q_dense = dense_mean_field(unary, positions, weights, iterations=5)
        gap = float(np.max(np.abs(q_fast - q_dense)))
        yield index, {"m": m, "max_abs_gap": gap}, gap <= 0.02


def _oracle_lis_suite(seed: int):
    rng = np.random.default_rng(seed)
    for index in range(10):
        m = int(rng.integers(6, 13))
        coords = np.column_stack([
            rng.uniform(0.0, 3.0, m),
            rng.uniform(0.0, 3.0, m),
            rng.uniform(0.0, 3.0, m),
        ])
        delta_mu = rng.normal(0.0, 0.3, m)
        bandwidths = KernelBandwidths(
            (1.5, 1.5, 1.5), 0.3, (1.0, 1.0, 1.0)
        )
        x = rng.standard_normal(m) - 2.0 * (rng.random(m) < 0.3)
        f1 = estimate_f1(x, np.clip(rng.random(m), 0.05, 0.95))
        weights = FieldWeights(0.2, 0.8, 0.8)
        oracle, marginals = exact_lis_oracle(
            x, coords, delta_mu, (weights, f1), bandwidths,
            with_marginals=True,
        )
        pairing = float(np.max(np.abs(marginals.sum(axis=1) - 1.0)))
        approx = compute_lis(
            x, coords, delta_mu, (weights, f1), bandwidths
        )
        gap = float(np.max(np.abs(approx.values - oracle.values)))
        yield index, {
            "m": m, "marginal_pairing": pairing, "diagnostic_gap": gap,
        }, pairing <= 1e-12


_ORACLE_SUITES = {
    "filter": _oracle_filter_suite,
    "meanfield": _oracle_meanfield_suite,
    "lis": _oracle_lis_suite,
}


def _cmd_oracle(args) -> int:
    print(
        "# metadata: "
        + json.dumps(
            {"command": "oracle", "suite": args.suite, "seed": args.seed,
             "version": __version__},
            sort_keys=True,
        )
    )
    failures = 0
    total = 0
    for index, facts, passed in _ORACLE_SUITES[args.suite](args.seed):
        total += 1
        failures += 0 if passed else 1
        detail = " ".join(
            f"{key}={value:.6g}" if isinstance(value, float)
            else f"{key}={value}"
            for key, value in facts.items()
        )
        print(
            f"suite={args.suite} instance={index:02d} {detail} "
            f"{'pass' if passed else 'FAIL'}"
        )
    print(
        f"suite={args.suite} total={total} failed={failures} "
        f"verdict={'pass' if failures == 0 else 'FAIL'}"
    )
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latticefdr",
        description=(
            "Spatial FDR control with a fully connected hidden Markov "
            "random field"
        ),
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit the field and test on volume inputs")
    fit.add_argument("--zstats", required=True, help="z-statistic volume")
    fit.add_argument("--delta-mu", required=True, help="mean-shift volume")
    fit.add_argument("--mask", default=None, help="inclusion mask volume")
    fit.add_argument("--alpha", type=float, default=0.1)
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--weak-signal", action="store_true")
    fit.add_argument("--max-em", type=int, default=25)
    fit.add_argument("--patience", type=int, default=5)
    fit.add_argument("--R", type=int, default=5, help="field update sweeps")
    fit.add_argument("--samples", type=int, default=100,
                     help="Monte Carlo label samples per EM round")
    fit.set_defaults(handler=_cmd_fit)

    sim = sub.add_parser("simulate", help="run the synthetic benchmark")
    sim.add_argument("--dims", type=_parse_dims, default=(20, 20, 20))
    sim.add_argument("--proportion", type=float, default=0.2)
    sim.add_argument("--mu1", type=float, default=-2.0)
    sim.add_argument("--sigma1sq", type=float, default=1.0)
    sim.add_argument("--alpha", type=float, default=0.1)
    sim.add_argument("--reps", type=int, default=1)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True, help="output directory")
    sim.set_defaults(handler=_cmd_simulate)

    bench = sub.add_parser("bench", help="time the filter across sizes")
    bench.add_argument(
        "--sizes", type=lambda s: [int(p) for p in s.split(",")],
        default=[50_000, 100_000, 200_000],
    )
    bench.add_argument("--d", type=int, choices=(3, 4), default=4)
    bench.add_argument("--seed", type=int, default=0)
    bench.set_defaults(handler=_cmd_bench)

    oracle = sub.add_parser("oracle", help="run brute-force validation suites")
    oracle.add_argument(
        "--suite", required=True, choices=sorted(_ORACLE_SUITES)
    )
    oracle.add_argument("--seed", type=int, default=0)
    oracle.set_defaults(handler=_cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except LatticeFdrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
