"""Command-line harness for the shallow linear-network dropout experiments.

Synthesizes Gaussian data, trains a two-factor linear model under a
chosen dropout scheme, and writes a CSV trace tying the stochastic
objective, its deterministic equivalent, the closed-form global minimum,
and a factor-balance diagnostic together per logged iteration.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, replace

import numpy as np

from .dropout_schemes import DropoutScheme, characteristic_matrix, theta_correction
from .errors import DimensionError, DivergenceError, DropRegError, RankDeficiencyError
from .matrix_kernel import DenseMatrix, SeededRng, gaussian_matrix, svd
from .spectral_regularizer import global_minimizer, theta_for_width
from .trainer import (
    FULL_BATCH_DETERMINISTIC,
    STOCHASTIC_SGD,
    TrainingConfig,
    TrainingTrace,
    deterministic_objective,
    expected_objective_mc,
    train,
)

DET_EQUIVALENCE = "det_equivalence"
GLOBAL_MIN_CONVERGENCE = "global_min_convergence"
DROPCONNECT_EQUIVALENCE = "dropconnect_equivalence"
DROPBLOCK_CORRECTION = "dropblock_correction"
EXPERIMENTS = (
    DET_EQUIVALENCE,
    GLOBAL_MIN_CONVERGENCE,
    DROPCONNECT_EQUIVALENCE,
    DROPBLOCK_CORRECTION,
)

RAW = "raw"
WIDTH_SCALED = "width-scaled"

CSV_HEADER = "iter,stochastic_obj,deterministic_obj,global_min_ref,balance_max_ratio"

_ETA_HALVINGS = 10


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved description of one CLI run."""

    experiment: str
    a: int = 8
    b: int = 10
    d: int = 6
    n: int = 40
    r: int = 2
    theta: float = 0.5
    eta: float | None = None
    iters: int = 2000
    seed: int = 0
    mc_samples: int = 20000
    out: str = "trace.csv"
    check: bool = False
    theta_convention: str = WIDTH_SCALED

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if min(self.a, self.b, self.d, self.n, self.r) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ValueError(f"theta must be in (0, 1), got {self.theta}")
        if self.eta is not None and self.eta <= 0.0:
            raise ValueError("eta must be positive")
        if self.iters < 1:
            raise ValueError("iteration count must be >= 1")
        if self.mc_samples < 2:
            raise ValueError("mc_samples must be >= 2")
        if self.theta_convention not in (RAW, WIDTH_SCALED):
            raise ValueError(f"theta convention must be {RAW!r} or {WIDTH_SCALED!r}")
        if self.experiment != DROPCONNECT_EQUIVALENCE and self.d % self.r != 0:
            raise ValueError(f"block size {self.r} must divide width {self.d}")

    @property
    def block_size(self) -> int:
        return 1 if self.experiment == DROPCONNECT_EQUIVALENCE else self.r


@dataclass(frozen=True)
class SyntheticDataset:
    x: DenseMatrix
    y: DenseMatrix
    u_true: DenseMatrix
    v_true: DenseMatrix
    u_init: DenseMatrix
    v_init: DenseMatrix


def synthesize_dataset(
    a: int, b: int, d: int, n: int, seed: int, orthogonal_rows: bool = False
) -> SyntheticDataset:
    """Gaussian data and factors from distinct seeded streams; Y = U_true V_true^T X.

    If the smallest singular value of X falls below 1e-8 the dataset is
    resampled once with seed + 1; a second failure raises
    RankDeficiencyError. With orthogonal_rows, the rows of X are rotated
    to be mutually orthogonal while keeping their norms (the weight-mask
    and unit-mask objectives coincide exactly only in that geometry).
    """
    for attempt, s in enumerate((seed, seed + 1)):
        x = gaussian_matrix(SeededRng(s, stream_id=1), b, n)
        sigma_min = float(svd(x).singular_values[-1])
        if sigma_min > 1e-8:
            break
        if attempt == 1:
            raise RankDeficiencyError(
                f"data matrix rank guard failed twice (sigma_min = {sigma_min:g})"
            )
    if orthogonal_rows:
        if b > n:
            raise DimensionError("row orthogonalization needs at least as many columns as rows")
        right = svd(x).right.data  # n x b, orthonormal columns
        row_norms = np.sqrt(np.sum(x.data**2, axis=1))
        x = DenseMatrix.from_array(row_norms[:, None] * right.T)
    u_true = gaussian_matrix(SeededRng(s, stream_id=2), a, d)
    v_true = gaussian_matrix(SeededRng(s, stream_id=3), b, d)
    u_init = gaussian_matrix(SeededRng(s, stream_id=4), a, d)
    v_init = gaussian_matrix(SeededRng(s, stream_id=5), b, d)
    y = DenseMatrix.from_array(u_true.data @ (v_true.data.T @ x.data))
    return SyntheticDataset(x, y, u_true, v_true, u_init, v_init)


def _resolve_thetas(spec: ExperimentSpec) -> tuple[float, float]:
    """(theta_bar for the envelope reference, theta used during training)."""
    r = spec.block_size
    if spec.theta_convention == WIDTH_SCALED:
        theta_bar = spec.theta
        theta_train = theta_for_width(theta_bar, r, spec.d)
    else:
        theta_train = spec.theta
        beta_bar = (r / spec.d) * (1.0 - theta_train) / theta_train
        theta_bar = 1.0 / (1.0 + beta_bar)
    return theta_bar, theta_train


def _auto_eta(x: DenseMatrix, n: int, single_sample: bool) -> float:
    top = float(svd(x).singular_values[0])
    eta = 0.5 / (top * top)
    return eta / n if single_sample else eta


def _balance_ratio(norms: np.ndarray) -> float:
    high = float(norms.max())
    if high == 0.0:
        return 1.0
    low = float(norms.min())
    return math.inf if low == 0.0 else high / low


def _train_with_halving(ds: SyntheticDataset, cfg: TrainingConfig, eta_fixed: bool):
    """Train, halving an auto-selected learning rate on divergence."""
    attempts = 1 if eta_fixed else _ETA_HALVINGS + 1
    for i in range(attempts):
        try:
            return train(ds.x, ds.y, ds.u_init, ds.v_init, cfg)
        except DivergenceError:
            if i == attempts - 1:
                raise
            cfg = replace(cfg, learning_rate=cfg.learning_rate / 2.0)
    raise AssertionError("unreachable")


def emit_csv(trace: TrainingTrace, path: str, global_min_ref: float) -> None:
    """Write the trace with the exact schema header, LF line endings."""
    if not path:
        raise ValueError("output path must be nonempty")
    lines = [CSV_HEADER]
    for rec in trace.records:
        lines.append(
            "%d,%.12g,%.12g,%.12g,%.12g"
            % (
                rec.iteration,
                rec.stochastic_obj,
                rec.deterministic_obj,
                global_min_ref,
                _balance_ratio(rec.block_norms),
            )
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _mc_stochastic_records(
    trace: TrainingTrace, ds: SyntheticDataset, scheme: DropoutScheme, spec: ExperimentSpec
) -> tuple[TrainingTrace, list[tuple[float, float]]]:
    """Replace each record's stochastic objective by a Monte-Carlo estimate."""
    records = []
    estimates = []
    for idx, rec in enumerate(trace.records):
        rng = SeededRng(spec.seed, stream_id=100 + idx)
        mean, std_err = expected_objective_mc(
            DenseMatrix.from_array(rec.u_snapshot),
            DenseMatrix.from_array(rec.v_snapshot),
            ds.x,
            ds.y,
            scheme,
            spec.mc_samples,
            rng,
        )
        estimates.append((mean, std_err))
        records.append(replace(rec, stochastic_obj=mean))
    return TrainingTrace(records, trace.final_u, trace.final_v), estimates


def run_experiment(spec: ExperimentSpec) -> int:
    """Run one experiment end to end; returns the process exit code."""
    if not spec.out:
        print("error: output path must be nonempty", file=sys.stderr)
        return 2
    ds = synthesize_dataset(
        spec.a,
        spec.b,
        spec.d,
        spec.n,
        spec.seed,
        orthogonal_rows=spec.experiment == DROPCONNECT_EQUIVALENCE,
    )
    theta_bar, theta_train = _resolve_thetas(spec)
    minimizer, _ = global_minimizer(ds.y, spec.block_size, theta_bar)
    global_min_ref = minimizer.objective

    if spec.experiment == DROPCONNECT_EQUIVALENCE:
        scheme = DropoutScheme.bernoulli(theta_train)
        mode = FULL_BATCH_DETERMINISTIC
    elif spec.experiment == GLOBAL_MIN_CONVERGENCE:
        scheme = DropoutScheme.dropblock_partitioned(theta_train, spec.r)
        mode = FULL_BATCH_DETERMINISTIC
    else:
        scheme = DropoutScheme.dropblock_partitioned(theta_train, spec.r)
        mode = STOCHASTIC_SGD

    single = mode == STOCHASTIC_SGD
    eta = spec.eta if spec.eta is not None else _auto_eta(ds.x, spec.n, single)
    stride = max(1, spec.iters // 20)
    cfg = TrainingConfig(
        learning_rate=eta,
        iterations=spec.iters,
        seed=spec.seed,
        scheme=scheme,
        mode=mode,
        batch="single_sample" if single else "full_batch",
        log_stride=stride,
    )
    trace = _train_with_halving(ds, cfg, eta_fixed=spec.eta is not None)

    check_failed = False
    check_note = ""
    if spec.experiment == DROPCONNECT_EQUIVALENCE:
        dc_scheme = DropoutScheme.dropconnect(theta_train)
        trace, estimates = _mc_stochastic_records(trace, ds, dc_scheme, spec)
        if spec.check:
            for rec, (mean, std_err) in zip(trace.records, estimates):
                tol = max(0.01 * rec.deterministic_obj, 3.0 * std_err)
                if abs(mean - rec.deterministic_obj) > tol:
                    check_failed = True
                    check_note = (
                        f"DropConnect estimate {mean:g} deviates from deterministic "
                        f"value {rec.deterministic_obj:g} at iter {rec.iteration}"
                    )
                    break
    elif spec.experiment == DET_EQUIVALENCE and spec.check:
        _, estimates = _mc_stochastic_records(trace, ds, scheme, spec)
        for rec, (mean, std_err) in zip(trace.records, estimates):
            tol = max(0.01 * rec.deterministic_obj, 3.0 * std_err)
            if abs(mean - rec.deterministic_obj) > tol:
                check_failed = True
                check_note = (
                    f"Monte-Carlo estimate {mean:g} deviates from deterministic "
                    f"value {rec.deterministic_obj:g} at iter {rec.iteration}"
                )
                break
    elif spec.experiment == DROPBLOCK_CORRECTION:
        window = spec.r if spec.r % 2 == 1 else spec.r + 1
        corrected = DropoutScheme.dropblock_original(
            theta_correction(theta_train, window), window
        )
        cfg2 = replace(cfg, scheme=corrected)
        trace2 = _train_with_halving(ds, cfg2, eta_fixed=spec.eta is not None)
        # compare both runs under the same deterministic objective (the
        # partitioned one); single stochastic iterates are noisy, so
        # average over the trailing quarter of the logged records
        cm_part = characteristic_matrix(scheme, spec.d)
        common = [
            [
                deterministic_objective(r.u_snapshot, r.v_snapshot, ds.x.data, ds.y.data, cm_part)
                for r in t.records
            ]
            for t in (trace, trace2)
        ]
        tail = max(1, len(trace.records) // 4)
        final_part = float(np.mean(common[0][-tail:]))
        final_orig = float(np.mean(common[1][-tail:]))
        rel = abs(final_orig - final_part) / max(final_part, 1e-30)
        check_note = (
            f"corrected_final={final_orig:.6g} partitioned_final={final_part:.6g} "
            f"relative_difference={rel:.3g}"
        )
        if spec.check and rel > 0.05:
            check_failed = True
            check_note = f"corrected/partitioned finals differ by {rel:.3g} (> 0.05)"
        # emit the corrected-scheme trace, measured under the shared objective
        trace = TrainingTrace(
            [
                replace(rec, deterministic_obj=val)
                for rec, val in zip(trace2.records, common[1])
            ],
            trace2.final_u,
            trace2.final_v,
        )

    final = trace.records[-1]
    gap = (final.deterministic_obj - global_min_ref) / max(global_min_ref, 1e-30)
    if spec.experiment == GLOBAL_MIN_CONVERGENCE and spec.check and gap > 0.01:
        check_failed = True
        check_note = f"relative gap {gap:.3g} exceeds 0.01"

    emit_csv(trace, spec.out, global_min_ref)
    print(
        f"experiment={spec.experiment} final_deterministic_obj={final.deterministic_obj:.12g} "
        f"global_min_ref={global_min_ref:.12g} relative_gap={gap:.12g} "
        f"balance_max_ratio={_balance_ratio(final.block_norms):.12g}"
        + (f" note: {check_note}" if check_note else "")
    )
    if check_failed:
        print("check failed: " + check_note, file=sys.stderr)
        return 2
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dropreg-experiment",
        description="Train shallow linear networks under dropout schemes and emit CSV traces.",
    )
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--a", type=int, help="output dimension")
    p.add_argument("--b", type=int, help="input dimension")
    p.add_argument("--d", type=int, help="hidden width")
    p.add_argument("--n", type=int, help="number of data columns")
    p.add_argument("--r", type=int, help="dropout block size")
    p.add_argument("--theta", type=float, help="retain probability")
    p.add_argument("--eta", type=float, help="learning rate (default: auto)")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--mc-samples", type=int, help="Monte-Carlo sample count")
    p.add_argument("--out", help="CSV output path")
    p.add_argument("--check", action="store_true", default=None,
                   help="fail (exit 2) if the experiment's tolerance check fails")
    p.add_argument("--theta-convention", choices=[RAW, WIDTH_SCALED])
    p.add_argument("--config", help="JSON file with the same keys (flags override it)")
    return p


_CONFIG_KEYS = {
    "experiment": "experiment",
    "a": "a",
    "b": "b",
    "d": "d",
    "n": "n",
    "r": "r",
    "theta": "theta",
    "eta": "eta",
    "iters": "iters",
    "seed": "seed",
    "mcsamples": "mc_samples",
    "mc_samples": "mc_samples",
    "out": "out",
    "check": "check",
    "thetaconvention": "theta_convention",
    "theta_convention": "theta_convention",
}


def _spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    values: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a flat JSON object")
        for key, val in raw.items():
            field = _CONFIG_KEYS.get(key.replace("-", ""))
            if field is None:
                raise ValueError(f"unknown config key {key!r}")
            values[field] = val
    for flag, field in (
        ("experiment", "experiment"),
        ("a", "a"),
        ("b", "b"),
        ("d", "d"),
        ("n", "n"),
        ("r", "r"),
        ("theta", "theta"),
        ("eta", "eta"),
        ("iters", "iters"),
        ("seed", "seed"),
        ("mc_samples", "mc_samples"),
        ("out", "out"),
        ("check", "check"),
        ("theta_convention", "theta_convention"),
    ):
        val = getattr(args, flag)
        if val is not None:
            values[field] = val
    if "experiment" not in values:
        raise ValueError("--experiment is required (flag or config file)")
    return ExperimentSpec(**values)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        spec = _spec_from_args(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return run_experiment(spec)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DropRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
