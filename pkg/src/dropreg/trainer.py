"""Stochastic block-dropout SGD, deterministic gradient descent, and
expectation estimators for the stochastic objectives.

The stochastic update follows the sampled-mask recursion exactly: both
factor updates are computed from the pre-step iterates. The full-batch
deterministic mode descends the closed-form equivalent objective
(squared fit plus the characteristic-matrix penalty), which is what the
theory predicts the stochastic recursion minimizes in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dropout_schemes import (
    BERNOULLI,
    DROPBLOCK_ORIGINAL,
    DROPBLOCK_PARTITIONED,
    DROPCONNECT,
    CharacteristicMatrix,
    DropoutScheme,
    MaskSample,
    characteristic_matrix,
    sample_mask_batch,
)
from .errors import (
    DimensionError,
    DivergenceError,
    EnumerationTooLargeError,
)
from .matrix_kernel import DenseMatrix, SeededRng

STOCHASTIC_SGD = "stochastic_sgd"
FULL_BATCH_DETERMINISTIC = "full_batch_deterministic"
SINGLE_SAMPLE = "single_sample"
FULL_BATCH = "full_batch"

_ENUMERATION_CAP = 20
_DIVERGENCE_FACTOR = 1e6


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one training run."""

    learning_rate: float
    iterations: int
    seed: int
    scheme: DropoutScheme
    mode: str = STOCHASTIC_SGD
    batch: str = SINGLE_SAMPLE
    log_stride: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1:
            raise ValueError("iteration count must be >= 1")
        if self.mode not in (STOCHASTIC_SGD, FULL_BATCH_DETERMINISTIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch not in (SINGLE_SAMPLE, FULL_BATCH):
            raise ValueError(f"unknown batch setting {self.batch!r}")
        if self.log_stride < 1:
            raise ValueError("log stride must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    stochastic_obj: float
    deterministic_obj: float
    block_norms: np.ndarray
    u_snapshot: np.ndarray
    v_snapshot: np.ndarray


@dataclass(frozen=True)
class TrainingTrace:
    records: list[TraceRecord]
    final_u: DenseMatrix
    final_v: DenseMatrix


def retain_mean(scheme: DropoutScheme) -> float:
    """Per-coordinate mask mean (the inverse-rescaling constant)."""
    if scheme.variant == DROPBLOCK_ORIGINAL:
        return 1.0 - (1.0 - scheme.theta) ** scheme.window
    return scheme.theta


def sgd_step(
    u: DenseMatrix,
    v: DenseMatrix,
    x_t: DenseMatrix,
    y_t: DenseMatrix,
    mask: MaskSample,
    eta: float,
    theta: float,
) -> tuple[DenseMatrix, DenseMatrix]:
    """One masked SGD step; both updates use the pre-step factors."""
    z = np.asarray(mask.values)
    if z.ndim != 1 or z.shape[0] != u.cols or u.cols != v.cols:
        raise DimensionError("mask length must equal the factor width")
    if x_t.rows != v.rows or y_t.rows != u.rows or x_t.cols != y_t.cols:
        raise DimensionError("data shapes do not conform with the factors")
    u2, v2 = _sgd_step_arrays(u.data, v.data, x_t.data, y_t.data, z, eta, theta)
    return DenseMatrix.from_array(u2), DenseMatrix.from_array(v2)


def _sgd_step_arrays(u, v, x_t, y_t, z, eta, theta):
    masked_vx = z[:, None] * (v.T @ x_t)  # diag(z) V^T X_t
    err = (u @ masked_vx) / theta - y_t
    xv = x_t @ err.T @ u  # used by the V update
    u2 = u - (eta / theta) * (err @ (x_t.T @ v)) * z[None, :]
    v2 = v - (eta / theta) * xv * z[None, :]
    return u2, v2


def deterministic_objective(
    u: np.ndarray, v: np.ndarray, x: np.ndarray, y: np.ndarray, cm: CharacteristicMatrix
) -> float:
    """Fit plus the characteristic-matrix penalty on (U, X^T V)."""
    residual = y - u @ (v.T @ x)
    xv = x.T @ v
    penalty = float(np.sum(cm.cbar.data * (u.T @ u) * (xv.T @ xv)))
    return float(np.sum(residual**2)) + penalty


def _stochastic_objective(u, v, x, y, z, mu):
    pred = (u * (z / mu)[None, :]) @ (v.T @ x)
    return float(np.sum((y - pred) ** 2))


def _block_norms(u, v, x, r):
    k = u.shape[1] // r
    return np.array(
        [
            float(np.linalg.norm(u[:, i * r : (i + 1) * r] @ (v[:, i * r : (i + 1) * r].T @ x)))
            for i in range(k)
        ]
    )


def train(
    x: DenseMatrix,
    y: DenseMatrix,
    init_u: DenseMatrix,
    init_v: DenseMatrix,
    cfg: TrainingConfig,
) -> TrainingTrace:
    """Run the configured training loop; fully deterministic given the seed.

    Single-sample mode cycles over data columns in order. A trace record
    is written at iteration 0, at every log_stride-th iteration, and at
    the final iterate. Raises DivergenceError if the deterministic
    objective exceeds a million times its initial value.
    """
    scheme = cfg.scheme
    if scheme.variant == DROPCONNECT and cfg.mode == STOCHASTIC_SGD:
        raise ValueError("stochastic DropConnect training is not supported; use mode "
                         f"{FULL_BATCH_DETERMINISTIC!r} or a width-mask scheme")
    u = init_u.data.copy()
    v = init_v.data.copy()
    xa, ya = x.data, y.data
    if init_u.rows != ya.shape[0] or init_v.rows != xa.shape[0] or u.shape[1] != v.shape[1]:
        raise DimensionError("initial factors do not conform with the data")
    d = u.shape[1]
    cm = characteristic_matrix(scheme, d)
    mu = retain_mean(scheme)
    r = scheme.block_size if scheme.variant == DROPBLOCK_PARTITIONED else 1
    rng = SeededRng(cfg.seed, stream_id=0)

    initial_obj = deterministic_objective(u, v, xa, ya, cm)
    ceiling = _DIVERGENCE_FACTOR * max(initial_obj, 1e-12)
    records = [
        TraceRecord(0, initial_obj, initial_obj, _block_norms(u, v, xa, r), u.copy(), v.copy())
    ]

    n = xa.shape[1]
    last_mask = np.ones(d)
    # divergence is detected through the logged objective, so suppress the
    # transient overflow warnings emitted by an exploding iterate
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_loop(cfg, u, v, xa, ya, cm, mu, r, n, rng, ceiling, records, last_mask)


def _train_loop(cfg, u, v, xa, ya, cm, mu, r, n, rng, ceiling, records, last_mask):
    scheme = cfg.scheme
    d = u.shape[1]
    for t in range(1, cfg.iterations + 1):
        if cfg.mode == STOCHASTIC_SGD:
            z = sample_mask_batch(scheme, d, rng, 1)[0]
            last_mask = z
            if cfg.batch == SINGLE_SAMPLE:
                col = (t - 1) % n
                xt, yt = xa[:, col : col + 1], ya[:, col : col + 1]
            else:
                xt, yt = xa, ya
            u, v = _sgd_step_arrays(u, v, xt, yt, z, cfg.learning_rate, mu)
        else:
            u, v = _deterministic_step(u, v, xa, ya, cm, cfg.learning_rate)
        if t % cfg.log_stride == 0 or t == cfg.iterations:
            det = deterministic_objective(u, v, xa, ya, cm)
            if not np.isfinite(det) or det > ceiling:
                raise DivergenceError(
                    f"objective diverged at iteration {t} with learning rate {cfg.learning_rate}",
                    cfg.learning_rate,
                )
            if cfg.mode == STOCHASTIC_SGD:
                stoch = _stochastic_objective(u, v, xa, ya, last_mask, mu)
            else:
                stoch = det
            records.append(
                TraceRecord(t, stoch, det, _block_norms(u, v, xa, r), u.copy(), v.copy())
            )
    return TrainingTrace(records, DenseMatrix.from_array(u), DenseMatrix.from_array(v))


def _deterministic_step(u, v, x, y, cm: CharacteristicMatrix, eta: float):
    err = y - u @ (v.T @ x)
    xv = x.T @ v
    cbar = cm.cbar.data
    u2 = u + eta * (err @ xv - u @ (cbar * (xv.T @ xv)))
    v2 = v + eta * (x @ (err.T @ u) - (x @ (xv @ (cbar * (u.T @ u)))))
    return u2, v2


def _prediction_basis(u, v, x, scheme: DropoutScheme, mu: float):
    """Rows of the linear map from a flattened mask to the flattened prediction."""
    if scheme.variant == DROPCONNECT:
        b, d = v.shape
        basis = np.empty((b * d, u.shape[0] * x.shape[1]))
        for i in range(b):
            for j in range(d):
                basis[i * d + j] = np.outer(u[:, j], v[i, j] * x[i, :]).ravel() / scheme.theta
        return basis
    vx = v.T @ x  # d x N
    d = u.shape[1]
    return np.stack([np.outer(u[:, i], vx[i]).ravel() / mu for i in range(d)])


def _masks_from_variables(vars_01: np.ndarray, scheme: DropoutScheme, d: int) -> np.ndarray:
    """Expand independent Bernoulli variables into neuron masks."""
    if scheme.variant == BERNOULLI:
        return vars_01
    if scheme.variant == DROPBLOCK_PARTITIONED:
        return np.repeat(vars_01, scheme.block_size, axis=1)
    if scheme.variant == DROPBLOCK_ORIGINAL:
        half = (scheme.window - 1) // 2
        rolled = [np.roll(vars_01, -off, axis=1) for off in range(-half, half + 1)]
        return np.stack(rolled).max(axis=0)
    raise ValueError(scheme.variant)


def _num_variables(scheme: DropoutScheme, d: int, b: int) -> int:
    if scheme.variant == DROPBLOCK_PARTITIONED:
        if d % scheme.block_size != 0:
            raise DimensionError(f"block size {scheme.block_size} does not divide width {d}")
        return d // scheme.block_size
    if scheme.variant == DROPCONNECT:
        return b * d
    return d


def expected_objective_exact(
    u: DenseMatrix, v: DenseMatrix, x: DenseMatrix, y: DenseMatrix, scheme: DropoutScheme
) -> float:
    """Probability-weighted enumeration of the stochastic objective over all masks."""
    n_vars = _num_variables(scheme, u.cols, v.rows)
    if n_vars > _ENUMERATION_CAP:
        raise EnumerationTooLargeError(
            f"{n_vars} independent mask variables exceed the cap of {_ENUMERATION_CAP}"
        )
    count = 1 << n_vars
    vars_01 = ((np.arange(count)[:, None] >> np.arange(n_vars)[None, :]) & 1).astype(np.float64)
    theta = scheme.theta
    ones = vars_01.sum(axis=1)
    weights = theta**ones * (1.0 - theta) ** (n_vars - ones)
    mu = retain_mean(scheme)
    basis = _prediction_basis(u.data, v.data, x.data, scheme, mu)
    if scheme.variant == DROPCONNECT:
        masks = vars_01
    else:
        masks = _masks_from_variables(vars_01, scheme, u.cols)
    preds = masks @ basis
    residuals = y.data.ravel()[None, :] - preds
    objectives = np.sum(residuals**2, axis=1)
    return float(weights @ objectives)


def expected_objective_mc(
    u: DenseMatrix,
    v: DenseMatrix,
    x: DenseMatrix,
    y: DenseMatrix,
    scheme: DropoutScheme,
    n_samples: int,
    rng: SeededRng,
    chunk: int = 20000,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the stochastic objective."""
    if n_samples < 2:
        raise ValueError("need at least two samples for a standard error")
    mu = retain_mean(scheme)
    basis = _prediction_basis(u.data, v.data, x.data, scheme, mu)
    y_flat = y.data.ravel()
    total = 0.0
    total_sq = 0.0
    shift = None  # offset accumulation to avoid catastrophic cancellation
    remaining = n_samples
    while remaining > 0:
        take = min(chunk, remaining)
        masks = sample_mask_batch(scheme, u.cols, rng, take, input_dim=v.rows)
        flat = masks.reshape(take, -1)
        residuals = y_flat[None, :] - flat @ basis
        objectives = np.sum(residuals**2, axis=1)
        if shift is None:
            shift = float(objectives[0])
        centered = objectives - shift
        total += float(centered.sum())
        total_sq += float((centered**2).sum())
        remaining -= take
    mean_c = total / n_samples
    variance = max(total_sq / n_samples - mean_c**2, 0.0) * n_samples / (n_samples - 1)
    return shift + mean_c, float(np.sqrt(variance / n_samples))
