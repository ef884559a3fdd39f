"""Spectral penalty induced by block dropout and its closed-form minimizer.

The width-scaled block penalty, minimized over all factorizations of a
fixed product, equals a squared spectral k-support norm of the product's
singular values. This module evaluates that norm, its scaled Fenchel
conjugate, and the closed-form SVD-shrinkage solution of the resulting
convex problem, together with the constructive operations (factor
duplication, proportional rebalancing) used to reason about balanced
factorizations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dropout_schemes import regularizer_dropblock
from .errors import (
    BlockPartitionError,
    DegenerateFactorError,
    DegenerateSchemeError,
    DimensionError,
    InvalidSpectrumError,
)
from .matrix_kernel import DenseMatrix, svd


@dataclass(frozen=True)
class FactorPair:
    """A factorization (U, V) with a fixed partition into blocks of columns."""

    u: DenseMatrix
    v: DenseMatrix
    block_size: int

    def __post_init__(self):
        if self.u.cols != self.v.cols:
            raise DimensionError("U and V must have equal widths")
        if self.block_size < 1 or self.u.cols % self.block_size != 0:
            raise BlockPartitionError(
                f"block size {self.block_size} does not divide width {self.u.cols}"
            )

    @property
    def width(self) -> int:
        return self.u.cols

    @property
    def num_blocks(self) -> int:
        return self.width // self.block_size

    def blocks(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        r = self.block_size
        for i in range(self.num_blocks):
            yield self.u.data[:, i * r : (i + 1) * r], self.v.data[:, i * r : (i + 1) * r]

    def product(self, x: DenseMatrix) -> np.ndarray:
        """U V^T X."""
        if self.v.rows != x.rows:
            raise DimensionError("factor V and data X row counts differ")
        return self.u.data @ (self.v.data.T @ x.data)


@dataclass(frozen=True)
class BalanceReport:
    """Per-block product norms and the balance verdict at tolerance tau."""

    block_norms: np.ndarray
    max_ratio: float
    is_balanced: bool
    tolerance: float


@dataclass(frozen=True)
class SpectralMinimizer:
    """Closed-form solution record for the shrinkage problem."""

    rho: int
    lam: int
    shrunk_values: np.ndarray
    objective: float
    beta: float
    s_sum: float
    c_const: float


def _check_spectrum(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise InvalidSpectrumError("spectrum must be a nonempty 1-d vector")
    if np.any(a < 0.0):
        raise InvalidSpectrumError("spectrum entries must be nonnegative")
    if np.any(np.diff(a) > 1e-12 * max(1.0, float(a[0]))):
        raise InvalidSpectrumError("spectrum must be sorted descending")
    return a


def k_support_sq(singular_values, r: int, beta: float) -> tuple[float, int]:
    """Squared spectral k-support penalty beta * max_rho [head + tail^2/(r-rho+1)].

    Returns (value, rho_star) where rho_star is the smallest maximizer in
    {1, ..., r}. At r = 1 this is beta times the squared nuclear norm; at
    r >= len(a) with a uniform spectrum it is beta times the squared
    Frobenius norm.
    """
    a = _check_spectrum(singular_values)
    if r < 1:
        raise ValueError("r must be >= 1")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    best_value = -math.inf
    best_rho = 1
    head = 0.0
    for rho in range(1, r + 1):
        tail = float(np.sum(a[rho - 1 :]))
        # a branch is admissible only if its stationary point keeps the
        # spectrum descending: tail/(r - rho + 1) must not exceed a_{rho-1}
        if rho > 1:
            prev = float(a[rho - 2]) if rho - 2 < a.size else 0.0
            if tail / (r - rho + 1) > prev + 1e-12 * max(1.0, prev):
                if rho - 1 < a.size:
                    head += float(a[rho - 1]) ** 2
                continue
        value = head + tail * tail / (r - rho + 1)
        if value > best_value:
            best_value = value
            best_rho = rho
        if rho - 1 < a.size:
            head += float(a[rho - 1]) ** 2
    return beta * best_value, best_rho


def fenchel_conjugate(q_singular_values, r: int) -> float:
    """Scaled conjugate of the width-scaled block penalty: (1/4) sum of top-r squares."""
    q = _check_spectrum(q_singular_values)
    if r < 1:
        raise ValueError("r must be >= 1")
    top = q[: min(r, q.size)]
    return 0.25 * float(top @ top)


def theta_for_width(theta_bar: float, r: int, d: int) -> float:
    """Retain probability at width d that keeps the width-scaled penalty fixed."""
    if not 0.0 < theta_bar <= 1.0:
        raise DegenerateSchemeError(f"retain probability must be in (0, 1], got {theta_bar}")
    return theta_bar * r / (theta_bar * r + (1.0 - theta_bar) * d)


def _shrunk_candidate(m: np.ndarray, rho: int, lam: int, r: int, beta: float):
    """Candidate shrunk spectrum for one (rho, lam) pair, or None if infeasible."""
    p = m.size
    a = np.zeros(p)
    s_sum = 0.0
    c_const = r + beta * lam + (beta + 1.0) * (1.0 - rho)
    if lam <= rho - 1:
        a[:lam] = m[:lam] / (beta + 1.0)
    else:
        a[: rho - 1] = m[: rho - 1] / (beta + 1.0)
        s_sum = float(np.sum(m[rho - 1 : lam]))
        a[rho - 1 : lam] = np.maximum(m[rho - 1 : lam] - beta / c_const * s_sum, 0.0)
    # retained entries must stay positive (unless the input value was already zero)
    retained = a[:lam]
    if np.any((retained <= 0.0) & (m[:lam] > 0.0)):
        return None
    if np.any(np.diff(a) > 1e-12 * max(1.0, float(m[0]) if p else 1.0)):
        return None
    return a, s_sum, c_const


def global_minimizer(y: DenseMatrix, r: int, theta_bar: float) -> tuple[SpectralMinimizer, DenseMatrix]:
    """Closed-form global minimizer of ||Y - A||_F^2 + the spectral envelope penalty.

    Scans all (rho, lam) shrinkage candidates built from the SVD of Y,
    discards infeasible spectra, and returns the feasible candidate with
    the smallest objective (ties broken by smaller lam, then smaller rho)
    along with the minimizing matrix.
    """
    if not 0.0 < theta_bar < 1.0:
        raise DegenerateSchemeError(f"theta_bar must be in (0, 1), got {theta_bar}")
    if r < 1:
        raise ValueError("r must be >= 1")
    beta = (1.0 - theta_bar) / theta_bar
    decomp = svd(y)
    m = np.asarray(decomp.singular_values)
    best = None
    for lam in range(1, m.size + 1):
        for rho in range(1, r + 1):
            cand = _shrunk_candidate(m, rho, lam, r, beta)
            if cand is None:
                continue
            a, s_sum, c_const = cand
            penalty, _ = k_support_sq(a, r, beta)
            objective = float(np.sum((m - a) ** 2)) + penalty
            if best is None or objective < best[0] - 1e-15 * max(1.0, best[0]):
                best = (objective, rho, lam, a, s_sum, c_const)
    if best is None:  # unreachable: lam = 1, rho = 1 is always feasible
        raise RuntimeError("no feasible shrinkage candidate")
    objective, rho, lam, a, s_sum, c_const = best
    minimizer = SpectralMinimizer(
        rho=rho,
        lam=lam,
        shrunk_values=a,
        objective=objective,
        beta=beta,
        s_sum=s_sum,
        c_const=c_const,
    )
    a_star = decomp.left.data @ (a[:, None] * decomp.right.data.T)
    return minimizer, DenseMatrix.from_array(a_star)


def block_norms(fp: FactorPair, x: DenseMatrix) -> np.ndarray:
    """Frobenius norm of U_i V_i^T X for each block."""
    if fp.v.rows != x.rows:
        raise DimensionError("factor V and data X row counts differ")
    return np.array([float(np.linalg.norm(ui @ (vi.T @ x.data))) for ui, vi in fp.blocks()])


def balance_report(fp: FactorPair, x: DenseMatrix, tau: float = 1e-2) -> BalanceReport:
    """Check whether all block product norms agree to within tolerance tau."""
    alpha = block_norms(fp, x)
    low = float(alpha.min())
    high = float(alpha.max())
    if high == 0.0:
        return BalanceReport(alpha, 1.0, True, tau)
    ratio = math.inf if low == 0.0 else high / low
    return BalanceReport(alpha, ratio, ratio <= 1.0 + tau, tau)


def duplicate_halving(fp: FactorPair) -> FactorPair:
    """Double the width by duplicating (U, V) / sqrt(2).

    Preserves U V^T exactly while halving the block penalty.
    """
    scale = 1.0 / math.sqrt(2.0)
    u2 = np.concatenate([fp.u.data, fp.u.data], axis=1) * scale
    v2 = np.concatenate([fp.v.data, fp.v.data], axis=1) * scale
    return FactorPair(DenseMatrix.from_array(u2), DenseMatrix.from_array(v2), fp.block_size)


def width_scaled_penalty(fp: FactorPair, x: DenseMatrix) -> float:
    """(d / r) * sum_i ||U_i V_i^T X||_F^2, the width-scaled block penalty (no beta)."""
    alpha = block_norms(fp, x)
    return fp.num_blocks * float(alpha @ alpha)


def rebalance(fp: FactorPair, x: DenseMatrix, block_budget: int) -> FactorPair:
    """Replicate normalized blocks in proportion to their product norms.

    block_budget is the replication budget counted in blocks; the result
    has at most block_budget + k blocks. The product U V^T X is preserved
    exactly and, for unbalanced inputs with a large enough budget, the
    width-scaled penalty strictly decreases.
    """
    k = fp.num_blocks
    if block_budget < k:
        raise ValueError(f"block budget {block_budget} must be at least the block count {k}")
    alpha = block_norms(fp, x)
    total = float(np.sum(alpha))
    if total == 0.0:
        raise DegenerateFactorError("cannot rebalance an identically zero factor pair")
    u_parts: list[np.ndarray] = []
    v_parts: list[np.ndarray] = []
    base = math.sqrt(total / block_budget)
    for (ui, vi), a_i in zip(fp.blocks(), alpha):
        if a_i == 0.0:
            continue
        nu = ui / math.sqrt(a_i)
        nv = vi / math.sqrt(a_i)
        exact = a_i / total * block_budget
        copies = int(math.floor(exact))
        gamma = exact - copies
        for _ in range(copies):
            u_parts.append(base * nu)
            v_parts.append(base * nv)
        if gamma > 0.0:
            u_parts.append(base * math.sqrt(gamma) * nu)
            v_parts.append(base * math.sqrt(gamma) * nv)
    u_new = np.concatenate(u_parts, axis=1)
    v_new = np.concatenate(v_parts, axis=1)
    return FactorPair(DenseMatrix.from_array(u_new), DenseMatrix.from_array(v_new), fp.block_size)


def rebalance_until_stable(fp: FactorPair, x: DenseMatrix, rel_tol: float = 1e-6) -> FactorPair:
    """Double the replication budget until the width-scaled penalty stops improving."""
    current = fp
    value = width_scaled_penalty(current, x)
    budget = 2 * fp.num_blocks
    while True:
        candidate = rebalance(fp, x, budget)
        cand_value = width_scaled_penalty(candidate, x)
        if cand_value < value * (1.0 - rel_tol):
            current, value = candidate, cand_value
            budget *= 2
            continue
        if cand_value < value:
            current = candidate
        return current


def objective_f(fp: FactorPair, x: DenseMatrix, y: DenseMatrix, theta_bar: float) -> float:
    """Width-scaled deterministic objective: fit + (d/r) beta sum_i ||U_i V_i^T X||_F^2."""
    if not 0.0 < theta_bar < 1.0:
        raise DegenerateSchemeError(f"theta_bar must be in (0, 1), got {theta_bar}")
    if y.rows != fp.u.rows or y.cols != x.cols:
        raise DimensionError("target Y shape does not match U rows by X cols")
    residual = y.data - fp.product(x)
    theta_d = theta_for_width(theta_bar, fp.block_size, fp.width)
    return float(np.sum(residual**2)) + regularizer_dropblock(fp, x, theta_d)
