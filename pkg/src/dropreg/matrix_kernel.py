"""Dense matrix values, one-sided Jacobi SVD, and reproducible random streams.

Everything here is value-semantic: matrices are immutable after
construction and all operations are pure functions, except SeededRng
which is single-owner mutable state (use one stream per worker).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError

_JACOBI_TOL = 1e-12
_JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class DenseMatrix:
    """Immutable row-major real matrix with finite float64 entries."""

    rows: int
    cols: int
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DimensionError(f"matrix dimensions must be positive, got {self.rows}x{self.cols}")
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.shape != (self.rows, self.cols):
            raise DimensionError(f"data shape {arr.shape} does not match {self.rows}x{self.cols}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("matrix entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "DenseMatrix":
        arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
        return cls(arr.shape[0], arr.shape[1], arr)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(rows, cols, np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "DenseMatrix":
        return cls(n, n, np.eye(n))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def transpose(self) -> "DenseMatrix":
        return DenseMatrix.from_array(self.data.T)

    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __eq__(self, other):
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD: left (m x p), descending singular values (p), right (n x p)."""

    left: DenseMatrix
    singular_values: np.ndarray
    right: DenseMatrix

    def __post_init__(self):
        s = np.asarray(self.singular_values, dtype=np.float64)
        s.flags.writeable = False
        object.__setattr__(self, "singular_values", s)

    def reconstruct(self) -> DenseMatrix:
        return DenseMatrix.from_array(
            self.left.data @ np.diag(self.singular_values) @ self.right.data.T
        )


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Matrix product a @ b."""
    if a.cols != b.rows:
        raise DimensionError(f"cannot multiply {a.rows}x{a.cols} by {b.rows}x{b.cols}")
    return DenseMatrix.from_array(a.data @ b.data)


def _orthonormal_complete(columns: np.ndarray, fill: list[int]) -> None:
    """Fill the listed columns with unit vectors orthogonal to all others (in place)."""
    m = columns.shape[0]
    for j in fill:
        for basis in range(m):
            cand = np.zeros(m)
            cand[basis] = 1.0
            # project out every already-valid column
            for k in range(columns.shape[1]):
                if k == j:
                    continue
                cand -= (columns[:, k] @ cand) * columns[:, k]
            norm = np.linalg.norm(cand)
            if norm > 0.5:
                columns[:, j] = cand / norm
                break
        else:
            raise ConvergenceError("could not complete orthonormal basis", 0.0)


def _one_sided_jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a (m x n, m >= n): returns (left m x n, s, right n x n)."""
    u = a.copy()
    n = u.shape[1]
    v = np.eye(n)
    off_mass = 0.0
    for _ in range(_JACOBI_MAX_SWEEPS):
        gram = u.T @ u
        diag = np.diag(gram).copy()
        off = gram - np.diag(diag)
        total = np.linalg.norm(gram)
        off_mass = np.linalg.norm(off)
        if total == 0.0 or off_mass <= _JACOBI_TOL * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                gamma = u[:, p] @ u[:, q]
                if gamma == 0.0:
                    continue
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {_JACOBI_MAX_SWEEPS} sweeps", off_mass
        )
    norms = np.linalg.norm(u, axis=0)
    order = np.argsort(-norms, kind="stable")
    u = u[:, order]
    v = v[:, order]
    s = norms[order]
    cutoff = 1e-13 * max(1.0, s[0] if n else 0.0)
    left = np.empty_like(u)
    dead = []
    for j in range(n):
        if s[j] > cutoff:
            left[:, j] = u[:, j] / s[j]
        else:
            s[j] = 0.0
            left[:, j] = 0.0
            dead.append(j)
    if dead:
        _orthonormal_complete(left, dead)
    return left, s, v


def svd(a: DenseMatrix) -> SvdResult:
    """Thin singular value decomposition via one-sided Jacobi with cyclic sweeps.

    Deterministic for a given input; singular values sorted descending
    with ties kept in sweep order.
    """
    if a.rows >= a.cols:
        left, s, right = _one_sided_jacobi(a.data)
    else:
        right, s, left = _one_sided_jacobi(a.data.T.copy())
    return SvdResult(DenseMatrix.from_array(left), s, DenseMatrix.from_array(right))


_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(state: int):
    """Generator of splitmix64 outputs starting from the given state."""
    while True:
        state = (state + _SPLITMIX_GAMMA) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        yield z ^ (z >> 31)


class SeededRng:
    """xoshiro256** stream seeded via splitmix64 expansion of (seed, stream_id).

    Identical (seed, stream_id) pairs produce identical sequences on
    every platform. Never share one instance between parallel workers;
    give each worker its own stream_id instead.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = seed & _MASK64
        self.stream_id = stream_id & _MASK64
        expand = _splitmix64((self.seed ^ (self.stream_id * _SPLITMIX_GAMMA)) & _MASK64)
        self._s = [next(expand) for _ in range(4)]
        if not any(self._s):
            self._s[0] = 1

    def next_uint64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (((s1 * 5) & _MASK64) << 7 | ((s1 * 5) & _MASK64) >> 57) & _MASK64
        result = (result * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 bits of precision."""
        return (self.next_uint64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int) -> np.ndarray:
        """Block of n uniforms from the stream (same values as n random() calls)."""
        s0, s1, s2, s3 = self._s
        scale = 1.0 / (1 << 53)
        out = [0.0] * n
        for i in range(n):
            r5 = (s1 * 5) & _MASK64
            result = (((r5 << 7) | (r5 >> 57)) & _MASK64) * 9 & _MASK64
            t = (s1 << 17) & _MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
            out[i] = (result >> 11) * scale
        self._s = [s0, s1, s2, s3]
        return np.asarray(out)

    def normals(self, n: int) -> np.ndarray:
        """Block of n standard normals via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1 = 1.0 - u[:pairs]  # in (0, 1], keeps log finite
        u2 = u[pairs:]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
        return z[:n]


def gaussian_matrix(rng: SeededRng, rows: int, cols: int) -> DenseMatrix:
    """Matrix with i.i.d. standard normal entries drawn from the stream."""
    if rows < 1 or cols < 1:
        raise DimensionError("gaussian_matrix needs positive dimensions")
    return DenseMatrix(rows, cols, rng.normals(rows * cols).reshape(rows, cols))
