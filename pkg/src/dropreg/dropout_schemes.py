"""Mask distributions, their characteristic matrices, and the induced regularizers.

A dropout scheme is a distribution over binary masks. Its mean vector mu
and mean-normalized covariance cbar fully determine the deterministic
regularizer added to the squared loss, so every closed form here is
expressed through (mu, cbar).

Original (unpartitioned) DropBlock uses a 1-D circular geometry: each
neuron is covered by exactly ``window`` center positions. A center draws
an independent retain signal with probability theta, and a neuron
survives iff at least one covering center signals retain, so the
per-neuron drop rate is (1 - theta) ** window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import (
    BlockPartitionError,
    DegenerateSchemeError,
    DimensionError,
)
from .matrix_kernel import DenseMatrix, SeededRng

if TYPE_CHECKING:  # pragma: no cover
    from .spectral_regularizer import FactorPair

BERNOULLI = "bernoulli"
DROPBLOCK_PARTITIONED = "dropblock_partitioned"
DROPBLOCK_ORIGINAL = "dropblock_original"
DROPCONNECT = "dropconnect"


@dataclass(frozen=True)
class DropoutScheme:
    """Tagged description of a mask distribution."""

    variant: str
    theta: float
    block_size: int = 1
    window: int = 1

    def __post_init__(self):
        if self.variant not in (BERNOULLI, DROPBLOCK_PARTITIONED, DROPBLOCK_ORIGINAL, DROPCONNECT):
            raise ValueError(f"unknown scheme variant {self.variant!r}")
        if not 0.0 < self.theta <= 1.0:
            raise DegenerateSchemeError(f"retain probability must be in (0, 1], got {self.theta}")
        if self.variant == DROPBLOCK_PARTITIONED and self.block_size < 1:
            raise ValueError("block size must be >= 1")
        if self.variant == DROPBLOCK_ORIGINAL:
            if self.window < 1 or self.window % 2 == 0:
                raise ValueError(f"window must be a positive odd count, got {self.window}")

    @classmethod
    def bernoulli(cls, theta: float) -> "DropoutScheme":
        return cls(BERNOULLI, theta)

    @classmethod
    def dropblock_partitioned(cls, theta: float, block_size: int) -> "DropoutScheme":
        return cls(DROPBLOCK_PARTITIONED, theta, block_size=block_size)

    @classmethod
    def dropblock_original(cls, theta: float, window: int) -> "DropoutScheme":
        return cls(DROPBLOCK_ORIGINAL, theta, window=window)

    @classmethod
    def dropconnect(cls, theta: float) -> "DropoutScheme":
        return cls(DROPCONNECT, theta)


@dataclass(frozen=True)
class MaskSample:
    """One mask draw: a 0/1 vector of length d, or a 0/1 b x d matrix for DropConnect."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class CharacteristicMatrix:
    """Mean vector mu and mean-normalized covariance cbar of the mask."""

    mean: np.ndarray
    cbar: DenseMatrix

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64)
        if np.any(mu == 0.0):
            raise DegenerateSchemeError("mask mean must be nonzero in every coordinate")
        if mu.shape[0] != self.cbar.rows or self.cbar.rows != self.cbar.cols:
            raise DimensionError("mean length must match cbar dimension")
        if np.max(np.abs(self.cbar.data - self.cbar.data.T)) > 1e-12:
            raise ValueError("cbar must be symmetric")
        cov = mu[:, None] * self.cbar.data * mu[None, :]
        scale = max(1.0, float(np.max(np.abs(cov))))
        if float(np.linalg.eigvalsh(cov).min()) < -1e-9 * scale:
            raise ValueError("implied covariance must be positive semidefinite")
        mu.flags.writeable = False
        object.__setattr__(self, "mean", mu)

    @property
    def dim(self) -> int:
        return self.cbar.rows

    def covariance(self) -> np.ndarray:
        """The raw covariance C = diag(mu) cbar diag(mu)."""
        return self.mean[:, None] * self.cbar.data * self.mean[None, :]


def _check_partition(scheme: DropoutScheme, d: int) -> int:
    r = scheme.block_size
    if d % r != 0:
        raise BlockPartitionError(f"block size {r} does not divide width {d}")
    return r


def _window_offsets(window: int) -> np.ndarray:
    half = (window - 1) // 2
    return np.arange(-half, half + 1)


def _mask_from_retain_signals(signals: np.ndarray, window: int) -> np.ndarray:
    """Neuron masks from per-center retain signals (circular window max)."""
    stacked = np.stack([np.roll(signals, -off, axis=-1) for off in _window_offsets(window)])
    return stacked.max(axis=0)


def sample_mask(scheme: DropoutScheme, d: int, rng: SeededRng, input_dim: int | None = None) -> MaskSample:
    """Draw one mask of width d (DropConnect additionally needs input_dim rows)."""
    batch = sample_mask_batch(scheme, d, rng, 1, input_dim=input_dim)
    return MaskSample(batch[0])


def sample_mask_batch(
    scheme: DropoutScheme, d: int, rng: SeededRng, n: int, input_dim: int | None = None
) -> np.ndarray:
    """Draw n masks at once; returns (n, d) or (n, input_dim, d) for DropConnect."""
    theta = scheme.theta
    if scheme.variant == BERNOULLI:
        return (rng.uniforms(n * d).reshape(n, d) < theta).astype(np.float64)
    if scheme.variant == DROPBLOCK_PARTITIONED:
        r = _check_partition(scheme, d)
        k = d // r
        w = (rng.uniforms(n * k).reshape(n, k) < theta).astype(np.float64)
        return np.repeat(w, r, axis=1)
    if scheme.variant == DROPBLOCK_ORIGINAL:
        if scheme.window > d:
            raise DimensionError(f"window {scheme.window} exceeds width {d}")
        signals = (rng.uniforms(n * d).reshape(n, d) < theta).astype(np.float64)
        return _mask_from_retain_signals(signals, scheme.window)
    if scheme.variant == DROPCONNECT:
        if input_dim is None:
            raise DimensionError("DropConnect masks need the input dimension")
        u = rng.uniforms(n * input_dim * d).reshape(n, input_dim, d)
        return (u < theta).astype(np.float64)
    raise ValueError(scheme.variant)


def _original_window_sets(d: int, window: int) -> list[set[int]]:
    half = (window - 1) // 2
    return [{(i + off) % d for off in range(-half, half + 1)} for i in range(d)]


def characteristic_matrix(scheme: DropoutScheme, d: int) -> CharacteristicMatrix:
    """Exact closed-form (mu, cbar) for a scheme at width d."""
    theta = scheme.theta
    beta = (1.0 - theta) / theta
    if scheme.variant in (BERNOULLI, DROPCONNECT):
        # DropConnect induces the same regularizer as i.i.d. Bernoulli dropout
        return CharacteristicMatrix(np.full(d, theta), DenseMatrix.from_array(beta * np.eye(d)))
    if scheme.variant == DROPBLOCK_PARTITIONED:
        r = _check_partition(scheme, d)
        block = np.ones((r, r))
        cbar = beta * np.kron(np.eye(d // r), block)
        return CharacteristicMatrix(np.full(d, theta), DenseMatrix.from_array(cbar))
    if scheme.variant == DROPBLOCK_ORIGINAL:
        if scheme.window > d:
            raise DimensionError(f"window {scheme.window} exceeds width {d}")
        q = 1.0 - theta  # probability a single center does not signal retain
        w = scheme.window
        windows = _original_window_sets(d, w)
        drop = q**w
        mu = np.full(d, 1.0 - drop)
        # E[z_i z_j] = 1 - 2 q^w + q^{|W_i u W_j|}; covariance = q^{|union|} - q^{2w}
        cov = np.empty((d, d))
        for i in range(d):
            for j in range(i, d):
                union = len(windows[i] | windows[j])
                cov[i, j] = cov[j, i] = q**union - q ** (2 * w)
        cbar = cov / np.outer(mu, mu)
        return CharacteristicMatrix(mu, DenseMatrix.from_array(cbar))
    raise ValueError(scheme.variant)


def regularizer_generalized(cm: CharacteristicMatrix, u: DenseMatrix, v: DenseMatrix) -> float:
    """<cbar, U^T U (.) V^T V>, the deterministic penalty of a general mask distribution."""
    if u.cols != cm.dim or v.cols != cm.dim:
        raise DimensionError(
            f"factor widths ({u.cols}, {v.cols}) must equal characteristic dimension {cm.dim}"
        )
    gram_u = u.data.T @ u.data
    gram_v = v.data.T @ v.data
    return float(np.sum(cm.cbar.data * gram_u * gram_v))


def regularizer_dropblock(fp: "FactorPair", x: DenseMatrix, theta: float) -> float:
    """Partitioned DropBlock penalty: ((1-theta)/theta) * sum_i ||U_i V_i^T X||_F^2."""
    if not 0.0 < theta <= 1.0:
        raise DegenerateSchemeError(f"retain probability must be in (0, 1], got {theta}")
    if fp.v.rows != x.rows:
        raise DimensionError("factor V and data X row counts differ")
    total = 0.0
    for ui, vi in fp.blocks():
        total += float(np.sum((ui @ (vi.T @ x.data)) ** 2))
    return (1.0 - theta) / theta * total


def regularizer_dropconnect(u: DenseMatrix, v: DenseMatrix, m: DenseMatrix, theta: float) -> float:
    """DropConnect penalty; identical to the Bernoulli (r = 1) penalty on (U, V, M)."""
    if not 0.0 < theta <= 1.0:
        raise DegenerateSchemeError(f"retain probability must be in (0, 1], got {theta}")
    if u.cols != v.cols:
        raise DimensionError("U and V must have equal widths")
    if v.rows != m.rows:
        raise DimensionError("V and M row counts differ")
    u_norms = np.sum(u.data**2, axis=0)
    mv_norms = np.sum((m.data.T @ v.data) ** 2, axis=0)
    return (1.0 - theta) / theta * float(u_norms @ mv_norms)


def theta_correction(theta_partitioned: float, window: int) -> float:
    """Center-retain parameter matching a partitioned drop rate of 1 - theta.

    With drop rate (1 - theta') ** window under the original scheme,
    theta' = 1 - (1 - theta) ** (1 / window) equates per-neuron rates.
    """
    if not 0.0 < theta_partitioned <= 1.0:
        raise DegenerateSchemeError(f"retain probability must be in (0, 1], got {theta_partitioned}")
    if window < 1:
        raise ValueError("window must be >= 1")
    return 1.0 - (1.0 - theta_partitioned) ** (1.0 / window)
