"""QAM/PAM point sets and probability mass functions over them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def pam_levels(n: int) -> np.ndarray:
    """Equispaced PAM amplitudes ``-(n-1), ..., -1, 1, ..., n-1``."""
    if n < 2 or n % 2:
        raise ValueError(f"PAM order must be even and >= 2, got {n}")
    return np.arange(-(n - 1), n, 2, dtype=float)


def qam_points(order: int) -> np.ndarray:
    """Square QAM grid, index ``i * n + q`` for I-level ``i`` and Q-level ``q``."""
    n = int(round(np.sqrt(order)))
    if n * n != order:
        raise ValueError(f"QAM order must be a perfect square, got {order}")
    lv = pam_levels(n)
    return (lv[:, None] + 1j * lv[None, :]).ravel()


def entropy_bits(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


@dataclass
class ConstellationPmf:
    """Point set with probabilities and the power-normalisation scale ``alpha``.

    The transmitted alphabet is ``alpha * points``.  ``power`` is an optional
    attached power target in the same (normalised) units; when present the
    scaled second moment must match it.
    """

    points: np.ndarray
    probabilities: np.ndarray
    alpha: float = 1.0
    power: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex).ravel()
        self.probabilities = np.asarray(self.probabilities, dtype=float).ravel()
        if self.points.shape != self.probabilities.shape:
            raise ValueError("points and probabilities differ in length")
        if np.any(self.probabilities < 0):
            raise ValueError("negative probability")
        if abs(self.probabilities.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {self.probabilities.sum()!r}")
        if len(np.unique(self.points)) != len(self.points):
            raise ValueError("constellation points are not distinct")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.power is not None:
            got = self.scaled_power()
            if abs(got - self.power) > 1e-9 * self.power:
                raise ValueError(f"scaled power {got} != target {self.power}")

    def __len__(self):
        return len(self.points)

    @property
    def scaled_points(self) -> np.ndarray:
        return self.alpha * self.points

    def energy(self) -> float:
        """Unscaled second moment ``E|X|^2``."""
        return float(np.dot(self.probabilities, np.abs(self.points) ** 2))

    def scaled_power(self) -> float:
        return self.alpha**2 * self.energy()

    def entropy(self) -> float:
        return entropy_bits(self.probabilities)

    def with_power(self, power: float = 1.0) -> "ConstellationPmf":
        """Copy with ``alpha`` chosen so the scaled power equals ``power``."""
        alpha = np.sqrt(power / self.energy())
        return ConstellationPmf(self.points, self.probabilities, alpha, power, dict(self.meta))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` point indices i.i.d. from the PMF."""
        cdf = np.cumsum(self.probabilities)
        cdf[-1] = 1.0
        return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int64)


def uniform_qam(order: int, power: float = 1.0) -> ConstellationPmf:
    pts = qam_points(order)
    return ConstellationPmf(pts, np.full(order, 1.0 / order)).with_power(power)


def mb_pmf(points: np.ndarray, lam: float, power: float = 1.0) -> ConstellationPmf:
    """Maxwell-Boltzmann PMF ``p ∝ exp(-lam |x|^2)`` on the unscaled grid."""
    e = np.abs(points) ** 2
    logp = -lam * (e - e.min())
    p = np.exp(logp - logp.max())
    p /= p.sum()
    return ConstellationPmf(points, p, meta={"algorithm": "mb", "lambda": lam}).with_power(power)
