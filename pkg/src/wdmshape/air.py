"""Memoryless 2D-Gaussian auxiliary channel and the AIR lower bound.

The auxiliary channel ``q(y|x_i)`` is a bivariate Gaussian per constellation
point, fitted from training pairs.  The achievable information rate is
``H(X) - Hbar(X|Y)`` where ``Hbar`` is the cross-entropy of the transmitted
symbols under the auxiliary posteriors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .constellation import ConstellationPmf

log = logging.getLogger(__name__)

LN2 = np.log(2.0)
_CHUNK = 8192


@dataclass
class TrainingPairs:
    """Transmitted/received symbol sequences of equal length.

    ``idx`` optionally carries the constellation index of every transmitted
    symbol; when absent it is recovered by exact value match.
    """

    x: np.ndarray
    y: np.ndarray
    idx: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=complex).ravel()
        self.y = np.asarray(self.y, dtype=complex).ravel()
        if self.x.shape != self.y.shape:
            raise ValueError(f"x and y lengths differ: {self.x.size} vs {self.y.size}")
        if self.idx is not None:
            self.idx = np.asarray(self.idx, dtype=np.int64).ravel()
            if self.idx.shape != self.x.shape:
                raise ValueError("idx length differs from x")

    def __len__(self):
        return self.x.size

    def indices(self, pmf: ConstellationPmf) -> np.ndarray:
        if self.idx is not None:
            return self.idx
        return match_indices(self.x, pmf.scaled_points)


def match_indices(x: np.ndarray, alphabet: np.ndarray) -> np.ndarray:
    """Exact-match lookup of transmitted values in ``alphabet``."""
    lut = {complex(v): i for i, v in enumerate(alphabet)}
    uniq, inv = np.unique(x, return_inverse=True)
    try:
        mapped = np.array([lut[complex(v)] for v in uniq], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"transmitted value {e.args[0]} is not a constellation point") from None
    return mapped[inv.ravel()]


@dataclass
class AuxChannelModel:
    """Per-point mean (2-vector) and covariance (2x2) of the received samples."""

    means: np.ndarray
    covs: np.ndarray
    counts: np.ndarray | None = None
    low_confidence: bool = False

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        if len(self.means) != len(self.covs):
            raise ValueError("means and covariances differ in length")
        if not np.allclose(self.covs, self.covs.transpose(0, 2, 1)):
            raise ValueError("covariances must be symmetric")
        det = self.covs[:, 0, 0] * self.covs[:, 1, 1] - self.covs[:, 0, 1] ** 2
        if np.any(self.covs[:, 0, 0] <= 0) or np.any(det <= 0):
            raise ValueError("covariances must be positive definite")

    def __len__(self):
        return len(self.means)

    def gaussian_terms(self):
        """Inverse-covariance entries and log-normaliser for each point."""
        s11, s12, s22 = self.covs[:, 0, 0], self.covs[:, 0, 1], self.covs[:, 1, 1]
        det = s11 * s22 - s12**2
        ia, ib, ic = s22 / det, -s12 / det, s11 / det
        lognorm = -np.log(2 * np.pi) - 0.5 * np.log(det)
        return ia, ib, ic, lognorm

    def rotated(self, phi: float) -> "AuxChannelModel":
        """Model for outputs rotated by ``exp(1j*phi)``."""
        c, s = np.cos(phi), np.sin(phi)
        r = np.array([[c, -s], [s, c]])
        return AuxChannelModel(self.means @ r.T, r @ self.covs @ r.T, self.counts, self.low_confidence)


@dataclass
class AirEstimate:
    air_bits_per_symbol: float
    input_entropy: float
    cond_entropy_ub: float
    n_pairs: int
    clamped: bool = False
    low_confidence: bool = False
    stderr: float = float("nan")
    flags: list = field(default_factory=list)


def fit_aux_model(
    pairs: TrainingPairs,
    pmf: ConstellationPmf,
    *,
    min_count: int = 8,
    eps: float = 1e-12,
) -> AuxChannelModel:
    """Fit per-point sample mean and covariance of the received points.

    Points observed fewer than ``min_count`` times take the average covariance
    of the well-observed points; points never observed are placed at the
    scaled constellation point rotated by the least-squares complex gain of
    the observed means.
    """
    idx = pairs.indices(pmf)
    m = len(pmf)
    y2 = np.column_stack([pairs.y.real, pairs.y.imag])
    counts = np.bincount(idx, minlength=m)
    sums = np.zeros((m, 2))
    np.add.at(sums, idx, y2)
    seen = counts > 0
    means = np.zeros((m, 2))
    means[seen] = sums[seen] / counts[seen, None]

    # second moments via centred outer products
    d = y2 - means[idx]
    outer = np.zeros((m, 3))
    np.add.at(outer, idx, np.column_stack([d[:, 0] ** 2, d[:, 0] * d[:, 1], d[:, 1] ** 2]))
    good = counts >= max(min_count, 2)
    if not good.any():
        raise ValueError(
            f"no constellation point observed at least {max(min_count, 2)} times "
            f"({len(pairs)} pairs); cannot fit covariances"
        )
    covs = np.zeros((m, 2, 2))
    c = outer[good] / (counts[good, None] - 1)
    covs[good] = np.stack([np.stack([c[:, 0], c[:, 1]], -1), np.stack([c[:, 1], c[:, 2]], -1)], 1)
    covs[~good] = covs[good].mean(axis=0)
    reg = eps * max(pmf.scaled_power(), 1e-300)
    covs[:, 0, 0] += reg
    covs[:, 1, 1] += reg

    if not seen.all():
        ref = pmf.scaled_points
        mu = means[seen, 0] + 1j * means[seen, 1]
        gain = np.vdot(ref[seen], mu) / np.vdot(ref[seen], ref[seen])
        fill = gain * ref[~seen]
        means[~seen] = np.column_stack([fill.real, fill.imag])

    used = pmf.probabilities > 0
    low = bool(np.any(counts[used] < 30))
    if low:
        log.debug("aux fit: %d used points seen < 30 times", int(np.sum(counts[used] < 30)))
    return AuxChannelModel(means, covs, counts, low)


@njit(cache=True)
def _true_log_post(yr, yi, idx, mr, mi, ia, ib, ic, lconst, out):
    """Natural-log posterior of the transmitted index for every sample."""
    m = mr.size
    buf = np.empty(m)
    for k in range(yr.size):
        mx = -np.inf
        for i in range(m):
            if lconst[i] == -np.inf:
                buf[i] = -np.inf
                continue
            dr = yr[k] - mr[i]
            di = yi[k] - mi[i]
            v = lconst[i] - 0.5 * (ia[i] * dr * dr + 2.0 * ib[i] * dr * di + ic[i] * di * di)
            buf[i] = v
            if v > mx:
                mx = v
        s = 0.0
        for i in range(m):
            s += np.exp(buf[i] - mx)
        out[k] = buf[idx[k]] - mx - np.log(s)


@njit(cache=True)
def _log_post_matrix(yr, yi, mr, mi, ia, ib, ic, lconst, out, flags):
    m = mr.size
    for k in range(yr.size):
        mx = -np.inf
        for i in range(m):
            if lconst[i] == -np.inf:
                out[k, i] = -np.inf
                continue
            dr = yr[k] - mr[i]
            di = yi[k] - mi[i]
            v = lconst[i] - 0.5 * (ia[i] * dr * dr + 2.0 * ib[i] * dr * di + ic[i] * di * di)
            out[k, i] = v
            if v > mx:
                mx = v
        if not np.isfinite(mx):
            flags[k] = True
            for i in range(m):
                out[k, i] = lconst[i]
            mx = -np.inf
            for i in range(m):
                if out[k, i] > mx:
                    mx = out[k, i]
        s = 0.0
        for i in range(m):
            s += np.exp(out[k, i] - mx)
        ls = mx + np.log(s)
        for i in range(m):
            out[k, i] -= ls


def _kernel_args(model: AuxChannelModel, pmf: ConstellationPmf):
    if len(model) != len(pmf):
        raise ValueError(f"model has {len(model)} points, pmf has {len(pmf)}")
    ia, ib, ic, lognorm = model.gaussian_terms()
    with np.errstate(divide="ignore"):
        lconst = np.log(pmf.probabilities) + lognorm
    mr = np.ascontiguousarray(model.means[:, 0])
    mi = np.ascontiguousarray(model.means[:, 1])
    return mr, mi, ia, ib, ic, lconst


def log_symbol_posteriors(model: AuxChannelModel, pmf: ConstellationPmf, y):
    """Natural-log posteriors ``log q(x_i|y)``, shape ``(len(y), len(pmf))``.

    Returns ``(logpost, underflow)``; rows whose likelihoods all underflow are
    replaced by the prior and flagged.
    """
    y = np.atleast_1d(np.asarray(y, dtype=complex))
    args = _kernel_args(model, pmf)
    out = np.empty((y.size, len(pmf)))
    flags = np.zeros(y.size, dtype=np.bool_)
    _log_post_matrix(
        np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag), *args, out, flags
    )
    return out, flags


def symbol_posteriors(model: AuxChannelModel, pmf: ConstellationPmf, y):
    """Posterior probability vectors over the constellation for each output.

    Computed in the log domain.  Returns ``(posteriors, underflow_flags)``.
    """
    lp, flags = log_symbol_posteriors(model, pmf, y)
    return np.exp(lp), flags


def true_symbol_log_posteriors(
    model: AuxChannelModel, pmf: ConstellationPmf, y: np.ndarray, idx: np.ndarray
) -> np.ndarray:
    """``log q(x_k|y_k)`` (natural log) of the transmitted index per sample."""
    y = np.asarray(y, dtype=complex).ravel()
    idx = np.asarray(idx, dtype=np.int64).ravel()
    args = _kernel_args(model, pmf)
    out = np.empty(y.size)
    for s in range(0, y.size, _CHUNK):
        sl = slice(s, s + _CHUNK)
        _true_log_post(
            np.ascontiguousarray(y[sl].real), np.ascontiguousarray(y[sl].imag), idx[sl], *args, out[sl]
        )
    return out


def estimate_air(pmf: ConstellationPmf, model: AuxChannelModel, pairs: TrainingPairs) -> AirEstimate:
    """AIR lower bound ``H(X) - Hbar(X|Y)`` in bits per symbol."""
    idx = pairs.indices(pmf)
    lq = true_symbol_log_posteriors(model, pmf, pairs.y, idx) / LN2
    return air_from_log2_scores(pmf.entropy(), lq)


def air_from_log2_scores(input_entropy: float, log2q: np.ndarray) -> AirEstimate:
    """Assemble an :class:`AirEstimate` from per-symbol ``log2 q(x_k|y_k)``."""
    log2q = np.asarray(log2q, dtype=float)
    n = log2q.size
    flags = []
    if not np.all(np.isfinite(log2q)):
        raise ValueError("non-finite log-posterior for a transmitted symbol (zero prior?)")
    hc = -float(np.sum(log2q)) / n
    air = input_entropy - hc
    clamped = air < 0
    if clamped:
        flags.append("negative AIR clamped to 0")
        air = 0.0
    low = n < 1000
    if low:
        flags.append(f"only {n} pairs")
    se = float(np.std(log2q, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return AirEstimate(air, input_entropy, hc, n, clamped, low, se, flags)


# --- model file -----------------------------------------------------------

def write_model(path, pmf: ConstellationPmf, model: AuxChannelModel) -> None:
    """Text model file: ``index Re(x) Im(x) p mu_re mu_im S11 S12 S22``."""
    lines = [f"# alpha={float(pmf.alpha)!r}", "# index re im probability mu_re mu_im s11 s12 s22"]
    for i, (x, p) in enumerate(zip(pmf.points, pmf.probabilities)):
        mu, s = model.means[i], model.covs[i]
        vals = [x.real, x.imag, p, mu[0], mu[1], s[0, 0], s[0, 1], s[1, 1]]
        lines.append(f"{i} " + " ".join(f"{v:.17g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_model(path) -> tuple[ConstellationPmf, AuxChannelModel]:
    alpha = 1.0
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line[1:].strip().startswith("alpha="):
                alpha = float(line.split("=", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"{path}:{ln}: expected 9 columns, got {len(parts)}")
        rows.append([float(v) for v in parts])
    a = np.array(rows)
    order = np.argsort(a[:, 0])
    a = a[order]
    pmf = ConstellationPmf(a[:, 1] + 1j * a[:, 2], a[:, 3], alpha)
    covs = np.stack([np.stack([a[:, 6], a[:, 7]], -1), np.stack([a[:, 7], a[:, 8]], -1)], 1)
    return pmf, AuxChannelModel(a[:, 4:6], covs)
