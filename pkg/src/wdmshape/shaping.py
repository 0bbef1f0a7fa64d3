"""Input-PMF optimisation: Blahut-Arimoto over a channel sampler, Maxwell-Boltzmann
search, geometric Huffman coding and per-dimension product PMFs."""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .air import (
    AirEstimate,
    TrainingPairs,
    air_from_log2_scores,
    fit_aux_model,
    true_symbol_log_posteriors,
    LN2,
)
from .constellation import ConstellationPmf, mb_pmf, pam_levels

log = logging.getLogger(__name__)

ChannelSampler = Callable[[ConstellationPmf, int, int], TrainingPairs]


def derive_seed(*keys) -> int:
    """Deterministic 63-bit seed from integer/string keys."""
    ints = []
    for k in keys:
        if isinstance(k, str):
            ints.extend(k.encode())
            ints.append(0x5EED)
        else:
            ints.append(int(k) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(ints).generate_state(1, np.uint64)[0] >> np.uint64(1))


# --- power-constrained exponential family ---------------------------------

def _tilted(scores: np.ndarray, energy: np.ndarray, nu: float) -> np.ndarray:
    z = scores + nu * energy
    finite = np.isfinite(z)
    p = np.zeros_like(z)
    if finite.any():
        zz = z[finite]
        w = np.exp(zz - zz.max())
        p[finite] = w / w.sum()
    return p


def solve_power_multiplier(scores, energy, target_energy, rtol=1e-12):
    """Find ``nu`` with ``sum p_nu |x|^2 = target_energy`` for ``p_nu ∝ exp(scores + nu |x|^2)``."""
    scores = np.asarray(scores, float)
    energy = np.asarray(energy, float)
    support = np.isfinite(scores)
    lo_e, hi_e = energy[support].min(), energy[support].max()
    if not lo_e < target_energy < hi_e:
        if np.isclose(lo_e, hi_e) and np.isclose(target_energy, lo_e):
            return 0.0
        raise ValueError(
            f"power constraint cannot be bracketed: target energy {target_energy:.6g} "
            f"outside support range ({lo_e:.6g}, {hi_e:.6g})"
        )

    def f(nu):
        return float(np.dot(_tilted(scores, energy, nu), energy)) - target_energy

    scale = 1.0 / max(np.mean(energy[support]), 1e-300)
    lo, hi = -scale, scale
    for _ in range(200):
        if f(lo) < 0:
            break
        lo *= 2
    else:
        raise ValueError(f"power multiplier bisection failed to bracket below (nu >= {lo:.3g})")
    for _ in range(200):
        if f(hi) > 0:
            break
        hi *= 2
    else:
        raise ValueError(f"power multiplier bisection failed to bracket above (nu <= {hi:.3g})")
    return brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def ba_update(pmf: ConstellationPmf, scores: np.ndarray, power_target: float = 1.0) -> ConstellationPmf:
    """One Blahut-Arimoto step under the scaled power constraint.

    ``scores[i]`` is the conditional mean ``E[log q(x_i|Y) | X = x_i]`` (natural
    log) under the current PMF.  The update is
    ``p'(x_i) ∝ exp(scores[i] + nu |x_i|^2)`` with ``nu`` chosen so that
    ``alpha^2 E'|X|^2 = power_target``.
    """
    energy = np.abs(pmf.points) ** 2
    target = power_target / pmf.alpha**2
    nu = solve_power_multiplier(scores, energy, target)
    p = _tilted(np.asarray(scores, float), energy, nu)
    out = ConstellationPmf(pmf.points, p, pmf.alpha, meta=dict(pmf.meta))
    out.meta["nu"] = nu
    return out


def power_matched_pmf(points, alpha: float, power_target: float = 1.0) -> ConstellationPmf:
    """Maximum-entropy PMF on ``points`` meeting the power target at scale ``alpha``."""
    points = np.asarray(points, complex)
    energy = np.abs(points) ** 2
    nu = solve_power_multiplier(np.zeros(len(points)), energy, power_target / alpha**2)
    return ConstellationPmf(points, _tilted(np.zeros(len(points)), energy, nu), alpha)


def posterior_scores(posteriors: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Per-point mean log-posterior of the transmitted symbol from a posterior matrix."""
    posteriors = np.asarray(posteriors, float)
    idx = np.asarray(idx, np.int64)
    with np.errstate(divide="ignore"):
        lq = np.log(posteriors[np.arange(idx.size), idx])
    m = posteriors.shape[1]
    counts = np.bincount(idx, minlength=m)
    sums = np.bincount(idx, weights=lq, minlength=m)
    out = np.full(m, -np.inf)
    out[counts > 0] = sums[counts > 0] / counts[counts > 0]
    return out


def model_scores(model, pmf, y, idx, synth_y=None, synth_idx=None) -> np.ndarray:
    """Per-point mean ``log q(x_i|y)`` over observed (and optional synthetic) outputs."""
    m = len(pmf)
    ys, ids = [np.asarray(y)], [np.asarray(idx)]
    if synth_y is not None and len(synth_y):
        ys.append(synth_y)
        ids.append(synth_idx)
    yy = np.concatenate(ys)
    ii = np.concatenate(ids).astype(np.int64)
    lq = true_symbol_log_posteriors(model, pmf, yy, ii)
    counts = np.bincount(ii, minlength=m)
    sums = np.bincount(ii, weights=np.where(np.isfinite(lq), lq, 0.0), minlength=m)
    out = np.full(m, -np.inf)
    ok = (counts > 0) & (pmf.probabilities > 0)
    out[ok] = sums[ok] / counts[ok]
    return out


def synthetic_outputs(model, idx_counts, min_obs, n_draw, rng):
    """Draw outputs from the fitted Gaussians for points seen fewer than ``min_obs`` times."""
    rare = np.flatnonzero(idx_counts < min_obs)
    if rare.size == 0:
        return np.empty(0, complex), np.empty(0, np.int64)
    z = rng.standard_normal((rare.size, n_draw, 2))
    chol = np.linalg.cholesky(model.covs[rare])
    d = np.einsum("rij,rnj->rni", chol, z) + model.means[rare, None, :]
    y = (d[..., 0] + 1j * d[..., 1]).ravel()
    return y, np.repeat(rare, n_draw)


# --- Algorithm driver -------------------------------------------------------

@dataclass
class ShapingRunConfig:
    alpha_grid: list
    power_target: float = 1.0
    max_outer_iters: int = 5
    convergence_tol: float = 1e-3
    symbols_per_iter: int = 100_000
    inner_iters: int = 20
    inner_tol: float = 1e-5
    min_obs: int = 20
    synth_draws: int = 64
    seed: int = 0

    def __post_init__(self):
        g = np.asarray(self.alpha_grid, float)
        if g.size == 0 or np.any(np.diff(g) <= 0) or np.any(g <= 0):
            raise ValueError("alpha_grid must be non-empty, positive and strictly increasing")
        if not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")
        self.alpha_grid = [float(a) for a in g]


def default_alpha_grid(points, n: int = 11, power: float = 1.0) -> list:
    """Geometric grid strictly inside ``sqrt(P) [1/max|x|, 1/min|x|]``."""
    r = np.abs(np.asarray(points))
    lo, hi = np.sqrt(power) / r.max(), np.sqrt(power) / r.min()
    if n == 1:
        return [float(np.sqrt(lo * hi))]
    g = np.geomspace(lo, hi, n)
    g[0] *= 1 + 1e-3
    g[-1] *= 1 - 1e-3
    return [float(a) for a in g]


def ba_optimize(channel_sampler: ChannelSampler, points, config: ShapingRunConfig):
    """Optimise the PMF over the alpha grid; returns ``(pmf, AirEstimate)`` of the best alpha.

    For every alpha the loop alternates channel sampling with the current PMF,
    auxiliary-model fitting, AIR evaluation and a Blahut-Arimoto re-optimisation
    of the PMF on the fitted model, until the L1 change falls below the
    tolerance.  The returned PMF is the one that was actually transmitted when
    its AIR was measured.  Per-iteration records are stored in
    ``pmf.meta["history"]``.
    """
    points = np.asarray(points, complex)
    best = None
    history = []
    for ai, alpha in enumerate(config.alpha_grid):
        pmf = power_matched_pmf(points, alpha, config.power_target)
        best_a = None
        for it in range(config.max_outer_iters):
            seed = derive_seed(config.seed, ai, it)
            try:
                pairs = channel_sampler(pmf, config.symbols_per_iter, seed)
                idx = pairs.indices(pmf)
                model = fit_aux_model(pairs, pmf)
            except Exception as e:
                raise RuntimeError(f"alpha[{ai}]={alpha:.6g}, iteration {it}: {e}") from e
            lq = true_symbol_log_posteriors(model, pmf, pairs.y, idx)
            air = air_from_log2_scores(pmf.entropy(), lq / LN2)
            rec = {"alpha_index": ai, "alpha": alpha, "iteration": it, "air": air.air_bits_per_symbol,
                   "entropy": pmf.entropy()}
            if best_a is None or air.air_bits_per_symbol > best_a[1].air_bits_per_symbol:
                best_a = (pmf, air)

            counts = np.bincount(idx, minlength=len(pmf))
            rng = np.random.default_rng(derive_seed(seed, "synth"))
            sy, si = synthetic_outputs(model, counts, config.min_obs, config.synth_draws, rng)
            new = _inner_ba(model, pmf, pairs.y, idx, counts, sy, si, config)
            change = float(np.abs(new.probabilities - pmf.probabilities).sum())
            rec["l1_change"] = change
            history.append(rec)
            log.info("alpha=%.5g it=%d AIR=%.4f H=%.3f dL1=%.2e", alpha, it,
                     air.air_bits_per_symbol, pmf.entropy(), change)
            pmf = new
            if change < config.convergence_tol:
                break
        if best is None or best_a[1].air_bits_per_symbol > best[1].air_bits_per_symbol:
            best = best_a
    pmf, air = best
    pmf = ConstellationPmf(pmf.points, pmf.probabilities, pmf.alpha,
                           meta={"algorithm": "blahut-arimoto", "history": history})
    return pmf, air


def _inner_ba(model, pmf, y, idx, counts, sy, si, config) -> ConstellationPmf:
    """Blahut-Arimoto iterations on a fixed auxiliary model (the arg-max step)."""
    # observed outputs for well-sampled points, synthetic draws for the rest
    keep = counts[idx] >= config.min_obs
    y_obs, i_obs = y[keep], idx[keep]
    cur = pmf
    for _ in range(config.inner_iters):
        sc = model_scores(model, cur, y_obs, i_obs, sy, si)
        new = ba_update(cur, sc, config.power_target)
        delta = np.abs(new.probabilities - cur.probabilities).sum()
        cur = new
        if delta < config.inner_tol:
            break
    return cur


def mb_optimize(points, channel_sampler: ChannelSampler, lambda_grid, power_target: float = 1.0,
                n_symbols: int = 100_000, seed: int = 0):
    """Brute-force the Maxwell-Boltzmann parameter over ``lambda_grid``.

    Returns the best PMF; ``pmf.meta`` carries ``lambda``, ``air`` and the
    per-lambda AIR table.
    """
    grid = np.asarray(lambda_grid, float)
    if grid.size == 0:
        raise ValueError("lambda_grid is empty")
    table = []
    best = None
    for j, lam in enumerate(grid):
        pmf = mb_pmf(points, lam, power_target)
        pairs = channel_sampler(pmf, n_symbols, derive_seed(seed, "mb", j))
        model = fit_aux_model(pairs, pmf)
        lq = true_symbol_log_posteriors(model, pmf, pairs.y, pairs.indices(pmf))
        air = air_from_log2_scores(pmf.entropy(), lq / LN2)
        table.append((float(lam), air.air_bits_per_symbol))
        log.info("MB lambda=%.5g AIR=%.4f", lam, air.air_bits_per_symbol)
        if best is None or air.air_bits_per_symbol > best[1].air_bits_per_symbol:
            best = (pmf, air)
    pmf, air = best
    pmf.meta.update(air=air.air_bits_per_symbol, table=table)
    return pmf


# --- geometric Huffman coding ----------------------------------------------

def ghc(p) -> np.ndarray:
    """Dyadic PMF minimising ``KL(d || p)`` by geometric Huffman coding.

    The two least likely entries ``a >= b`` are repeatedly replaced by
    ``2 sqrt(a b)``, or by ``a`` alone when ``a >= 4 b`` (``b`` then gets zero
    mass).  Unwinding the merges splits a node's dyadic mass equally between
    merged children.
    """
    p = np.asarray(p, float)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"input sums to {p.sum()}")
    n = p.size
    if n == 1:
        return np.ones(1)
    heap = [(float(v), i) for i, v in enumerate(p)]
    heapq.heapify(heap)
    kids = {}
    nid = n
    while len(heap) > 1:
        b, ib = heapq.heappop(heap)
        a, ia = heapq.heappop(heap)
        if a >= 4 * b:
            kids[nid] = (ia, None)
            heapq.heappush(heap, (a, nid))
        else:
            kids[nid] = (ia, ib)
            heapq.heappush(heap, (2.0 * np.sqrt(a * b), nid))
        nid += 1
    d = np.zeros(n)
    stack = [(heap[0][1], 0)]
    while stack:
        node, depth = stack.pop()
        if node < n:
            d[node] = 2.0**-depth
            continue
        a, b = kids[node]
        if b is None:
            stack.append((a, depth))
        else:
            stack.append((a, depth + 1))
            stack.append((b, depth + 1))
    return d


def ghc_symmetric(p) -> np.ndarray:
    """GHC restricted to PMFs symmetric about the centre (even length).

    Works on the right half-line and mirrors it, so the sign bit stays
    uniform; this is KL-optimal among symmetric dyadic PMFs.
    """
    p = np.asarray(p, float)
    n = p.size
    if n % 2 or not np.allclose(p, p[::-1], atol=1e-12):
        raise ValueError("ghc_symmetric needs an even-length PMF symmetric about 0")
    half = 2 * p[n // 2:]
    half = half / half.sum()
    d = ghc(half) / 2
    return np.concatenate([d[::-1], d])


def kl_bits(d, p) -> float:
    d = np.asarray(d, float)
    p = np.asarray(p, float)
    nz = d > 0
    return float(np.sum(d[nz] * np.log2(d[nz] / p[nz])))


def dyadic_lengths(d) -> np.ndarray:
    """Integer code lengths ``-log2 d`` (0 marks an unused symbol)."""
    d = np.asarray(d, float)
    out = np.zeros(d.size, dtype=int)
    nz = d > 0
    ln = -np.log2(d[nz])
    r = np.round(ln)
    if not np.allclose(ln, r, atol=1e-9):
        raise ValueError("PMF is not dyadic")
    out[nz] = r.astype(int)
    return out


def product_pmf(p_i, p_q, alpha: float = 1.0) -> ConstellationPmf:
    """QAM PMF ``p(a + jb) = p_i(a) p_q(b)`` on the square grid."""
    p_i = np.asarray(p_i, float)
    p_q = np.asarray(p_q, float)
    li, lq = pam_levels(p_i.size), pam_levels(p_q.size)
    pts = (li[:, None] + 1j * lq[None, :]).ravel()
    p = np.outer(p_i, p_q).ravel()
    p = p / p.sum()
    return ConstellationPmf(pts, p, alpha)


def marginals(pmf: ConstellationPmf):
    """I and Q marginals of a square-grid QAM PMF (index ``i*n + q``)."""
    n = int(round(np.sqrt(len(pmf))))
    p = pmf.probabilities.reshape(n, n)
    return p.sum(axis=1), p.sum(axis=0)


# --- PMF file ----------------------------------------------------------------

def write_pmf(path, pmf: ConstellationPmf, **provenance) -> None:
    """Text PMF file: header ``# key=value`` lines, rows ``index re im probability``."""
    hdr = {"alpha": repr(float(pmf.alpha)),
           "power": repr(float(pmf.power if pmf.power is not None else pmf.scaled_power()))}
    for k in ("algorithm", "channel", "seed"):
        v = provenance.get(k, pmf.meta.get(k))
        if v is not None:
            hdr[k] = str(v)
    lines = [f"# {k}={v}" for k, v in hdr.items()]
    lines.append("# index re im probability")
    for i, (x, p) in enumerate(zip(pmf.points, pmf.probabilities)):
        lines.append(f"{i} {x.real:.17g} {x.imag:.17g} {p:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pmf(path) -> ConstellationPmf:
    hdr = {}
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                hdr[k.strip()] = v.strip()
            continue
        parts = s.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{ln}: expected 4 columns, got {len(parts)}")
        rows.append([float(v) for v in parts])
    if not rows:
        raise ValueError(f"{path}: no PMF rows")
    a = np.array(rows)
    a = a[np.argsort(a[:, 0])]
    p = a[:, 3] / a[:, 3].sum()
    alpha = float(hdr.get("alpha", 1.0))
    meta = {k: v for k, v in hdr.items() if k not in ("alpha", "power")}
    return ConstellationPmf(a[:, 1] + 1j * a[:, 2], p, alpha, meta=meta)
