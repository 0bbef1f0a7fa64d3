"""Oracle-backed quick checks of the numerical building blocks.

Every check compares a library routine with an independent reference
(closed-form propagation, exhaustive enumeration, quadrature) and reports
pass/fail with its runtime.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .air import TrainingPairs, estimate_air, fit_aux_model
from .channels import OpticalField, awgn_apply, ssfm_propagate, table_i_link
from .constellation import uniform_qam
from .labeling import named_labeling, read_labeling
from .shaping import ghc, kl_bits
from .turbo import MEMORY, NEXT_STATE, PARITY, TERM_INPUT, _rsc_encode, bcjr


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


# --- oracles -----------------------------------------------------------------------

def gaussian_pulse_dispersed(t, t0, beta2, z):
    """Closed-form unit-peak Gaussian pulse after pure dispersion over ``z`` metres."""
    q = t0**2 - 1j * beta2 * z
    return t0 / np.sqrt(q) * np.exp(-(t**2) / (2 * q))


def pam_awgn_mi(probs, levels, noise_var_1d, order: int = 80) -> float:
    """MI (bits) of a 1-D discrete input in real Gaussian noise, Gauss-Hermite quadrature."""
    probs = np.asarray(probs, float)
    levels = np.asarray(levels, float)
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    s = np.sqrt(2 * noise_var_1d)
    mi = 0.0
    for p, a in zip(probs, levels):
        if p == 0:
            continue
        y = a + s * nodes
        d = (y[:, None] - levels[None, :]) ** 2 / (2 * noise_var_1d)
        # log2 p(y|a) / p(y), Gaussian normalisation cancels
        num = -(y - a) ** 2 / (2 * noise_var_1d)
        mx = np.max(-d, axis=1)
        den = mx + np.log(np.sum(probs[None, :] * np.exp(-d - mx[:, None]), axis=1))
        mi += p * np.sum(weights * (num - den)) / np.sqrt(np.pi)
    return float(mi / np.log(2))


def qam_awgn_mi(order: int, snr_db: float) -> float:
    """MI of uniform square QAM on circular AWGN (two independent PAM dimensions)."""
    pmf = uniform_qam(order)
    n = int(round(np.sqrt(order)))
    lev = np.unique(pmf.scaled_points.real)
    nv = pmf.scaled_power() / 10 ** (snr_db / 10)
    return 2 * pam_awgn_mi(np.full(n, 1 / n), lev, nv / 2)


def brute_force_bit_llrs(lu, la, lp, k):
    """Exact systematic/parity APP LLRs by enumerating all 2^k inputs."""
    words = np.array(list(itertools.product([0, 1], repeat=k)), np.uint8)
    sys_bits, par_bits = [], []
    for u in words:
        s, p = _rsc_encode(u, NEXT_STATE, PARITY, TERM_INPUT)
        sys_bits.append(s)
        par_bits.append(p)
    s = np.array(sys_bits, float)
    p = np.array(par_bits, float)
    w = 0.5 * ((1 - 2 * s) @ (lu + la) + (1 - 2 * p) @ lp)

    def lse(v):
        m = v.max()
        return m + np.log(np.sum(np.exp(v - m)))

    out_u = np.array([lse(w[s[:, i] == 0]) - lse(w[s[:, i] == 1]) for i in range(k + MEMORY)])
    out_p = np.array([lse(w[p[:, i] == 0]) - lse(w[p[:, i] == 1]) for i in range(k + MEMORY)])
    return out_u, out_p


def exhaustive_dyadic_min_kl(p, max_len: int = 10):
    """Minimum ``KL(d || p)`` over dyadic PMFs with masses in ``{0} U {2^0..2^-max_len}``."""
    p = np.asarray(p, float)
    best = np.inf
    # -1 marks an unused point
    for ls in itertools.product(range(-1, max_len + 1), repeat=p.size):
        d = np.array([0.0 if l < 0 else 2.0 ** -l for l in ls])
        if abs(d.sum() - 1) > 1e-12:
            continue
        best = min(best, kl_bits(d, p))
    return best


# --- checks --------------------------------------------------------------------

def _lossless(**kw):
    return table_i_link(fiber_loss_db_km=0.0, n_channels=1, **kw)


def check_ssfm_cd():
    link = _lossless(gamma_per_w_km=0.0, ssfm_step_km=1.0, span_length_km=80.0)
    n, fs, t0 = 4096, 1e12, 20e-12
    t = (np.arange(n) - n // 2) / fs
    fld = OpticalField(gaussian_pulse_dispersed(t, t0, 0.0, 0.0)[None, :].astype(complex), fs, 0.0)
    out = ssfm_propagate(fld, link, 0, n_spans=1, amplify=False).samples[0]
    ref = gaussian_pulse_dispersed(t, t0, link.beta2, 80e3)
    err = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    return err < 1e-8, f"relative error {err:.2e}"


def check_ssfm_spm():
    link = _lossless(dispersion_ps_nm_km=0.0, ssfm_step_km=1.0, span_length_km=80.0)
    n, fs = 1024, 1e12
    rng = np.random.default_rng(0)
    a = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(5e-3 / 2)
    out = ssfm_propagate(OpticalField(a[None, :], fs, 0.0), link, 0, n_spans=1, amplify=False).samples[0]
    ref = a * np.exp(1j * link.gamma_per_w_m * np.abs(a) ** 2 * 80e3)
    err = np.linalg.norm(out - ref) / np.linalg.norm(ref)
    return err < 1e-8, f"relative error {err:.2e}"


def check_ssfm_energy():
    link = _lossless(ssfm_step_km=1.0, span_length_km=40.0)
    n, fs = 2048, 2e11
    rng = np.random.default_rng(1)
    a = (rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))) * np.sqrt(1e-2 / 4)
    out = ssfm_propagate(OpticalField(a, fs, 0.0), link, 0, n_spans=1, amplify=False).samples
    e0, e1 = np.sum(np.abs(a) ** 2), np.sum(np.abs(out) ** 2)
    err = abs(e1 - e0) / e0
    return err < 1e-9, f"relative energy change {err:.2e}"


def check_ssfm_order():
    """Error against a fine-step reference drops ~4x per step halving."""
    n, fs, t0 = 2048, 1e12, 20e-12
    t = (np.arange(n) - n // 2) / fs
    # dispersion and nonlinear lengths both comparable to the 20 km fibre
    a = np.sqrt(0.1) * gaussian_pulse_dispersed(t, t0, 0.0, 0.0)[None, :].astype(complex)
    fld = OpticalField(a, fs, 0.0)

    def run(h):
        return ssfm_propagate(fld, _lossless(ssfm_step_km=h, span_length_km=20.0), 0, n_spans=1,
                              amplify=False).samples

    ref = run(1 / 256)
    e = [np.linalg.norm(run(h) - ref) for h in (1.0, 0.5, 0.25, 0.125)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    return bool(np.all(np.abs(orders - 2) < 0.3)), f"observed orders {np.round(orders, 2).tolist()}"


def check_bcjr():
    k = 8
    rng = np.random.default_rng(3)
    lu, la, lp = rng.normal(0, 2, k + MEMORY), rng.normal(0, 1, k + MEMORY), rng.normal(0, 2, k + MEMORY)
    la[k:] = 0
    au, ap = bcjr(lu, la, lp, NEXT_STATE, PARITY, True)
    bu, bp = brute_force_bit_llrs(lu, la, lp, k)
    err = max(np.abs(au - bu).max(), np.abs(ap - bp).max())
    return err < 1e-6, f"max LLR error {err:.1e}"


def check_ghc():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        p = rng.dirichlet(np.ones(rng.integers(2, 5)))
        gap = kl_bits(ghc(p), p) - exhaustive_dyadic_min_kl(p, 8)
        worst = max(worst, gap)
    return worst < 1e-9, f"worst KL excess {worst:.1e}"


def check_air_quadrature():
    snr = 10.0
    pmf = uniform_qam(16)
    rng = np.random.default_rng(5)
    idx = pmf.sample(200_000, rng)
    x = pmf.scaled_points[idx]
    pairs = TrainingPairs(x, awgn_apply(x, snr, 6), idx)
    est = estimate_air(pmf, fit_aux_model(pairs, pmf), pairs).air_bits_per_symbol
    ref = qam_awgn_mi(16, snr)
    return abs(est - ref) < 0.02, f"AIR {est:.4f} vs quadrature {ref:.4f}"


def check_labelings():
    bad = []
    for name in ("256qam-shaped", "1024qam-shaped"):
        t = named_labeling(name)
        for d in (t.dim_i, t.dim_q):
            if abs(d.kraft() - 1) > 1e-12 or not d.mirror_ok():
                bad.append(name)
    return not bad, "Kraft equality and mirror symmetry" if not bad else f"failed: {bad}"


def check_labeling_file(path):
    def run():
        try:
            read_labeling(path)
        except (OSError, ValueError) as e:
            return False, str(e)
        return True, f"{path} parses"
    return run


CHECKS = [
    ("ssfm pure dispersion vs closed form", check_ssfm_cd),
    ("ssfm pure Kerr vs closed form", check_ssfm_spm),
    ("ssfm energy conservation", check_ssfm_energy),
    ("ssfm step-halving order", check_ssfm_order),
    ("bcjr vs exhaustive MAP", check_bcjr),
    ("ghc vs exhaustive search", check_ghc),
    ("air vs quadrature MI", check_air_quadrature),
    ("reference labelings", check_labelings),
]


def selfcheck(labeling_files=(), out=print) -> list:
    """Run all checks, print a matrix with runtimes, return the results."""
    checks = list(CHECKS) + [(f"labeling file {p}", check_labeling_file(p)) for p in labeling_files]
    results = []
    for name, fn in checks:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t))
    w = max(len(r.name) for r in results)
    for r in results:
        out(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{w}}  {r.seconds:7.2f} s  {r.detail}")
    return results


__all__ = ["CheckResult", "selfcheck", "gaussian_pulse_dispersed", "pam_awgn_mi", "qam_awgn_mi",
           "brute_force_bit_llrs", "exhaustive_dyadic_min_kl"]
