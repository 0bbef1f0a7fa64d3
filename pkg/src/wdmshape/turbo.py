"""Punctured turbo code with (23, 37) octal RSC constituents and the BICM loop.

Octal generators are read MSB = D^0: feedback 23 = 1 + D^3 + D^4,
feedforward 37 = 1 + D + D^2 + D^3 + D^4.  LLRs are ``log P(0)/P(1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .shaping import derive_seed

MEMORY = 4
N_STATES = 1 << MEMORY
TAIL_BITS = 4 * MEMORY  # (u, p) pairs for both constituents
LLR_CLAMP = 50.0


def overhead_percent(m: float, eta: float) -> float:
    """FEC overhead ``(m - eta)/eta * 100`` for label length ``m`` and rate ``eta``."""
    if eta <= 0 or not (1.0 / 3.0 - 1e-12 <= eta / m <= 1.0 + 1e-12):
        raise ValueError(f"rate eta/m = {eta}/{m} exceeds base-rate capability (must be in [1/3, 1])")
    return (m - eta) / eta * 100.0


def _octal_taps(g: int) -> np.ndarray:
    """Coefficients of D^0..D^MEMORY from an octal generator given as an int."""
    bits = [int(b) for b in format(g, f"0{MEMORY + 1}b")]
    return np.array(bits, dtype=np.int64)


def build_trellis(fb=0o23, ff=0o37):
    """``next_state[s, u]`` and ``parity[s, u]``; state bit k-1 holds register D^k."""
    fbt, fft = _octal_taps(fb), _octal_taps(ff)
    nxt = np.zeros((N_STATES, 2), np.int64)
    par = np.zeros((N_STATES, 2), np.int64)
    term = np.zeros(N_STATES, np.int64)
    for s in range(N_STATES):
        reg = [(s >> k) & 1 for k in range(MEMORY)]
        fbk = sum(fbt[k + 1] & reg[k] for k in range(MEMORY)) & 1
        term[s] = fbk
        for u in range(2):
            a = u ^ fbk
            p = (fft[0] & a) ^ (sum(fft[k + 1] & reg[k] for k in range(MEMORY)) & 1)
            ns = a | (sum(reg[k] << (k + 1) for k in range(MEMORY - 1)))
            nxt[s, u], par[s, u] = ns, p
    return nxt, par, term


NEXT_STATE, PARITY, TERM_INPUT = build_trellis()


@nb.njit(cache=True)
def _rsc_encode(u, nxt, par, term):
    k = u.size
    sys = np.empty(k + MEMORY, np.uint8)
    p = np.empty(k + MEMORY, np.uint8)
    s = 0
    for i in range(k + MEMORY):
        b = u[i] if i < k else term[s]
        sys[i] = b
        p[i] = par[s, b]
        s = nxt[s, b]
    return sys, p


def rsc_encode(u):
    """Terminated RSC encoding; returns ``(systematic, parity)`` of length ``K + 4``."""
    return _rsc_encode(np.asarray(u, np.uint8), NEXT_STATE, PARITY, TERM_INPUT)


@nb.njit(cache=True, inline="always")
def _maxstar(a, b, exact):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if exact:
        return max(a, b) + np.log1p(np.exp(-abs(a - b)))
    return max(a, b)


@nb.njit(cache=True)
def _bcjr_log(lu, la, lp, nxt, par, exact):
    n = lu.size
    ns = nxt.shape[0]
    alpha = np.full((n + 1, ns), -np.inf)
    beta = np.full((n + 1, ns), -np.inf)
    alpha[0, 0] = 0.0
    beta[n, 0] = 0.0
    gam = np.empty((n, ns, 2))
    for i in range(n):
        hu = 0.5 * (lu[i] + la[i])
        hp = 0.5 * lp[i]
        for s in range(ns):
            for u in range(2):
                gam[i, s, u] = (hu if u == 0 else -hu) + (hp if par[s, u] == 0 else -hp)
    for i in range(n):
        for s in range(ns):
            a = alpha[i, s]
            if a == -np.inf:
                continue
            for u in range(2):
                t = nxt[s, u]
                alpha[i + 1, t] = _maxstar(alpha[i + 1, t], a + gam[i, s, u], exact)
        m = -np.inf
        for s in range(ns):
            m = max(m, alpha[i + 1, s])
        for s in range(ns):
            alpha[i + 1, s] -= m
    for i in range(n - 1, -1, -1):
        for s in range(ns):
            acc = -np.inf
            for u in range(2):
                acc = _maxstar(acc, gam[i, s, u] + beta[i + 1, nxt[s, u]], exact)
            beta[i, s] = acc
        m = -np.inf
        for s in range(ns):
            m = max(m, beta[i, s])
        for s in range(ns):
            beta[i, s] -= m
    app_u = np.empty(n)
    app_p = np.empty(n)
    for i in range(n):
        u0 = -np.inf
        u1 = -np.inf
        p0 = -np.inf
        p1 = -np.inf
        for s in range(ns):
            a = alpha[i, s]
            if a == -np.inf:
                continue
            for u in range(2):
                v = a + gam[i, s, u] + beta[i + 1, nxt[s, u]]
                if u == 0:
                    u0 = _maxstar(u0, v, exact)
                else:
                    u1 = _maxstar(u1, v, exact)
                if par[s, u] == 0:
                    p0 = _maxstar(p0, v, exact)
                else:
                    p1 = _maxstar(p1, v, exact)
        app_u[i] = u0 - u1
        app_p[i] = p0 - p1
    return app_u, app_p


@nb.njit(cache=True)
def _bcjr_prob(lu, la, lp, nxt, par):
    # sum-product with per-step normalisation; branch factors scaled into (0, 1].
    # Half-LLRs are capped and negligible state metrics flushed to zero so that
    # products never enter the (slow) subnormal range.
    n = lu.size
    ns = nxt.shape[0]
    tiny = 1e-300
    flush = 1e-60
    cap = 100.0
    alpha = np.zeros((n + 1, ns))
    beta = np.zeros((n + 1, ns))
    alpha[0, 0] = 1.0
    beta[n, 0] = 1.0
    gu = np.empty((n, 2))
    gp = np.empty((n, 2))
    for i in range(n):
        hu = min(cap, max(-cap, 0.5 * (lu[i] + la[i])))
        hp = min(cap, max(-cap, 0.5 * lp[i]))
        gu[i, 0] = np.exp(hu - abs(hu))
        gu[i, 1] = np.exp(-hu - abs(hu))
        gp[i, 0] = np.exp(hp - abs(hp))
        gp[i, 1] = np.exp(-hp - abs(hp))
    for i in range(n):
        tot = 0.0
        for s in range(ns):
            a = alpha[i, s]
            if a == 0.0:
                continue
            for u in range(2):
                v = a * gu[i, u] * gp[i, par[s, u]]
                alpha[i + 1, nxt[s, u]] += v
                tot += v
        tot = max(tot, tiny)
        for s in range(ns):
            v = alpha[i + 1, s] / tot
            alpha[i + 1, s] = v if v > flush else 0.0
    for i in range(n - 1, -1, -1):
        tot = 0.0
        for s in range(ns):
            acc = 0.0
            for u in range(2):
                acc += gu[i, u] * gp[i, par[s, u]] * beta[i + 1, nxt[s, u]]
            beta[i, s] = acc
            tot += acc
        tot = max(tot, tiny)
        for s in range(ns):
            v = beta[i, s] / tot
            beta[i, s] = v if v > flush else 0.0
    app_u = np.empty(n)
    app_p = np.empty(n)
    for i in range(n):
        u0 = 0.0
        u1 = 0.0
        p0 = 0.0
        p1 = 0.0
        for s in range(ns):
            a = alpha[i, s]
            if a == 0.0:
                continue
            for u in range(2):
                q = par[s, u]
                v = a * gu[i, u] * gp[i, q] * beta[i + 1, nxt[s, u]]
                if u == 0:
                    u0 += v
                else:
                    u1 += v
                if q == 0:
                    p0 += v
                else:
                    p1 += v
        app_u[i] = np.log(max(u0, tiny)) - np.log(max(u1, tiny))
        app_p[i] = np.log(max(p0, tiny)) - np.log(max(p1, tiny))
    return app_u, app_p


def bcjr(lu, la, lp, nxt, par, exact):
    """Forward-backward decoding of a zero-terminated RSC trellis.

    ``lu`` channel LLRs of systematic bits, ``la`` a-priori LLRs, ``lp`` parity
    channel LLRs, all of length ``K + 4``.  Returns a-posteriori LLRs of the
    systematic and parity bits.  ``exact`` selects log-MAP (evaluated in the
    normalised probability domain) instead of max-log.
    """
    lu = np.asarray(lu, float)
    la = np.asarray(la, float)
    lp = np.asarray(lp, float)
    if exact:
        return _bcjr_prob(lu, la, lp, nxt, par)
    return _bcjr_log(lu, la, lp, nxt, par, False)


@dataclass
class FecConfig:
    """Rate/size parameters; ``block_symbols`` QAM symbols carry one codeword."""

    eta_bits_per_symbol: float
    label_m: int
    block_symbols: int = 6000
    decoder_iters: int = 10
    demap_iters: int = 5
    interleaver_seed: int = 0
    max_log: bool = False
    generators: tuple = (0o23, 0o37)
    early_stop: bool = True

    @property
    def n_info(self) -> int:
        k = self.eta_bits_per_symbol * self.block_symbols
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"eta * block_symbols = {k} is not an integer")
        return int(round(k))

    @property
    def n_coded(self) -> int:
        return self.label_m * self.block_symbols


@dataclass
class TurboCodec:
    """Turbo encoder/decoder with puncturing and a bit interleaver toward the mapper.

    ``position_order`` ranks label positions by ambiguity (least ambiguous
    first); systematic bits fill the least ambiguous label slots.
    """

    config: FecConfig
    position_order: np.ndarray | None = None
    perm: np.ndarray = field(init=False)
    keep1: np.ndarray = field(init=False)
    keep2: np.ndarray = field(init=False)
    bit_perm: np.ndarray = field(init=False)

    def __post_init__(self):
        cfg = self.config
        k, n, m = cfg.n_info, cfg.n_coded, cfg.label_m
        overhead_percent(m, cfg.eta_bits_per_symbol)
        if tuple(cfg.generators) != (0o23, 0o37):
            self._trellis = build_trellis(*cfg.generators)
        else:
            self._trellis = (NEXT_STATE, PARITY, TERM_INPUT)
        npar = n - k - TAIL_BITS
        if npar < 0 or npar > 2 * k:
            raise ValueError(f"codeword of {n} bits cannot carry {k} info bits at base rate 1/3")
        rng = np.random.default_rng(derive_seed(cfg.interleaver_seed, "turbo"))
        self.perm = rng.permutation(k)
        n1 = (npar + 1) // 2
        n2 = npar - n1
        self.keep1 = np.floor(np.arange(n1) * k / max(n1, 1)).astype(np.int64)
        self.keep2 = np.floor((np.arange(n2) + 0.5) * k / max(n2, 1)).astype(np.int64)
        self.bit_perm = self._build_bit_perm(rng)

    def _build_bit_perm(self, rng):
        cfg = self.config
        nsym, m, k = cfg.block_symbols, cfg.label_m, cfg.n_info
        order = np.arange(m) if self.position_order is None else np.asarray(self.position_order)
        slots = np.concatenate([rng.permutation(nsym) * m + j
                                for j in order])
        if self.position_order is None:
            slots = slots[rng.permutation(slots.size)]
        out = np.empty(slots.size, np.int64)
        out[:k] = slots[:k][rng.permutation(k)]
        out[k:] = slots[k:][rng.permutation(slots.size - k)]
        return out

    # --- codeword layout: [sys K][p1 kept][p2 kept][u1 tail 4][p1 tail 4][u2 tail 4][p2 tail 4]

    def encode_codeword(self, info) -> np.ndarray:
        u = np.asarray(info, np.uint8)
        k = self.config.n_info
        if u.size != k:
            raise ValueError(f"expected {k} info bits, got {u.size}")
        nxt, par, term = self._trellis
        s1, p1 = _rsc_encode(u, nxt, par, term)
        s2, p2 = _rsc_encode(u[self.perm], nxt, par, term)
        return np.concatenate([u, p1[:k][self.keep1], p2[:k][self.keep2],
                               s1[k:], p1[k:], s2[k:], p2[k:]])

    def interleave(self, codeword) -> np.ndarray:
        out = np.empty_like(codeword)
        out[self.bit_perm] = codeword
        return out

    def deinterleave(self, label_stream) -> np.ndarray:
        return np.asarray(label_stream)[self.bit_perm]

    def encode(self, info) -> np.ndarray:
        """Info bits to label-ordered coded bits (length ``block_symbols * m``)."""
        return self.interleave(self.encode_codeword(info))

    def decode_codeword(self, llr, iters=None):
        """Turbo decoding of codeword-ordered LLRs.

        Returns ``(info_bits, extrinsic, app)``, where ``extrinsic`` and ``app``
        cover every transmitted codeword bit.
        """
        cfg = self.config
        k = cfg.n_info
        iters = cfg.decoder_iters if iters is None else iters
        nxt, par, _ = self._trellis
        llr = np.clip(np.asarray(llr, float), -LLR_CLAMP, LLR_CLAMP)
        n1, n2 = self.keep1.size, self.keep2.size
        ls = llr[:k]
        lp1 = np.zeros(k + MEMORY)
        lp2 = np.zeros(k + MEMORY)
        lp1[self.keep1] = llr[k: k + n1]
        lp2[self.keep2] = llr[k + n1: k + n1 + n2]
        t = k + n1 + n2
        lu1 = np.concatenate([ls, llr[t: t + 4]])
        lp1[k:] = llr[t + 4: t + 8]
        lu2 = np.concatenate([ls[self.perm], llr[t + 8: t + 12]])
        lp2[k:] = llr[t + 12: t + 16]
        exact = not cfg.max_log
        le21 = np.zeros(k + MEMORY)
        le12 = np.zeros(k)
        a1 = b1 = a2 = b2 = None
        for _ in range(max(iters, 1)):
            a1, b1 = bcjr(lu1, le21, lp1, nxt, par, exact)
            le12 = a1[:k] - ls - le21[:k]
            la2 = np.zeros(k + MEMORY)
            la2[:k] = le12[self.perm]
            a2, b2 = bcjr(lu2, la2, lp2, nxt, par, exact)
            e2 = a2[:k] - ls[self.perm] - la2[:k]
            le21 = np.zeros(k + MEMORY)
            le21[self.perm] = e2
            if cfg.early_stop:
                # both constituent decoders agree on every information bit
                h2 = np.empty(k, bool)
                h2[self.perm] = a2[:k] < 0
                if np.array_equal(a1[:k] < 0, h2):
                    break
        app_info = ls + le12 + le21[:k]
        ext = np.concatenate([
            le12 + le21[:k],
            (b1 - lp1)[self.keep1], (b2 - lp2)[self.keep2],
            a1[k:] - lu1[k:], b1[k:] - lp1[k:],
            a2[k:] - lu2[k:], b2[k:] - lp2[k:],
        ])
        ext = np.clip(ext, -LLR_CLAMP, LLR_CLAMP)
        app = np.clip(ext + llr, -LLR_CLAMP, LLR_CLAMP)
        return (app_info < 0).astype(np.uint8), ext, app

    def decode(self, label_llrs, iters=None):
        """Decode label-ordered LLRs; extrinsic and APP are returned in label order."""
        bits, ext, app = self.decode_codeword(self.deinterleave(np.ravel(label_llrs)), iters)
        return bits, self.interleave(ext), self.interleave(app)


def llr_mutual_information(llr, bits=None) -> float:
    """Bitwise MI of LLRs; time-average estimator if ``bits`` given, else the
    expectation estimator that assumes consistent LLRs."""
    llr = np.asarray(llr, float).ravel()
    if bits is None:
        a = np.abs(llr)
        p = 1.0 / (1.0 + np.exp(-a))  # prob. of the hard decision
        h = -(p * np.log2(p) + (1 - p) * np.log2(np.maximum(1 - p, 1e-300)))
        return float(1.0 - np.mean(h))
    sgn = 1.0 - 2.0 * np.asarray(bits, float).ravel()
    return float(1.0 - np.mean(np.logaddexp(0.0, -sgn * llr)) / np.log(2.0))


@dataclass
class BicmResult:
    info_bits: np.ndarray
    passes: list  # per pass: dict(info_bits, mi_demap, mi_decoder)


def bicm_loop(log_posteriors, labeling, codec: TurboCodec, demap_iters=None, coded_bits=None) -> BicmResult:
    """Iterative demapping and decoding of one codeword block.

    Pass 0 uses zero a-priori (the non-iterative receiver); each further pass
    feeds the decoder's extrinsic coded-bit LLRs back to the demapper.
    ``coded_bits`` (label order) enables reference-based MI diagnostics.
    """
    from .labeling import soft_demap

    cfg = codec.config
    iters = cfg.demap_iters if demap_iters is None else demap_iters
    n, m = cfg.block_symbols, cfg.label_m
    apriori = np.zeros((n, m))
    passes = []
    bits = None
    for _ in range(iters + 1):
        le = soft_demap(log_posteriors, apriori, labeling, log_domain=True)
        bits, ext, app = codec.decode(le.ravel())
        passes.append({
            "info_bits": bits,
            "mi_demap": llr_mutual_information(le, coded_bits),
            "mi_decoder": llr_mutual_information(ext, coded_bits),
        })
        if len(passes) == 1:
            passes[0]["demap_hard"] = (le.ravel() < 0).astype(np.uint8)
        if cfg.early_stop and np.array_equal(codec.encode(bits), (app < 0).astype(np.uint8)):
            # decisions form a valid codeword
            break
        apriori = ext.reshape(n, m)
    return BicmResult(bits, passes)
