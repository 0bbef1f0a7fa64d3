"""Independent reference computations used by the tests.

Nothing here imports library internals; each routine recomputes a quantity
from first principles (quadrature, enumeration, direct shift registers).
"""

import heapq
import itertools

import numpy as np
from scipy.optimize import brentq


def pam_mi_trapezoid(probs, levels, noise_var, n_grid=200_001):
    """MI in bits of a discrete real input in real Gaussian noise (trapezoid rule)."""
    probs = np.asarray(probs, float)
    levels = np.asarray(levels, float)
    s = np.sqrt(noise_var)
    y = np.linspace(levels.min() - 12 * s, levels.max() + 12 * s, n_grid)
    lik = np.exp(-(y[None, :] - levels[:, None]) ** 2 / (2 * noise_var)) / np.sqrt(2 * np.pi * noise_var)
    py = probs @ lik
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lik > 0, np.log2(lik / py), 0.0)
    return float(np.trapezoid(probs @ (lik * ratio), y))


def qam_mi(order, snr_db):
    """MI of uniform square QAM on circular AWGN, as two PAM dimensions."""
    n = int(round(np.sqrt(order)))
    lv = np.arange(-(n - 1), n, 2, dtype=float)
    es = 2 * np.mean(lv**2)
    nv = es / 10 ** (snr_db / 10)
    return 2 * pam_mi_trapezoid(np.full(n, 1 / n), lv, nv / 2)


def biawgn_capacity(es_n0_db):
    """Capacity (bits/use) of BPSK on AWGN by trapezoid integration."""
    snr = 10 ** (es_n0_db / 10)
    var = 1 / (2 * snr)
    return pam_mi_trapezoid([0.5, 0.5], [-1.0, 1.0], var, 20_001)


def biawgn_ebn0_limit_db(rate):
    """Smallest Eb/N0 (dB) at which BPSK capacity reaches ``rate``."""
    f = lambda es: biawgn_capacity(es) - rate  # noqa: E731
    es = brentq(f, -15.0, 15.0, xtol=1e-6)
    return es - 10 * np.log10(rate)


def kl_bits(d, p):
    d = np.asarray(d, float)
    p = np.asarray(p, float)
    nz = d > 0
    return float(np.sum(d[nz] * np.log2(d[nz] / p[nz])))


def _complete_length_multisets(max_leaves, max_len):
    """Sorted length tuples of complete binary prefix codes (Kraft sum exactly 1)."""
    out = []

    def rec(prefix, lo, kraft):
        if kraft == 1:
            out.append(tuple(prefix))
            return
        if len(prefix) == max_leaves:
            return
        for l in range(lo, max_len + 1):
            k = kraft + 2.0**-l
            if k <= 1:
                rec(prefix + [l], l, k)

    rec([], 1, 0.0)
    return [(0,)] + out  # all mass on one point


def exhaustive_min_kl(p):
    """Minimum ``KL(d || p)`` over all dyadic PMFs on ``len(p)`` points.

    Enumerates every complete prefix code with at most ``len(p)`` leaves; for a
    fixed multiset of lengths the best assignment pairs the largest masses
    with the largest ``p`` (rearrangement inequality), unused points get zero.
    """
    p = np.asarray(p, float)
    n = p.size
    if n == 1:
        return 0.0
    order = np.argsort(-p)
    best = np.inf
    for lens in _complete_length_multisets(n, n - 1):
        d = np.zeros(n)
        d[order[: len(lens)]] = 2.0 ** -np.asarray(lens, float)
        best = min(best, kl_bits(d, p))
    return best


def brute_min_kl(p, max_len=8):
    """Minimum KL by trying every length vector in ``{unused, 0..max_len}^n``."""
    p = np.asarray(p, float)
    best = np.inf
    for ls in itertools.product(range(-1, max_len + 1), repeat=p.size):
        d = np.array([0.0 if l < 0 else 2.0**-l for l in ls])
        if abs(d.sum() - 1) < 1e-12:
            best = min(best, kl_bits(d, p))
    return best


def huffman_dyadic(p):
    """Dyadic PMF from Huffman code lengths (the rounding baseline)."""
    p = np.asarray(p, float)
    if p.size == 1:
        return np.ones(1)
    heap = [(v, [i]) for i, v in enumerate(p)]
    heapq.heapify(heap)
    depth = np.zeros(p.size, int)
    while len(heap) > 1:
        a, ia = heapq.heappop(heap)
        b, ib = heapq.heappop(heap)
        for i in ia + ib:
            depth[i] += 1
        heapq.heappush(heap, (a + b, ia + ib))
    return 2.0 ** -depth.astype(float)


# --- (23, 37) recursive systematic convolutional code --------------------------------

def rsc_shift_register(u):
    """Terminated RSC encoder written as an explicit shift register.

    Feedback 1 + D^3 + D^4, feedforward 1 + D + D^2 + D^3 + D^4.  Returns
    ``(systematic, parity)`` including four tail bits.
    """
    reg = [0, 0, 0, 0]  # a_{t-1} .. a_{t-4}
    sys, par = [], []
    for t in range(len(u) + 4):
        fb = reg[2] ^ reg[3]
        b = int(u[t]) if t < len(u) else fb  # tail input zeroes the register input
        a = b ^ fb
        par.append(a ^ reg[0] ^ reg[1] ^ reg[2] ^ reg[3])
        sys.append(b)
        reg = [a] + reg[:3]
    assert reg == [0, 0, 0, 0]
    return np.array(sys, np.uint8), np.array(par, np.uint8)


def brute_force_app(lu, la, lp, k):
    """Exact APP LLRs of systematic and parity bits over all ``2**k`` inputs."""
    words = itertools.product([0, 1], repeat=k)
    s_all, p_all = zip(*(rsc_shift_register(np.array(w)) for w in words))
    s = np.array(s_all, float)
    p = np.array(p_all, float)
    w = 0.5 * ((1 - 2 * s) @ (np.asarray(lu) + la) + (1 - 2 * p) @ lp)

    def lse(v):
        m = v.max()
        return m + np.log(np.exp(v - m).sum())

    out_u = np.array([lse(w[s[:, i] == 0]) - lse(w[s[:, i] == 1]) for i in range(s.shape[1])])
    out_p = np.array([lse(w[p[:, i] == 0]) - lse(w[p[:, i] == 1]) for i in range(p.shape[1])])
    return out_u, out_p


# --- many-to-one demapping ------------------------------------------------------------

def prefix_owner(prefixes, bits):
    """Index of the symbol whose prefix starts the bit string."""
    s = "".join(str(int(b)) for b in bits)
    hits = [i for i, pre in enumerate(prefixes) if pre and s.startswith(pre)]
    assert len(hits) == 1
    return hits[0]


def demap_brute_force(post, apriori, pre_i, pre_q, m_i, m_q):
    """Extrinsic LLRs by enumerating every 2D label and its owning symbol.

    Label probability given the channel is the symbol posterior divided by the
    number of labels the symbol owns, times the a-priori probabilities of all
    other bits.
    """
    nq = len(pre_q)
    m = m_i + m_q
    labels = np.array(list(itertools.product([0, 1], repeat=m)), np.uint8)
    own_i = [prefix_owner(pre_i, lab[:m_i]) for lab in labels]
    own_q = [prefix_owner(pre_q, lab[m_i:]) for lab in labels]
    n_lab = np.array([2 ** (m_i - len(pre_i[a])) * 2 ** (m_q - len(pre_q[b])) for a, b in zip(own_i, own_q)])
    sym = np.array(own_i) * nq + np.array(own_q)
    out = np.zeros((post.shape[0], m))
    for k in range(post.shape[0]):
        pa0 = 1 / (1 + np.exp(-apriori[k]))  # P(bit = 0)
        pb = np.where(labels == 0, pa0, 1 - pa0)
        base = post[k, sym] / n_lab
        for j in range(m):
            others = np.prod(np.delete(pb, j, axis=1), axis=1)
            w = base * others
            out[k, j] = np.log(w[labels[:, j] == 0].sum()) - np.log(w[labels[:, j] == 1].sum())
    return out


def j_function_hermite(sigma, order=120):
    """MI of a consistent Gaussian LLR ``N(s^2/2, s^2)`` by Gauss-Hermite quadrature."""
    if sigma == 0:
        return 0.0
    x, w = np.polynomial.hermite.hermgauss(order)
    llr = sigma**2 / 2 + np.sqrt(2) * sigma * x
    return float(1 - np.sum(w * np.logaddexp(0, -llr)) / np.sqrt(np.pi) / np.log(2))


def gaussian_sqnr_db(bits, loading=4.0):
    """SQNR of a mid-rise quantizer on a unit Gaussian, full scale at ``loading`` sigma.

    Granular noise ``step^2/12`` inside the range plus the exact clipping
    error outside it, by quadrature.
    """
    from scipy.integrate import quad
    from scipy.stats import norm

    step = 2 * loading / 2**bits
    top = loading - step / 2
    granular = step**2 / 12 * (1 - 2 * norm.sf(loading))
    clip = 2 * quad(lambda x: (x - top) ** 2 * norm.pdf(x), loading, np.inf)[0]
    return float(-10 * np.log10(granular + clip))
