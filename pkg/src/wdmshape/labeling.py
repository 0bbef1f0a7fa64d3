"""Many-to-one bit labelings for dyadic PAM/QAM PMFs, mapping and soft demapping.

A 1D labeling gives each used PAM symbol a prefix of ``l_i`` bits (sign bit
first); the symbol owns all ``2**(m_1d - l_i)`` completions of its prefix, so
i.i.d. uniform bits produce it with probability ``2**-l_i``.  The trailing
``m_1d - l_i`` positions are ambiguous ("X") for that symbol.  LLRs are
``log P(b=0)/P(b=1)``: positive means bit 0 is more likely.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constellation import ConstellationPmf, pam_levels
from .shaping import dyadic_lengths, product_pmf

LLR_CLAMP = 50.0

# Right half-line code lengths (sign bit included), centre outward.
REFERENCE_HALF_LENGTHS = {
    32: (4, 4, 4, 4, 4, 5, 5, 5, 6, 6, 6, 6, 7, 7, 7, 7),
    16: (3, 3, 4, 4, 4, 5, 6, 6),
}


def gray_code(nbits: int) -> np.ndarray:
    """Binary-reflected Gray code as an ``(2**nbits, nbits)`` bit matrix (MSB first)."""
    v = np.arange(2**nbits)
    g = v ^ (v >> 1)
    return int_to_bits(g, nbits)


def int_to_bits(v, nbits: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    shifts = np.arange(nbits - 1, -1, -1)
    return ((v[..., None] >> shifts) & 1).astype(np.uint8)


def bits_to_int(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.int64)
    w = 1 << np.arange(b.shape[-1] - 1, -1, -1)
    return (b * w).sum(axis=-1)


@dataclass
class PamLabeling:
    """Prefix labels for one real dimension."""

    lengths: np.ndarray  # l_i including the sign bit, 0 if unused
    prefixes: list  # bit strings, "" if unused
    m: int

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=int)
        lut = np.full(2**self.m, -1, dtype=np.int64)
        for s, (l, pre) in enumerate(zip(self.lengths, self.prefixes)):
            if l == 0:
                continue
            if len(pre) != l:
                raise ValueError(f"symbol {s}: prefix {pre!r} has length {len(pre)} != {l}")
            base = int(pre, 2) << (self.m - l)
            blk = lut[base: base + 2 ** (self.m - l)]
            if np.any(blk >= 0):
                raise ValueError(f"symbol {s}: prefix {pre!r} is not prefix-free")
            blk[:] = s
        if np.any(lut < 0):
            raise ValueError(f"prefix code is incomplete (Kraft sum {self.kraft():.6g} < 1)")
        self.lut = lut

    @property
    def n(self) -> int:
        return self.lengths.size

    def kraft(self) -> float:
        l = self.lengths[self.lengths > 0]
        return float(np.sum(2.0 ** -l))

    def pmf(self) -> np.ndarray:
        return np.where(self.lengths > 0, 2.0 ** -self.lengths.astype(float), 0.0)

    def label_bits(self) -> np.ndarray:
        return int_to_bits(np.arange(2**self.m), self.m)

    def ambiguity(self) -> np.ndarray:
        """Probability that each bit position is ambiguous for the sent symbol."""
        p = self.pmf()
        return np.array([p[(self.lengths > 0) & (self.lengths <= j)].sum() for j in range(self.m)])

    def systematic_positions(self) -> np.ndarray:
        """Positions unique for every used symbol (sign bit and shortest-prefix bits)."""
        lmin = self.lengths[self.lengths > 0].min()
        return np.arange(lmin)

    def mirror_ok(self) -> bool:
        n = self.n
        for s in range(n // 2):
            r = n - 1 - s
            if self.lengths[s] != self.lengths[r]:
                return False
            if self.lengths[s] == 0:
                continue
            a, b = self.prefixes[s], self.prefixes[r]
            if a[0] == b[0] or a[1:] != b[1:]:
                return False
        return True

    def gray_violations(self) -> int:
        """Adjacent used-symbol pairs whose prefixes differ in more than one common bit."""
        used = [p for p in self.prefixes if p]
        bad = 0
        for a, b in zip(used[:-1], used[1:]):
            k = min(len(a), len(b))
            if sum(x != y for x, y in zip(a[:k], b[:k])) > 1:
                bad += 1
        return bad


def _half_prefixes_gray(h):
    """Aligned reflected-Gray blocks; optimal when ``h`` is non-decreasing."""
    depth = max(h)
    g = gray_code(depth)
    out, c = [], 0
    for l in h:
        out.append("".join(map(str, g[c][:l])))
        c += 2 ** (depth - l)
    return out


def _half_prefixes_search(h, node_limit=200_000):
    """Branch-and-bound over prefix assignments minimising Gray violations."""
    n = len(h)
    best = {"cost": None, "codes": None}
    nodes = [0]

    def ok(code, used):
        return all(not (u.startswith(code) or code.startswith(u)) for u in used)

    def viol(a, b):
        k = min(len(a), len(b))
        return sum(x != y for x, y in zip(a[:k], b[:k])) > 1

    def rec(i, used, cost):
        nodes[0] += 1
        if nodes[0] > node_limit:
            return
        if best["cost"] is not None and cost >= best["cost"]:
            return
        if i == n:
            best["cost"], best["codes"] = cost, list(used)
            return
        for v in range(2 ** h[i]):
            code = format(v, f"0{h[i]}b")
            if not ok(code, used):
                continue
            c = cost + (viol(used[-1], code) if used else 0)
            rec(i + 1, used + [code], c)

    rec(0, [], 0)
    if best["codes"] is None:
        raise ValueError("no prefix assignment found for the given lengths")
    return best["codes"]


def build_labeling_1d(d) -> PamLabeling:
    """Labeling of a symmetric dyadic PAM PMF (mirror symmetric, sign bit first)."""
    d = np.asarray(d, float)
    n = d.size
    if n % 2:
        raise ValueError("PAM labeling needs an even number of points")
    if abs(d.sum() - 1) > 1e-9:
        raise ValueError(f"PMF sums to {d.sum()}")
    if not np.allclose(d, d[::-1], atol=0):
        raise ValueError("PMF is not symmetric about 0")
    lengths = dyadic_lengths(d)
    right = lengths[n // 2:]
    used = np.flatnonzero(right > 0)
    h = [int(right[i]) - 1 for i in used]
    if any(x < 0 for x in h) or abs(sum(2.0 ** -x for x in h) - 1) > 1e-12:
        raise ValueError("half-line lengths violate the Kraft equality")
    m = int(lengths.max())
    if all(h[i] == 0 for i in range(len(h))):
        codes = [""]
    elif all(a <= b for a, b in zip(h[:-1], h[1:])):
        codes = _half_prefixes_gray(h)
    else:
        codes = _half_prefixes_search(h)
    prefixes = [""] * n
    for c, i in zip(codes, used):
        prefixes[n // 2 + i] = "0" + c
        prefixes[n // 2 - 1 - i] = "1" + c
    return PamLabeling(lengths, prefixes, m)


@dataclass
class LabelingTable:
    """Two independent 1D labelings; a 2D label is the I bits followed by the Q bits."""

    dim_i: PamLabeling
    dim_q: PamLabeling

    @property
    def m(self) -> int:
        return self.dim_i.m + self.dim_q.m

    @property
    def n_points(self) -> int:
        return self.dim_i.n * self.dim_q.n

    def pmf(self, alpha: float | None = None) -> ConstellationPmf:
        p = product_pmf(self.dim_i.pmf(), self.dim_q.pmf())
        return p.with_power(1.0) if alpha is None else ConstellationPmf(p.points, p.probabilities, alpha)

    def is_bijective(self) -> bool:
        return 2**self.m == self.n_points and np.all(self.dim_i.lengths == self.dim_i.m) \
            and np.all(self.dim_q.lengths == self.dim_q.m)

    def position_order(self) -> np.ndarray:
        """Label positions sorted by increasing ambiguity (stable; I before Q on ties)."""
        amb = np.concatenate([self.dim_i.ambiguity(), self.dim_q.ambiguity()])
        return np.argsort(amb, kind="stable")

    def systematic_positions(self) -> np.ndarray:
        return np.concatenate([self.dim_i.systematic_positions(),
                               self.dim_i.m + self.dim_q.systematic_positions()])

    def ambiguity(self) -> np.ndarray:
        return np.concatenate([self.dim_i.ambiguity(), self.dim_q.ambiguity()])


def build_labeling(dyadic_1d_pmf, dyadic_q_pmf=None) -> LabelingTable:
    """Labeling table from dyadic I (and optionally Q) marginals."""
    li = build_labeling_1d(dyadic_1d_pmf)
    lq = li if dyadic_q_pmf is None else build_labeling_1d(dyadic_q_pmf)
    return LabelingTable(li, lq)


def reference_pam_pmf(n: int) -> np.ndarray:
    """Built-in shaped dyadic PAM marginal (32PAM: m=7 per dimension, 16PAM: m=6)."""
    half = np.asarray(REFERENCE_HALF_LENGTHS[n], float)
    l = np.concatenate([half[::-1], half])
    return 2.0 ** -l


def named_labeling(name: str) -> LabelingTable:
    """``64qam``/``256qam``/``1024qam`` (uniform Gray) or ``256qam-shaped``/``1024qam-shaped``."""
    key = name.lower()
    shaped = key.endswith("-shaped")
    order = int(key.replace("-shaped", "").replace("qam", ""))
    n = int(round(np.sqrt(order)))
    if n * n != order:
        raise ValueError(f"unknown constellation {name!r}")
    if shaped:
        if n not in REFERENCE_HALF_LENGTHS:
            raise ValueError(f"no built-in shaped PMF for {name!r}")
        d = reference_pam_pmf(n)
    else:
        d = np.full(n, 1.0 / n)
    return build_labeling(d)


# --- mapping ------------------------------------------------------------------

def map_bits(bits, table: LabelingTable) -> np.ndarray:
    """Map a flat bit array (length divisible by ``m``) to QAM point indices."""
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    m = table.m
    if bits.size % m:
        raise ValueError(f"bit length {bits.size} not divisible by m={m}")
    b = bits.reshape(-1, m)
    mi = table.dim_i.m
    si = table.dim_i.lut[bits_to_int(b[:, :mi])]
    sq = table.dim_q.lut[bits_to_int(b[:, mi:])]
    return si * table.dim_q.n + sq


def _label_log_weights(la0, la1, bits):
    """``sum_j log a(label_j)`` for every label, shape ``(K, 2**m1d)``."""
    return la0 @ (1.0 - bits.T) + la1 @ bits.T


def _shifted_exp(x):
    """``exp(x - rowmax)`` and the row maxima (rows of all ``-inf`` give zeros)."""
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.exp(x - m), m


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _group_lse(x, groups, n_groups):
    """Log-sum-exp of ``x[:, l]`` over labels grouped by symbol."""
    onehot = np.zeros((groups.size, n_groups))
    onehot[np.arange(groups.size), groups] = 1.0
    e, m = _shifted_exp(x)
    return _log(e @ onehot) + m


def soft_demap(posteriors, apriori, table: LabelingTable, *, log_domain=False) -> np.ndarray:
    """Extrinsic bit LLRs from symbol posteriors and optional a-priori bit LLRs.

    Each label ``L`` carries weight ``q(x(L)|y) / n_labels(x(L)) * prod_j a(L_j)``,
    summing over all labels owned by a symbol; the own-bit a-priori term is
    excluded, so the result is already extrinsic.  Output shape ``(K, m)``,
    clamped to ``±50``.
    """
    ni, nq = table.dim_i.n, table.dim_q.n
    if log_domain:
        logq = np.asarray(posteriors, float)
    else:
        with np.errstate(divide="ignore"):
            logq = np.log(np.asarray(posteriors, float))
    k = logq.shape[0]
    logq = logq.reshape(k, ni, nq)
    m, mi = table.m, table.dim_i.m
    if apriori is None:
        apriori = np.zeros((k, m))
    apriori = np.clip(np.asarray(apriori, float).reshape(k, m), -LLR_CLAMP, LLR_CLAMP)
    la0 = -np.logaddexp(0.0, -apriori)
    la1 = -np.logaddexp(0.0, apriori)

    dims = [table.dim_i, table.dim_q]
    sl = [slice(0, mi), slice(mi, m)]
    lab = []
    for d, s in zip(dims, sl):
        bits = d.label_bits().astype(float)
        lw = _label_log_weights(la0[:, s], la1[:, s], bits)
        with np.errstate(divide="ignore"):
            logn = np.where(d.lengths > 0, (d.m - d.lengths) * np.log(2.0), np.inf)
        agg = _group_lse(lw, d.lut, d.n) - logn
        lab.append((d, bits, lw, logn, agg))

    out = np.empty((k, m))
    with np.errstate(invalid="ignore"):
        # I bits marginalise Q through its per-symbol label aggregate and vice versa
        eq, mq = _shifted_exp(logq.reshape(k, -1))
        eq = eq.reshape(k, ni, nq)
        ei, mi_ = _shifted_exp(lab[0][4])
        eqq, mqq = _shifted_exp(lab[1][4])
        s_i = _log(np.einsum("kab,kb->ka", eq, eqq)) + mq + mqq
        s_q = _log(np.einsum("kab,ka->kb", eq, ei)) + mq + mi_
        for (d, bits, lw, logn, _), other, s in zip(lab, (s_i, s_q), sl):
            t = other[:, d.lut] - logn[d.lut] + lw
            # the own-bit a-priori factor is constant within each half
            e, mt = _shifted_exp(t)
            num = _log(e @ (1.0 - bits)) + mt - la0[:, s]
            den = _log(e @ bits) + mt - la1[:, s]
            out[:, s] = num - den
    out = np.nan_to_num(out, nan=0.0, posinf=LLR_CLAMP, neginf=-LLR_CLAMP)
    return np.clip(out, -LLR_CLAMP, LLR_CLAMP)


# --- labeling file -------------------------------------------------------------

def write_labeling(path, table: LabelingTable) -> None:
    """Text file: ``# m_I``, ``# m_Q``, systematic flags, rows ``dim level l prefix``."""
    def flags(d):
        f = np.zeros(d.m, int)
        f[d.systematic_positions()] = 1
        return "".join(map(str, f))

    lines = [f"# m_I={table.dim_i.m}", f"# m_Q={table.dim_q.m}",
             f"# systematic_I={flags(table.dim_i)}", f"# systematic_Q={flags(table.dim_q)}",
             "# dim level l prefix"]
    for tag, d in (("I", table.dim_i), ("Q", table.dim_q)):
        for lv, l, pre in zip(pam_levels(d.n), d.lengths, d.prefixes):
            lines.append(f"{tag} {int(lv)} {int(l)} {pre if pre else '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


class LabelingFileError(ValueError):
    pass


def read_labeling(path) -> LabelingTable:
    """Parse and validate a labeling file; errors carry ``file:line`` diagnostics."""
    hdr = {}
    rows = {"I": [], "Q": []}
    last_line = {"I": 0, "Q": 0}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                hdr[k.strip()] = (v.strip(), ln)
            continue
        parts = s.split()
        if len(parts) != 4 or parts[0] not in rows:
            raise LabelingFileError(f"{path}:{ln}: malformed row {s!r}")
        try:
            lv, l = int(parts[1]), int(parts[2])
        except ValueError:
            raise LabelingFileError(f"{path}:{ln}: non-integer level/length") from None
        pre = "" if parts[3] == "-" else parts[3]
        if pre and (set(pre) - {"0", "1"} or len(pre) != l):
            raise LabelingFileError(f"{path}:{ln}: prefix {parts[3]!r} inconsistent with l={l}")
        rows[parts[0]].append((lv, l, pre, ln))
        last_line[parts[0]] = ln
    dims = []
    for tag in ("I", "Q"):
        key = f"m_{tag}"
        if key not in hdr:
            raise LabelingFileError(f"{path}: missing header '{key}'")
        m = int(hdr[key][0])
        r = sorted(rows[tag])
        if not r:
            raise LabelingFileError(f"{path}: no rows for dimension {tag}")
        lengths = np.array([x[1] for x in r])
        used = lengths[lengths > 0]
        kraft = float(np.sum(2.0 ** -used.astype(float)))
        if abs(kraft - 1) > 1e-12:
            raise LabelingFileError(
                f"{path}:{last_line[tag]}: Kraft sum for dimension {tag} is {kraft:.6g} (must be 1)")
        if used.max() != m:
            raise LabelingFileError(f"{path}:{hdr[key][1]}: {key}={m} but longest prefix is {used.max()}")
        try:
            d = PamLabeling(lengths, [x[2] for x in r], m)
        except ValueError as e:
            raise LabelingFileError(f"{path}:{last_line[tag]}: {e}") from None
        if not d.mirror_ok():
            raise LabelingFileError(f"{path}:{last_line[tag]}: dimension {tag} is not mirror symmetric")
        dims.append(d)
    return LabelingTable(*dims)
