"""Transmitter framing/pulse shaping and the coherent receiver chain.

All filters are applied circularly in the frequency domain with zero phase,
so symbol ``k`` of a stream at ``sps`` samples per symbol sits at sample
``k * sps``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.fft as sfft
from scipy.optimize import minimize_scalar

from .air import AuxChannelModel
from .channels import LinkConfig, angular_frequencies
from .constellation import ConstellationPmf


# --- framing ------------------------------------------------------------------

def zadoff_chu(length: int, root: int) -> np.ndarray:
    """Odd-length Zadoff-Chu sequence ``exp(-j pi u n (n+1) / N)``."""
    if length % 2 == 0:
        raise ValueError("Zadoff-Chu length must be odd")
    if np.gcd(root, length) != 1:
        raise ValueError("root must be coprime with the length")
    n = np.arange(length)
    return np.exp(-1j * np.pi * root * n * (n + 1) / length)


@dataclass
class FrameConfig:
    pilot_rate: float = 0.02
    block_symbols: int = 6000
    n_blocks: int = 18
    zc_length: int = 255
    zc_root: int = 26
    guard_symbols: int = 256

    def __post_init__(self):
        npil = self.pilot_rate * self.block_symbols
        if abs(npil - round(npil)) > 1e-9:
            raise ValueError("pilot_rate * block_symbols must be an integer")
        if self.pilot_rate > 0 and self.block_symbols % int(round(npil)):
            raise ValueError("pilots must divide the block evenly")

    @property
    def pilots_per_block(self) -> int:
        return int(round(self.pilot_rate * self.block_symbols))

    @property
    def pilot_spacing(self) -> int:
        return self.block_symbols // self.pilots_per_block if self.pilots_per_block else 0

    @property
    def payload_per_block(self) -> int:
        return self.block_symbols - self.pilots_per_block

    @property
    def zc_roots(self) -> tuple:
        """Preamble roots for the two polarizations."""
        r2 = self.zc_root + 1
        while np.gcd(r2, self.zc_length) != 1:
            r2 += 1
        return self.zc_root, r2

    @property
    def data_start(self) -> int:
        return self.guard_symbols + self.zc_length

    @property
    def total_symbols(self) -> int:
        """Frame length with the trailing guard stretched to a multiple of 256 (FFT-friendly sizes)."""
        n = self.data_start + self.n_blocks * self.block_symbols + self.guard_symbols
        return -(-n // 256) * 256


@dataclass
class SymbolFrame:
    """Framed dual-pol symbol stream and the index bookkeeping the receiver needs."""

    symbols: np.ndarray  # (n_pol, total)
    config: FrameConfig
    pilot_index: np.ndarray  # absolute positions
    pilot_values: np.ndarray  # (n_pol, n_pilots)
    data_index: np.ndarray  # absolute positions of payload symbols
    preamble: np.ndarray  # (n_pol, zc_length)

    def block_slices(self):
        """Per block: (data positions, pilot positions) as absolute indices."""
        c = self.config
        out = []
        for b in range(c.n_blocks):
            lo = c.data_start + b * c.block_symbols
            hi = lo + c.block_symbols
            d = self.data_index[(self.data_index >= lo) & (self.data_index < hi)]
            p = self.pilot_index[(self.pilot_index >= lo) & (self.pilot_index < hi)]
            out.append((d, p))
        return out

    def sidecar(self) -> str:
        c = self.config
        return "\n".join([
            f"pilot_rate={c.pilot_rate}", f"block_symbols={c.block_symbols}", f"n_blocks={c.n_blocks}",
            f"zc_length={c.zc_length}", f"zc_roots={c.zc_roots[0]},{c.zc_roots[1]}",
            f"guard_symbols={c.guard_symbols}", f"data_start={c.data_start}",
            "pilot_index=" + ",".join(map(str, self.pilot_index)),
        ]) + "\n"


def qpsk(n_pol: int, n: int, rng) -> np.ndarray:
    b = rng.integers(0, 2, (2, n_pol, n))
    return ((1 - 2 * b[0]) + 1j * (1 - 2 * b[1])) / np.sqrt(2)


def build_frame(payload, cfg: FrameConfig, rng_seed) -> SymbolFrame:
    """Insert uniformly spaced QPSK pilots into each block and prepend a ZC preamble.

    ``payload`` has shape ``(n_pol, n_blocks * payload_per_block)``.  Guard
    regions carry random unit-power QPSK.
    """
    payload = np.atleast_2d(np.asarray(payload, complex))
    n_pol = payload.shape[0]
    need = cfg.n_blocks * cfg.payload_per_block
    if payload.shape[1] != need:
        raise ValueError(f"payload length {payload.shape[1]} != {need}")
    rng = np.random.default_rng(rng_seed)
    sym = qpsk(n_pol, cfg.total_symbols, rng)
    pre = np.stack([zadoff_chu(cfg.zc_length, r) for r in cfg.zc_roots[:n_pol]])
    sym[:, cfg.guard_symbols: cfg.data_start] = pre
    blk = np.arange(cfg.block_symbols)
    is_pilot = np.zeros(cfg.block_symbols, bool)
    if cfg.pilots_per_block:
        is_pilot[:: cfg.pilot_spacing] = True
    starts = cfg.data_start + cfg.block_symbols * np.arange(cfg.n_blocks)
    pilot_index = (starts[:, None] + blk[is_pilot][None, :]).ravel()
    data_index = (starts[:, None] + blk[~is_pilot][None, :]).ravel()
    pv = qpsk(n_pol, pilot_index.size, rng)
    sym[:, pilot_index] = pv
    sym[:, data_index] = payload
    return SymbolFrame(sym, cfg, pilot_index, pv, data_index, pre)


# --- pulse shaping --------------------------------------------------------------

def raised_cosine_spectrum(f, rolloff):
    """Raised-cosine spectrum, ``f`` in units of the symbol rate, unit DC value."""
    a = np.abs(np.asarray(f, float))
    lo, hi = (1 - rolloff) / 2, (1 + rolloff) / 2
    out = np.where(a <= lo, 1.0, 0.0)
    if rolloff > 0:
        tr = (a > lo) & (a <= hi)
        out = np.where(tr, 0.5 * (1 + np.cos(np.pi / rolloff * (a - lo))), out)
    return out


def rrc_shape(symbols, rolloff: float, sps: int) -> np.ndarray:
    """Upsample by ``sps`` and apply a square-root raised-cosine filter.

    Waveform power equals symbol power; cascading with :func:`matched_filter`
    gives a raised-cosine pulse with unit gain at the symbol instants.
    """
    s = np.atleast_2d(symbols)
    if sps < 2 * (1 + rolloff) - 1e-12 and sps != 1:
        raise ValueError("sps must be >= 2(1+rolloff)")
    n = s.shape[1] * sps
    up = np.zeros((s.shape[0], n), dtype=np.result_type(s.dtype, np.complex64))
    up[:, ::sps] = s
    h = sps * np.sqrt(raised_cosine_spectrum(sfft.fftfreq(n, 1.0 / sps), rolloff))
    return sfft.ifft(sfft.fft(up, axis=1) * h.astype(up.real.dtype), axis=1)


def matched_filter(waveform, rolloff: float, sps: int) -> np.ndarray:
    """Square-root raised-cosine receive filter (rate unchanged)."""
    w = np.atleast_2d(waveform)
    h = np.sqrt(raised_cosine_spectrum(sfft.fftfreq(w.shape[1], 1.0 / sps), rolloff))
    return sfft.ifft(sfft.fft(w, axis=1) * h.astype(w.real.dtype), axis=1)


def matched_filter_downsample(waveform, rolloff: float, sps_in: int, sps_out: int = 2) -> np.ndarray:
    """Matched filter then resample from ``sps_in`` to ``sps_out`` samples per symbol."""
    from .channels import resample_spectrum

    w = matched_filter(waveform, rolloff, sps_in)
    if sps_in == sps_out:
        return w
    n = w.shape[1]
    n_out = n * sps_out // sps_in
    return resample_spectrum(sfft.fft(w, axis=1), n_out) * (n_out / n)


def evm_db(ref, x) -> float:
    ref, x = np.ravel(ref), np.ravel(x)
    return float(10 * np.log10(np.mean(np.abs(x - ref) ** 2) / np.mean(np.abs(ref) ** 2)))


# --- ADC ----------------------------------------------------------------------

def quantize(waveform, adc_bits: int, full_scale: float | None = None) -> np.ndarray:
    """Uniform mid-rise quantizer per real dimension, full scale at 4 sigma."""
    if adc_bits < 2:
        raise ValueError("adc_bits must be >= 2")
    x = np.asarray(waveform)

    def q(v):
        fs = 4 * np.std(v) if full_scale is None else full_scale
        if fs == 0:
            return v
        step = 2 * fs / 2**adc_bits
        k = np.clip(np.floor(v / step), -(2 ** (adc_bits - 1)), 2 ** (adc_bits - 1) - 1)
        return (k + 0.5) * step

    if np.iscomplexobj(x):
        return (q(x.real) + 1j * q(x.imag)).astype(x.dtype)
    return q(x)


# --- synchronization ------------------------------------------------------------

class SyncError(RuntimeError):
    pass


def frame_sync(rx, references, sps: int = 2, symbol_rate: float = 1.0, max_offset_hz: float = 0.0,
               min_pslr: float = 3.0, pilot_offsets=None, pilot_values=None) -> int:
    """Sample offset of the preamble start in ``rx`` (shape ``(n_pol, n)``).

    Correlation magnitudes against each reference are combined noncoherently
    over polarizations.  With ``max_offset_hz > 0`` a grid of frequency
    hypotheses keeps the correlation coherent under a carrier offset.  A
    Zadoff-Chu preamble trades delay against frequency, so each hypothesis
    peaks at a slightly different lag; when ``pilot_offsets`` (symbol offsets
    of pilots from the preamble start) and ``pilot_values`` are given, the
    candidate lag whose pilots add up most coherently wins.  Otherwise the
    strongest peak is returned.
    """
    rx = np.atleast_2d(rx)
    refs = np.atleast_2d(references)
    n = rx.shape[1]
    lz = refs.shape[1]
    if max_offset_hz > 0:
        df = symbol_rate / (8.0 * lz)
        nh = int(np.ceil(max_offset_hz / df))
        hyps = np.arange(-nh, nh + 1) * df
    else:
        hyps = np.zeros(1)
    rspec = sfft.fft(rx, axis=1)
    t = np.arange(lz) / symbol_rate
    cands = []
    for f in hyps:
        acc = np.zeros(n)
        for z in refs:
            up = np.zeros(n, complex)
            up[: lz * sps: sps] = z * np.exp(2j * np.pi * f * t)
            c = sfft.ifft(rspec * np.conj(sfft.fft(up))[None, :], axis=1)
            acc += np.sum(np.abs(c) ** 2, axis=0)
        mag = np.sqrt(acc)
        pk = int(np.argmax(mag))
        side = mag.copy()
        side[np.arange(pk - 2 * sps, pk + 2 * sps + 1) % n] = 0
        cands.append((mag[pk], pk, mag[pk] / max(side.max(), 1e-300)))
    if pilot_offsets is not None and len(cands) > 1:
        po = np.asarray(pilot_offsets)
        score = []
        for _, pk, _ in cands:
            pos = (pk + sps * po) % n
            score.append(_pilot_line_strength(rx[:, pos], pilot_values))
        lag = cands[int(np.argmax(score))][1]
        best = max(c for c in cands if c[1] == lag)
    else:
        best = max(cands)
    _, pk, pslr = best
    if pslr < min_pslr:
        raise SyncError(f"sync not found (peak-to-side-lobe ratio {pslr:.2f} < {min_pslr})")
    return pk


def _pilot_line_strength(r, pv, oversample: int = 4) -> float:
    z = np.atleast_2d(r) * np.conj(np.atleast_2d(pv))
    nfft = int(2 ** np.ceil(np.log2(z.shape[1] * oversample)))
    return float(np.max(np.sum(np.abs(sfft.fft(z, nfft, axis=1)) ** 2, axis=0)))


def cd_compensate(stream, sample_rate: float, link: LinkConfig, distance_km: float) -> np.ndarray:
    """Undo dispersion accumulated over ``distance_km``: multiply by ``exp(-j beta2/2 w^2 z)``."""
    s = np.atleast_2d(stream)
    if distance_km == 0:
        return s.copy()
    w = angular_frequencies(s.shape[1], sample_rate)
    h = np.exp(-0.5j * link.beta2 * w**2 * distance_km * 1e3).astype(s.dtype)
    return sfft.ifft(sfft.fft(s, axis=1) * h, axis=1)


@dataclass
class FoEstimate:
    offset_hz: float
    at_boundary: bool


def estimate_frequency_offset(rx_at_pilots, pilot_values, pilot_spacing_s: float, oversample: int = 16) -> FoEstimate:
    """ML carrier offset from uniformly spaced pilots.

    Maximises ``|sum_k r_k conj(p_k) exp(-j 2 pi f t_k)|^2`` (summed over
    polarizations) on a zero-padded FFT grid, refined by a bounded scalar
    search of the exact periodogram around the peak bin.
    """
    z = np.atleast_2d(rx_at_pilots) * np.conj(np.atleast_2d(pilot_values))
    k = z.shape[1]
    nfft = int(2 ** np.ceil(np.log2(k * oversample)))
    per = np.sum(np.abs(sfft.fft(z, nfft, axis=1)) ** 2, axis=0)
    i = int(np.argmax(per))
    fr = sfft.fftfreq(nfft, pilot_spacing_s)
    step = fr[1]
    kk = np.arange(k)

    def neg_per(f):
        e = np.exp(-2j * np.pi * f * pilot_spacing_s * kk)
        return -float(np.sum(np.abs(z @ e) ** 2))

    f = minimize_scalar(neg_per, bounds=(fr[i] - step, fr[i] + step), method="bounded",
                        options={"xatol": step * 1e-6}).x
    nyq = 0.5 / pilot_spacing_s
    return FoEstimate(float(f), bool(abs(f) > nyq - 2 * step))


def freq_offset_correct(stream, sps: int, symbol_rate: float, pilot_index, pilot_values):
    """Estimate the offset on pilot instants of a synchronized stream and derotate it."""
    s = np.atleast_2d(stream)
    pilot_index = np.asarray(pilot_index)
    spacing = np.diff(pilot_index)
    if spacing.size and np.any(spacing != spacing[0]):
        raise ValueError("pilots must be uniformly spaced")
    ts = spacing[0] / symbol_rate
    est = estimate_frequency_offset(s[:, pilot_index * sps], pilot_values, ts)
    n = np.arange(s.shape[1])
    rot = np.exp(-2j * np.pi * est.offset_hz * (n / (sps * symbol_rate) - pilot_index[0] / symbol_rate))
    return s * rot.astype(s.dtype), est


# --- pilot CMA ------------------------------------------------------------------

class EqualizerDivergence(RuntimeError):
    pass


@nb.njit(cache=True)
def _cma_train(x, pilot_pos, taps, mu, passes, radius):
    """Butterfly CMA updated at pilot instants only; returns tap snapshots."""
    ntap = taps.shape[2]
    c = ntap // 2
    n = x.shape[1]
    npil = pilot_pos.size
    snaps = np.empty((npil, 2, 2, ntap), np.complex128)
    h = taps.copy()
    for p in range(passes):
        for k in range(npil):
            pos = 2 * pilot_pos[k]
            for o in range(2):
                y = 0j
                for i in range(2):
                    for t in range(ntap):
                        j = pos + t - c
                        if 0 <= j < n:
                            y += h[o, i, t] * x[i, j]
                e = y * (radius - (y.real * y.real + y.imag * y.imag))
                for i in range(2):
                    for t in range(ntap):
                        j = pos + t - c
                        if 0 <= j < n:
                            h[o, i, t] += mu * e * np.conj(x[i, j])
            nrm = 0.0
            for o in range(2):
                for i in range(2):
                    for t in range(ntap):
                        nrm += abs(h[o, i, t]) ** 2
            if not nrm < 1e6:
                return snaps, False
            if p == passes - 1:
                snaps[k] = h
    return snaps, True


@nb.njit(cache=True)
def _cma_apply(x, pilot_pos, snaps, n_sym):
    ntap = snaps.shape[3]
    c = ntap // 2
    n = x.shape[1]
    npil = pilot_pos.size
    out = np.zeros((2, n_sym), np.complex128)
    seg = 0
    for k in range(n_sym):
        while seg < npil - 1 and pilot_pos[seg + 1] <= k:
            seg += 1
        if k <= pilot_pos[0]:
            w = 0.0
            a = 0
            b = 0
        elif seg >= npil - 1:
            w = 0.0
            a = npil - 1
            b = npil - 1
        else:
            a = seg
            b = seg + 1
            w = (k - pilot_pos[a]) / (pilot_pos[b] - pilot_pos[a])
        pos = 2 * k
        for o in range(2):
            y = 0j
            for i in range(2):
                for t in range(ntap):
                    j = pos + t - c
                    if 0 <= j < n:
                        h = (1 - w) * snaps[a, o, i, t] + w * snaps[b, o, i, t]
                        y += h * x[i, j]
            out[o, k] = y
    return out


def cma_equalize(stream, pilot_index, n_taps: int = 13, step_size: float = 1e-3, passes: int = 3):
    """2x2 butterfly CMA trained on pilot instants, taps interpolated linearly.

    Input is a 2-sample/symbol dual-pol stream aligned so symbol ``k`` sits at
    sample ``2k``; output is one sample per symbol.  Returns
    ``(symbols, taps_at_pilots)``.
    """
    x = np.ascontiguousarray(np.atleast_2d(stream), dtype=np.complex128)
    if x.shape[0] != 2:
        raise ValueError("CMA needs two polarizations")
    if n_taps % 2 == 0:
        raise ValueError("n_taps must be odd")
    pil = np.asarray(pilot_index, np.int64)
    h0 = np.zeros((2, 2, n_taps), np.complex128)
    h0[0, 0, n_taps // 2] = h0[1, 1, n_taps // 2] = 1.0
    snaps, ok = _cma_train(x, pil, h0, step_size, passes, 1.0)
    if not ok:
        raise EqualizerDivergence(f"CMA diverged (tap norm > 1e3); reduce step_size below {step_size:g}")
    return _cma_apply(x, pil, snaps, x.shape[1] // 2), snaps


def pilot_align(symbols, pilot_index, pilot_values):
    """Resolve polarization swap and global phase per polarization using pilots."""
    y = np.atleast_2d(symbols)
    p = np.atleast_2d(pilot_values)
    c = y[:, pilot_index] @ np.conj(p).T  # c[a, b] = <y_a, p_b>
    if y.shape[0] == 2 and abs(c[0, 1]) + abs(c[1, 0]) > abs(c[0, 0]) + abs(c[1, 1]):
        y = y[::-1]
        c = c[::-1]
    ph = np.angle(np.diag(c))
    return y * np.exp(-1j * ph)[:, None]


def pilot_phase(symbols, pilot_index, pilot_values, smooth: int = 1):
    """Unwrapped pilot phase estimates, moving-averaged over ``2*smooth+1`` pilots."""
    y = np.atleast_2d(symbols)
    z = y[:, pilot_index] * np.conj(np.atleast_2d(pilot_values))
    if smooth > 0:
        k = np.ones(2 * smooth + 1)
        zs = np.stack([np.convolve(r, k, mode="same") for r in z])
    else:
        zs = z
    return np.unwrap(np.angle(zs), axis=1), np.unwrap(np.angle(z), axis=1)


def pilot_derotate(symbols, pilot_index, pilot_values, smooth: int = 1):
    """Remove the pilot phase trajectory, linearly interpolated between pilots."""
    y = np.atleast_2d(symbols)
    ph, _ = pilot_phase(y, pilot_index, pilot_values, smooth)
    n = np.arange(y.shape[1])
    traj = np.stack([np.interp(n, pilot_index, r) for r in ph])
    return y * np.exp(-1j * traj)


def wiener_variance_from_pilots(symbols, pilot_index, pilot_values, noise_var: float) -> float:
    """Per-symbol Wiener increment variance from first differences of pilot phases.

    Each raw pilot phase carries additive-noise variance about ``noise_var/2``,
    so differences carry ``noise_var`` on top of the phase-walk term.
    """
    _, raw = pilot_phase(symbols, pilot_index, pilot_values, smooth=0)
    spacing = np.diff(pilot_index)
    d = np.diff(raw, axis=1)
    ok = spacing == np.median(spacing)
    v = float(np.var(d[:, ok]))
    return max(0.0, (v - noise_var) / float(np.median(spacing)))


# --- phase tracking ----------------------------------------------------------------

@dataclass
class PhaseTrackerConfig:
    wiener_variance: float = 0.0
    grid_size: int = 64
    window_rad: float = 0.2
    neighbours: int = 2  # emission over a (2n+1)^2 block of nearest grid points
    posterior_floor: float = 1e-8  # phase cells below this relative weight are skipped

    def __post_init__(self):
        if self.wiener_variance < 0:
            raise ValueError("wiener_variance must be >= 0")
        if self.grid_size < 16:
            raise ValueError("grid_size must be >= 16")

    def grid(self) -> np.ndarray:
        g = np.linspace(-self.window_rad, self.window_rad, self.grid_size)
        if self.grid_size % 2 == 0:
            # keep zero on the grid
            g = np.linspace(-self.window_rad, self.window_rad, self.grid_size + 1)[:-1]
        return g


@nb.njit(cache=True)
def _gauss_logpdf(yr, yi, mr, mi, ia, ib, ic, lnorm):
    dr = yr - mr
    di = yi - mi
    return lnorm - 0.5 * (ia * dr * dr + 2 * ib * dr * di + ic * di * di)


@nb.njit(cache=True)
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + np.log(np.exp(a - m) + np.exp(b - m))


@nb.njit(cache=True)
def _track(y, is_pilot, pilot_val, grid, logk, lev_i, lev_q, logp, mr, mi, ia, ib, ic, ln,
           pil_var, nb_side, floor):
    n = y.size
    g = grid.size
    kw = (logk.size - 1) // 2
    nq = lev_q.size
    ni = lev_i.size
    m = logp.size
    cs = np.cos(grid)
    sn = np.sin(grid)
    emis = np.empty((n, g))
    for k in range(n):
        for j in range(g):
            yr = y[k].real * cs[j] + y[k].imag * sn[j]
            yi = y[k].imag * cs[j] - y[k].real * sn[j]
            if is_pilot[k]:
                dr = yr - pilot_val[k].real
                di = yi - pilot_val[k].imag
                emis[k, j] = -(dr * dr + di * di) / pil_var - np.log(np.pi * pil_var)
                continue
            # nearest grid levels
            bi = 0
            bd = 1e300
            for a in range(ni):
                d = abs(yr - lev_i[a])
                if d < bd:
                    bd = d
                    bi = a
            bq = 0
            bd = 1e300
            for a in range(nq):
                d = abs(yi - lev_q[a])
                if d < bd:
                    bd = d
                    bq = a
            acc = -np.inf
            for a in range(max(0, bi - nb_side), min(ni, bi + nb_side + 1)):
                for b in range(max(0, bq - nb_side), min(nq, bq + nb_side + 1)):
                    s = a * nq + b
                    if logp[s] == -np.inf:
                        continue
                    acc = _lse(acc, logp[s] + _gauss_logpdf(yr, yi, mr[s], mi[s], ia[s], ib[s], ic[s], ln[s]))
            emis[k, j] = acc
    # forward (predicted) and backward messages, log domain, normalized per step
    fwd = np.empty((n, g))
    bwd = np.empty((n, g))
    cur = np.full(g, -np.log(g))
    for k in range(n):
        fwd[k] = cur
        post = cur + emis[k]
        mx = post.max()
        nxt = np.full(g, -np.inf)
        for j in range(g):
            acc = -np.inf
            for d in range(-kw, kw + 1):
                jj = j + d
                if 0 <= jj < g:
                    acc = _lse(acc, post[jj] - mx + logk[d + kw])
            nxt[j] = acc
        cur = nxt
    cur = np.zeros(g)
    for k in range(n - 1, -1, -1):
        bwd[k] = cur
        v = cur + emis[k]
        mx = v.max()
        prv = np.full(g, -np.inf)
        for j in range(g):
            acc = -np.inf
            for d in range(-kw, kw + 1):
                jj = j + d
                if 0 <= jj < g:
                    acc = _lse(acc, v[jj] - mx + logk[d + kw])
            prv[j] = acc
        cur = prv
    # symbol posteriors integrating out the phase.  Every symbol is scored at
    # the MAP phase; the phase integral is evaluated exactly for symbols within
    # ``tail`` nats of the best one, the negligible tail keeps its MAP score.
    tail = 60.0
    out = np.full((n, m), -np.inf)
    w = np.empty(g)
    sel = np.empty(g, np.int64)
    lws = np.empty(g)
    buf = np.empty(g)
    lfloor = np.log(floor)
    for k in range(n):
        if is_pilot[k]:
            continue
        jbest = 0
        for j in range(g):
            w[j] = fwd[k, j] + bwd[k, j]
            if w[j] > w[jbest]:
                jbest = j
        mx = w[jbest]
        ns = 0
        lsum = 0.0
        for j in range(g):
            lw = w[j] - mx
            if lw >= lfloor:
                sel[ns] = j
                lws[ns] = lw
                lsum += np.exp(lw)
                ns += 1
        lsum = np.log(lsum)
        yr0 = y[k].real * cs[jbest] + y[k].imag * sn[jbest]
        yi0 = y[k].imag * cs[jbest] - y[k].real * sn[jbest]
        top = -np.inf
        for s in range(m):
            if logp[s] == -np.inf:
                continue
            v = logp[s] + _gauss_logpdf(yr0, yi0, mr[s], mi[s], ia[s], ib[s], ic[s], ln[s])
            out[k, s] = v + lsum
            top = max(top, v)
        for s in range(m):
            if logp[s] == -np.inf or out[k, s] - lsum < top - tail:
                continue
            vm = -np.inf
            for r in range(ns):
                j = sel[r]
                yr = y[k].real * cs[j] + y[k].imag * sn[j]
                yi = y[k].imag * cs[j] - y[k].real * sn[j]
                buf[r] = lws[r] + _gauss_logpdf(yr, yi, mr[s], mi[s], ia[s], ib[s], ic[s], ln[s])
                vm = max(vm, buf[r])
            acc = 0.0
            for r in range(ns):
                acc += np.exp(buf[r] - vm)
            out[k, s] = logp[s] + vm + np.log(acc)
        top = -np.inf
        for s in range(m):
            top = max(top, out[k, s])
        tot = 0.0
        for s in range(m):
            if out[k, s] != -np.inf:
                tot += np.exp(out[k, s] - top)
        ltot = top + np.log(tot)
        for s in range(m):
            out[k, s] -= ltot
    return out


def wiener_kernel(variance: float, grid: np.ndarray) -> np.ndarray:
    """Log transition weights over grid offsets ``-w..w`` (normalised)."""
    cell = grid[1] - grid[0]
    if variance > cell**2:
        raise ValueError(f"phase grid too coarse: Wiener variance {variance:.3g} > cell^2 {cell**2:.3g}")
    if variance == 0:
        return np.zeros(1)
    w = max(1, int(np.ceil(6 * np.sqrt(variance) / cell)))
    d = np.arange(-w, w + 1) * cell
    lk = -0.5 * d**2 / variance
    return lk - np.log(np.sum(np.exp(lk)))


def phase_track(symbols, pmf: ConstellationPmf, model: AuxChannelModel, cfg: PhaseTrackerConfig,
                is_pilot=None, pilot_values=None, pilot_noise_var=None, tx_index=None):
    """Forward-backward phase tracking on a discretised Wiener phase grid.

    ``symbols`` is one block of one polarization after coarse pilot
    derotation; pilot instants (if given) enter with a known-symbol Gaussian
    emission.  Returns ``(log_posteriors, cond_entropy)`` where rows of
    ``log_posteriors`` correspond to non-pilot symbols and ``cond_entropy``
    is ``-mean log2 q(x_k | y)`` when ``tx_index`` is supplied (else None).
    """
    y = np.ascontiguousarray(np.ravel(symbols), dtype=np.complex128)
    n = y.size
    if is_pilot is None:
        is_pilot = np.zeros(n, bool)
        pilot_values = np.zeros(0, complex)
    pv = np.zeros(n, complex)
    pv[is_pilot] = np.ravel(pilot_values)
    grid = cfg.grid()
    logk = wiener_kernel(cfg.wiener_variance, grid)
    if pilot_noise_var is None:
        pilot_noise_var = float(np.mean(np.trace(model.covs, axis1=1, axis2=2)))
    ia, ib, ic, ln = model.gaussian_terms()
    nlev = int(round(np.sqrt(len(pmf))))
    lev = np.unique(pmf.scaled_points.real)
    with np.errstate(divide="ignore"):
        logp = np.log(pmf.probabilities)
    out = _track(y, np.asarray(is_pilot, bool), pv, grid, logk, lev, lev, logp,
                 model.means[:, 0].copy(), model.means[:, 1].copy(), ia, ib, ic, ln,
                 float(pilot_noise_var), cfg.neighbours, cfg.posterior_floor)
    assert lev.size == nlev
    out = out[~np.asarray(is_pilot, bool)]
    h = None
    if tx_index is not None:
        h = float(-np.mean(out[np.arange(out.shape[0]), np.asarray(tx_index)]) / np.log(2))
    return out, h


# --- SNR ----------------------------------------------------------------------------

@dataclass
class SnrEstimate:
    snr_db: float
    saturated: bool


def snr_estimate(tx, rx) -> SnrEstimate:
    """Data-aided SNR: LS complex gain projection vs residual power."""
    tx, rx = np.ravel(tx), np.ravel(rx)
    g = np.vdot(tx, rx) / np.vdot(tx, tx)
    res = rx - g * tx
    ps = abs(g) ** 2 * np.mean(np.abs(tx) ** 2)
    pn = np.mean(np.abs(res) ** 2)
    snr = np.inf if pn == 0 else 10 * np.log10(ps / pn)
    return SnrEstimate(float(min(snr, 60.0)) if snr > 60 else float(snr), bool(snr > 60))


# --- impairments ------------------------------------------------------------------

@dataclass
class ImpairmentConfig:
    frequency_offset: float = 50e6
    laser_linewidth: float = 10e3
    adc_bits: int = 6

    def __post_init__(self):
        if self.frequency_offset < 0 or self.laser_linewidth < 0 or self.adc_bits < 0:
            raise ValueError("impairment parameters must be non-negative")


def apply_carrier_impairments(stream, sample_rate: float, cfg: ImpairmentConfig, rng) -> np.ndarray:
    """Frequency offset plus transmitter and LO laser Wiener phase noise."""
    s = np.atleast_2d(stream)
    n = s.shape[1]
    t = np.arange(n) / sample_rate
    ph = 2 * np.pi * cfg.frequency_offset * t
    if cfg.laser_linewidth > 0:
        step = np.sqrt(2 * np.pi * cfg.laser_linewidth / sample_rate)
        for _ in range(2):  # transmitter laser and local oscillator
            ph = ph + np.cumsum(step * rng.standard_normal(n))
    return s * np.exp(1j * ph).astype(s.dtype)
