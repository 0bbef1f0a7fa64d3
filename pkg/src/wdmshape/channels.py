"""Fiber link simulation: split-step NLSE propagation, lumped EDFAs, WDM mux/demux, AWGN.

Field samples are in sqrt(W).  The envelope obeys

    dA/dz = -(alpha/2) A - j (beta2/2) d2A/dt2 + j gamma |A|^2 A

so with numpy's FFT sign convention the linear step multiplies the spectrum by
``exp((-alpha/2 + j beta2 omega^2 / 2) h)``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .shaping import derive_seed

C_LIGHT = 299_792_458.0
H_PLANCK = 6.62607015e-34
MAGIC = b"CSHAPE01"


@dataclass
class LinkConfig:
    """Fiber, amplifier and WDM grid parameters (engineering units)."""

    fiber_loss_db_km: float = 0.2
    gamma_per_w_km: float = 1.3
    dispersion_ps_nm_km: float = 17.0
    wavelength_m: float = 1.55e-6
    ssfm_step_km: float = 0.1
    span_length_km: float = 80.0
    n_spans: int = 10
    noise_figure_db: float = 3.0
    n_channels: int = 5
    symbol_rate: float = 28e9
    channel_spacing: float = 30e9
    rolloff: float = 0.01

    def __post_init__(self):
        for name in ("fiber_loss_db_km", "gamma_per_w_km", "dispersion_ps_nm_km", "wavelength_m",
                     "ssfm_step_km", "span_length_km", "symbol_rate", "channel_spacing"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.ssfm_step_km <= 0 or self.span_length_km <= 0 or self.symbol_rate <= 0:
            raise ValueError("step, span length and symbol rate must be positive")
        if self.n_spans < 0:
            raise ValueError("n_spans must be >= 0")
        if self.n_channels < 1 or self.n_channels % 2 == 0:
            raise ValueError(f"n_channels must be odd, got {self.n_channels}")
        if not 0 <= self.rolloff <= 1:
            raise ValueError(f"rolloff must be in [0, 1], got {self.rolloff}")
        r = self.span_length_km / self.ssfm_step_km
        if abs(r - round(r)) > 1e-9 * r:
            raise ValueError("span_length must be an integer multiple of ssfm_step")
        if self.n_channels > 1 and self.channel_spacing < self.symbol_rate * (1 + self.rolloff):
            warnings.warn("channel spacing is narrower than the signal bandwidth", stacklevel=2)

    # SI conversions
    @property
    def alpha_per_m(self) -> float:
        return self.fiber_loss_db_km / (10 * np.log10(np.e)) / 1e3

    @property
    def gamma_per_w_m(self) -> float:
        return self.gamma_per_w_km / 1e3

    @property
    def beta2(self) -> float:
        """Group-velocity dispersion in s^2/m."""
        d = self.dispersion_ps_nm_km * 1e-6  # s/m^2
        return -d * self.wavelength_m**2 / (2 * np.pi * C_LIGHT)

    @property
    def carrier_frequency(self) -> float:
        return C_LIGHT / self.wavelength_m

    @property
    def steps_per_span(self) -> int:
        return int(round(self.span_length_km / self.ssfm_step_km))

    @property
    def span_gain_db(self) -> float:
        return self.fiber_loss_db_km * self.span_length_km

    def channel_offsets(self) -> np.ndarray:
        k = np.arange(self.n_channels) - (self.n_channels - 1) / 2
        return k * self.channel_spacing

    def simulation_sps(self) -> int:
        """Power-of-two samples per symbol covering the WDM band."""
        need = self.n_channels * self.channel_spacing / self.symbol_rate
        need = max(need, 2 * (1 + self.rolloff))
        return int(2 ** np.ceil(np.log2(need)))

    def to_dict(self) -> dict:
        return asdict(self)


def table_i_link(**overrides) -> LinkConfig:
    """5 x 28 GBaud at 30 GHz, 10 x 80 km SSMF, 3 dB NF EDFAs, 0.01 rolloff."""
    return LinkConfig(**overrides)


def table_iv_link(**overrides) -> LinkConfig:
    """10 GBaud, 25 GHz spacing, 0.5 rolloff on the same fiber and amplifiers."""
    kw = dict(symbol_rate=10e9, channel_spacing=25e9, rolloff=0.5)
    kw.update(overrides)
    return LinkConfig(**kw)


@dataclass
class OpticalField:
    """Dual- or single-polarization complex envelope, shape ``(n_pol, n)``."""

    samples: np.ndarray
    sample_rate: float
    center_frequency: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if not np.iscomplexobj(s):
            s = s.astype(complex)
        self.samples = s

    @property
    def n_pol(self) -> int:
        return self.samples.shape[0]

    @property
    def n(self) -> int:
        return self.samples.shape[1]

    def copy(self) -> "OpticalField":
        return OpticalField(self.samples.copy(), self.sample_rate, self.center_frequency)

    def power(self) -> float:
        """Mean total power over polarizations (W)."""
        return float(np.sum(np.mean(np.abs(self.samples) ** 2, axis=1)))


def angular_frequencies(n: int, sample_rate: float) -> np.ndarray:
    return 2 * np.pi * sfft.fftfreq(n, 1.0 / sample_rate)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite samples in {what}")


def lumped_amplify(field: OpticalField, gain_db: float, noise_figure_db: float, rng_seed,
                   carrier_frequency: float = C_LIGHT / 1.55e-6) -> OpticalField:
    """Amplify by ``gain_db`` and add white ASE over the simulation bandwidth.

    Noise per complex sample and polarization has variance
    ``n_sp h nu (G - 1) f_s`` with ``n_sp = 10**(NF/10) / 2``; ``NF = -inf``
    gives a noiseless amplifier.
    """
    if gain_db < 0:
        raise ValueError("gain_db must be >= 0")
    _check_finite(field.samples, "amplifier input")
    g = 10 ** (gain_db / 10)
    out = field.samples * np.sqrt(g).astype(field.samples.real.dtype)
    if np.isfinite(noise_figure_db) and g > 1:
        var = ase_variance(gain_db, noise_figure_db, field.sample_rate, carrier_frequency)
        rng = np.random.default_rng(rng_seed)
        shape = out.shape
        noise = rng.standard_normal((2,) + shape)
        out = out + (np.sqrt(var / 2) * (noise[0] + 1j * noise[1])).astype(out.dtype)
    return OpticalField(out, field.sample_rate, field.center_frequency)


def ase_variance(gain_db, noise_figure_db, sample_rate, carrier_frequency=C_LIGHT / 1.55e-6) -> float:
    """ASE power per polarization within ``sample_rate`` (W)."""
    g = 10 ** (gain_db / 10)
    nsp = 10 ** (noise_figure_db / 10) / 2
    return nsp * H_PLANCK * carrier_frequency * (g - 1) * sample_rate


def linear_operator(n, sample_rate, link: LinkConfig, length_m: float) -> np.ndarray:
    """Loss plus dispersion transfer function over ``length_m``."""
    w = angular_frequencies(n, sample_rate)
    return np.exp((-link.alpha_per_m / 2 + 0.5j * link.beta2 * w**2) * length_m)


def ssfm_propagate(field: OpticalField, link: LinkConfig, rng_seed, *, n_spans=None,
                   tap=None, amplify=True) -> OpticalField:
    """Symmetric split-step propagation over ``n_spans`` amplified spans.

    Each step applies half the linear operator, the Kerr rotation evaluated at
    the step midpoint (``8/9 gamma`` Manakov form for two polarizations), then
    the other half.  Adjacent half steps are merged.  After every span an EDFA
    restores the span loss.  ``tap(span_index, field)`` is called after each
    amplifier, allowing one run to serve several distances.
    """
    x = field.samples
    _check_finite(x, "propagation input")
    spans = link.n_spans if n_spans is None else n_spans
    n, fs = field.n, field.sample_rate
    dtype = x.dtype
    h = link.ssfm_step_km * 1e3
    nsteps = link.steps_per_span
    gam = link.gamma_per_w_m * (8.0 / 9.0 if field.n_pol == 2 else 1.0)
    half = linear_operator(n, fs, link, h / 2).astype(dtype)
    full = (half * half).astype(dtype)
    spec = sfft.fft(x, axis=1)
    step = 0
    for span in range(spans):
        spec *= half
        for i in range(nsteps):
            x = sfft.ifft(spec, axis=1)
            p = np.sum(x.real**2 + x.imag**2, axis=0)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"non-finite field at SSFM step {step}")
            x *= np.exp(1j * (gam * h) * p).astype(dtype)
            spec = sfft.fft(x, axis=1)
            spec *= full if i < nsteps - 1 else half
            step += 1
        if amplify:
            out = lumped_amplify(OpticalField(sfft.ifft(spec, axis=1), fs, field.center_frequency),
                                 link.span_gain_db, link.noise_figure_db,
                                 derive_seed(rng_seed, "ase", span), link.carrier_frequency)
            spec = sfft.fft(out.samples, axis=1)
        else:
            out = None
        if tap is not None:
            if out is None:
                out = OpticalField(sfft.ifft(spec, axis=1), fs, field.center_frequency)
            tap(span, out)
    return OpticalField(sfft.ifft(spec, axis=1).astype(dtype), fs, field.center_frequency)


def _bin_shift(n, sample_rate, f):
    return int(round(f * n / sample_rate))


def wdm_assemble(channel_waveforms, link: LinkConfig, sample_rate: float) -> OpticalField:
    """Sum channel baseband waveforms shifted onto the WDM grid (nearest FFT bin)."""
    ws = [np.atleast_2d(np.asarray(w)) for w in channel_waveforms]
    if len(ws) != link.n_channels:
        raise ValueError(f"expected {link.n_channels} channels, got {len(ws)}")
    if len({w.shape for w in ws}) != 1:
        raise ValueError("all channels must have the same shape")
    if sample_rate < link.n_channels * link.channel_spacing:
        raise ValueError(f"sample rate {sample_rate:.4g} Hz too low for {link.n_channels} channels "
                         f"at {link.channel_spacing:.4g} Hz spacing")
    n = ws[0].shape[1]
    total = np.zeros(ws[0].shape, dtype=np.result_type(ws[0].dtype, np.complex64))
    for w, f in zip(ws, link.channel_offsets()):
        total += np.roll(sfft.fft(w, axis=1), _bin_shift(n, sample_rate, f), axis=1)
    return OpticalField(sfft.ifft(total, axis=1), sample_rate, link.carrier_frequency)


def channel_select(field: OpticalField, channel_index: int, link: LinkConfig, sps_out: int = 2) -> np.ndarray:
    """Shift channel to baseband, brick-wall low-pass to ±spacing/2, resample to ``sps_out``."""
    if not 0 <= channel_index < link.n_channels:
        raise ValueError(f"channel_index {channel_index} outside [0, {link.n_channels})")
    n, fs = field.n, field.sample_rate
    f = link.channel_offsets()[channel_index]
    spec = np.roll(sfft.fft(field.samples, axis=1), -_bin_shift(n, fs, f), axis=1)
    fr = sfft.fftfreq(n, 1.0 / fs)
    spec[:, np.abs(fr) > link.channel_spacing / 2] = 0
    fs_out = sps_out * link.symbol_rate
    n_out = n * fs_out / fs
    if abs(n_out - round(n_out)) > 1e-9:
        raise ValueError("output sample count is not an integer")
    n_out = int(round(n_out))
    return resample_spectrum(spec, n_out) * (n_out / n)


def resample_spectrum(spec, n_out):
    """Frequency-domain truncation/zero-padding of an FFT-ordered spectrum, back to time."""
    n = spec.shape[-1]
    out = np.zeros(spec.shape[:-1] + (n_out,), dtype=spec.dtype)
    k = min(n, n_out)
    pos = (k + 1) // 2
    neg = k // 2
    out[..., :pos] = spec[..., :pos]
    if neg:
        out[..., -neg:] = spec[..., -neg:]
    return sfft.ifft(out, axis=-1)


def awgn_apply(symbols, snr_db: float, rng_seed):
    """Add circular complex Gaussian noise of variance ``10**(-snr_db/10)``."""
    s = np.asarray(symbols)
    if np.isposinf(snr_db):
        return s.copy()
    var = 10 ** (-snr_db / 10)
    rng = np.random.default_rng(rng_seed)
    w = rng.standard_normal((2,) + s.shape)
    return s + np.sqrt(var / 2) * (w[0] + 1j * w[1])


# --- CSHAPE01 field files -----------------------------------------------------

def write_field(path, field: OpticalField) -> None:
    x = np.asarray(field.samples, dtype=np.complex128)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQdd", field.n_pol, 0, field.n, field.sample_rate, field.center_frequency))
        fh.write(x.astype("<c16").tobytes())


def read_field(path) -> OpticalField:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    n_pol, _, n, fs, fc = struct.unpack_from("<IIQdd", raw, 8)
    off = 8 + struct.calcsize("<IIQdd")
    need = n_pol * n * 16
    if len(raw) - off != need:
        raise ValueError(f"{path}: expected {need} payload bytes, found {len(raw) - off}")
    x = np.frombuffer(raw, dtype="<c16", offset=off).reshape(n_pol, n).astype(np.complex128)
    return OpticalField(x, fs, fc)
