import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdmshape.channels import (
    C_LIGHT,
    H_PLANCK,
    LinkConfig,
    OpticalField,
    awgn_apply,
    ase_variance,
    channel_select,
    lumped_amplify,
    read_field,
    ssfm_propagate,
    table_i_link,
    table_iv_link,
    wdm_assemble,
    write_field,
)


def lossless(**kw):
    return table_i_link(fiber_loss_db_km=0.0, n_channels=1, **kw)


def dispersed_gaussian(t, t0, beta2, z):
    # closed-form solution of the linear lossless NLSE for a Gaussian input
    q = t0**2 - 1j * beta2 * z
    return t0 / np.sqrt(q) * np.exp(-(t**2) / (2 * q))


def test_link_validation():
    with pytest.raises(ValueError):
        LinkConfig(n_channels=4)
    with pytest.raises(ValueError):
        LinkConfig(ssfm_step_km=0.3, span_length_km=80.0)
    with pytest.raises(ValueError):
        LinkConfig(fiber_loss_db_km=-0.1)
    with pytest.warns(UserWarning):
        LinkConfig(channel_spacing=20e9)


def test_beta2_value():
    # D = 17 ps/(nm km) at 1550 nm is about -21.7 ps^2/km
    assert table_i_link().beta2 * 1e27 == pytest.approx(-21.68, abs=0.01)


def test_zero_field_stays_zero():
    link = table_i_link(n_channels=1, ssfm_step_km=10.0, n_spans=2, noise_figure_db=-np.inf)
    fld = OpticalField(np.zeros((2, 256), complex), 1e11)
    out = ssfm_propagate(fld, link, 0)
    assert np.all(out.samples == 0)


def test_pure_dispersion_matches_closed_form():
    link = lossless(gamma_per_w_km=0.0, ssfm_step_km=1.0, span_length_km=80.0)
    n, fs, t0 = 4096, 1e12, 20e-12
    t = (np.arange(n) - n // 2) / fs
    fld = OpticalField(dispersed_gaussian(t, t0, 0.0, 0.0).astype(complex), fs)
    out = ssfm_propagate(fld, link, 0, n_spans=1, amplify=False).samples[0]
    ref = dispersed_gaussian(t, t0, link.beta2, 80e3)
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-8


def test_pure_kerr_phase_rotation():
    link = lossless(dispersion_ps_nm_km=0.0, ssfm_step_km=1.0, span_length_km=80.0)
    p = 4e-3
    a = np.full(512, np.sqrt(p), complex)
    out = ssfm_propagate(OpticalField(a, 1e11), link, 0, n_spans=1, amplify=False).samples[0]
    expected = link.gamma_per_w_m * p * 80e3
    assert np.max(np.abs(np.angle(out) - expected)) < 1e-8
    assert np.allclose(np.abs(out), np.sqrt(p), rtol=1e-12)


def test_energy_conserved_without_loss():
    link = lossless(ssfm_step_km=1.0, span_length_km=40.0)
    rng = np.random.default_rng(1)
    a = (rng.standard_normal((2, 2048)) + 1j * rng.standard_normal((2, 2048))) * 0.05
    out = ssfm_propagate(OpticalField(a, 2e11), link, 0, n_spans=1, amplify=False).samples
    e0, e1 = np.sum(np.abs(a) ** 2), np.sum(np.abs(out) ** 2)
    assert abs(e1 - e0) / e0 < 1e-9


def test_step_halving_second_order():
    n, fs, t0 = 2048, 1e12, 20e-12
    t = (np.arange(n) - n // 2) / fs
    fld = OpticalField(np.sqrt(0.1) * dispersed_gaussian(t, t0, 0.0, 0.0).astype(complex), fs)

    def run(h):
        return ssfm_propagate(fld, lossless(ssfm_step_km=h, span_length_km=20.0), 0,
                              n_spans=1, amplify=False).samples

    ref = run(1 / 256)
    err = [np.linalg.norm(run(h) - ref) for h in (1.0, 0.5, 0.25)]
    assert err[0] / err[1] >= 2 and err[1] / err[2] >= 2
    assert np.log2(err[0] / err[1]) == pytest.approx(2.0, abs=0.3)


def test_non_finite_input_rejected():
    link = table_i_link(n_channels=1, ssfm_step_km=10.0, n_spans=1)
    a = np.ones((1, 64), complex)
    a[0, 3] = np.nan
    with pytest.raises(ValueError):
        ssfm_propagate(OpticalField(a, 1e11), link, 0)


def test_overflow_names_step():
    link = lossless(ssfm_step_km=10.0, span_length_km=80.0)
    a = np.full((1, 64), 1e200, complex)
    with pytest.raises((FloatingPointError, ValueError), match="step"):
        with np.errstate(all="ignore"):
            ssfm_propagate(OpticalField(a, 1e11), link, 0, n_spans=1, amplify=False)


def test_amplifier_identity_and_gain():
    rng = np.random.default_rng(0)
    fld = OpticalField(rng.standard_normal((2, 100)) + 0j, 1e11)
    out = lumped_amplify(fld, 0.0, -np.inf, 0)
    assert np.array_equal(out.samples, fld.samples)
    out = lumped_amplify(fld, 10.0, -np.inf, 0)
    assert np.allclose(out.samples, fld.samples * np.sqrt(10.0))
    with pytest.raises(ValueError):
        lumped_amplify(fld, -1.0, 3.0, 0)


def test_ase_variance_matches_formula():
    fs, nu = 2e11, C_LIGHT / 1.55e-6
    zero = OpticalField(np.zeros((1, 1_000_000), complex), fs)
    out = lumped_amplify(zero, 16.0, 3.0, 7, nu).samples[0]
    g = 10 ** 1.6
    expected = 10**0.3 / 2 * H_PLANCK * nu * (g - 1) * fs
    assert ase_variance(16.0, 3.0, fs, nu) == pytest.approx(expected, rel=1e-12)
    assert np.mean(np.abs(out) ** 2) == pytest.approx(expected, rel=0.02)


def test_amplifier_seeded():
    fld = OpticalField(np.ones((2, 1000), complex) * 1e-3, 1e11)
    a = lumped_amplify(fld, 16.0, 3.0, 11).samples
    b = lumped_amplify(fld, 16.0, 3.0, 11).samples
    assert np.array_equal(a, b)
    assert not np.array_equal(a, lumped_amplify(fld, 16.0, 3.0, 12).samples)


def test_single_channel_assemble_identity():
    link = table_i_link(n_channels=1)
    w = np.random.default_rng(2).standard_normal((2, 512)) + 0j
    out = wdm_assemble([w], link, 56e9)
    assert np.allclose(out.samples, w, atol=1e-12)


def test_assemble_select_round_trip():
    link = table_iv_link(n_channels=3)
    fs = link.simulation_sps() * link.symbol_rate
    n = 8 * 1024
    rng = np.random.default_rng(3)
    # band-limited test signal inside the channel bandwidth, at 2 sps
    spec = np.zeros((2, n // 4), complex)
    fr = np.fft.fftfreq(n // 4, 1 / (2 * link.symbol_rate))
    keep = np.abs(fr) < 0.6 * link.symbol_rate
    spec[:, keep] = rng.standard_normal((2, keep.sum())) + 1j * rng.standard_normal((2, keep.sum()))
    base = np.fft.ifft(spec, axis=1)
    up = np.zeros((2, n), complex)
    k = n // 4
    up[:, : (k + 1) // 2] = spec[:, : (k + 1) // 2]
    up[:, -(k // 2):] = spec[:, -(k // 2):]
    wide = np.fft.ifft(up, axis=1) * (n / k)
    zeros = np.zeros_like(wide)
    fld = wdm_assemble([zeros, zeros, wide], link, fs)
    back = channel_select(fld, 2, link)
    assert np.linalg.norm(back - base) / np.linalg.norm(base) < 1e-6


def test_five_channel_spectrum_peaks():
    link = table_i_link()
    fs = link.simulation_sps() * link.symbol_rate
    n = 4096
    # each channel a tone at its own baseband zero
    tone = np.ones((1, n), complex)
    fld = wdm_assemble([tone] * 5, link, fs)
    ps = np.abs(np.fft.fft(fld.samples[0])) ** 2
    fr = np.fft.fftfreq(n, 1 / fs)
    peaks = np.sort(fr[np.argsort(ps)[-5:]])
    assert np.allclose(peaks, [-60e9, -30e9, 0, 30e9, 60e9], atol=fs / n)


def test_assemble_rejects_low_rate():
    link = table_i_link()
    with pytest.raises(ValueError):
        wdm_assemble([np.zeros((1, 64))] * 5, link, 100e9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_assemble_linear(seed):
    link = table_iv_link(n_channels=3)
    rng = np.random.default_rng(seed)
    a = [rng.standard_normal((2, 128)) + 1j * rng.standard_normal((2, 128)) for _ in range(3)]
    b = [rng.standard_normal((2, 128)) + 1j * rng.standard_normal((2, 128)) for _ in range(3)]
    fs = 80e9
    lhs = wdm_assemble(a, link, fs).samples + wdm_assemble(b, link, fs).samples
    rhs = wdm_assemble([x + y for x, y in zip(a, b)], link, fs).samples
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_awgn_identity_at_infinite_snr():
    x = np.exp(1j * np.arange(10))
    assert np.array_equal(awgn_apply(x, np.inf, 0), x)


def test_awgn_measured_snr():
    rng = np.random.default_rng(4)
    x = np.exp(2j * np.pi * rng.random(100_000))
    y = awgn_apply(x, 20.0, 5)
    snr = 10 * np.log10(1 / np.mean(np.abs(y - x) ** 2))
    assert snr == pytest.approx(20.0, abs=0.1)
    assert np.array_equal(y, awgn_apply(x, 20.0, 5))


def test_field_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    fld = OpticalField(rng.standard_normal((2, 33)) + 1j * rng.standard_normal((2, 33)), 1.5e11, 1.9e14)
    p = tmp_path / "f.bin"
    write_field(p, fld)
    raw = p.read_bytes()
    assert raw[:8] == b"CSHAPE01"
    assert len(raw) == 8 + 32 + 2 * 33 * 16
    back = read_field(p)
    assert np.array_equal(back.samples, fld.samples)
    assert back.sample_rate == fld.sample_rate and back.center_frequency == fld.center_frequency
    p.write_bytes(raw[:-1])
    with pytest.raises(ValueError):
        read_field(p)
