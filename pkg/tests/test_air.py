import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wdmshape.air import (
    AuxChannelModel,
    TrainingPairs,
    estimate_air,
    fit_aux_model,
    log_symbol_posteriors,
    read_model,
    symbol_posteriors,
    write_model,
)
from wdmshape.channels import awgn_apply
from wdmshape.constellation import ConstellationPmf, mb_pmf, pam_levels, qam_points, uniform_qam

# uniform 16QAM on circular AWGN at 10 dB SNR; trapezoid integration of the
# per-dimension PAM mutual information on a 2e5-point grid
QAM16_MI_10DB = 3.16394


def awgn_pairs(pmf, n, snr_db, seed):
    rng = np.random.default_rng(seed)
    idx = pmf.sample(n, rng)
    x = pmf.scaled_points[idx]
    return TrainingPairs(x, awgn_apply(x, snr_db, seed + 1), idx)


def test_pam_and_qam_grids():
    assert np.array_equal(pam_levels(4), [-3, -1, 1, 3])
    pts = qam_points(16)
    assert pts.size == 16 and pts[1] == -3 - 1j
    with pytest.raises(ValueError):
        qam_points(32)
    with pytest.raises(ValueError):
        pam_levels(3)


def test_pmf_invariants():
    with pytest.raises(ValueError):
        ConstellationPmf([1, -1], [0.6, 0.5])
    with pytest.raises(ValueError):
        ConstellationPmf([1, 1], [0.5, 0.5])
    with pytest.raises(ValueError):
        ConstellationPmf([1, -1], [0.5, 0.5], alpha=1.0, power=2.0)
    pmf = uniform_qam(64, power=0.3)
    assert pmf.scaled_power() == pytest.approx(0.3, rel=1e-12)
    assert pmf.entropy() == pytest.approx(6.0)


def test_mb_family_limits():
    pts = qam_points(64)
    assert np.allclose(mb_pmf(pts, 0.0).probabilities, 1 / 64)
    p = mb_pmf(pts, 0.5).probabilities
    e = np.abs(pts) ** 2
    assert p[np.argmin(e)] > p[np.argmax(e)]


def test_fit_awgn_covariances():
    pmf = uniform_qam(16)
    sigma2 = 0.01
    pairs = awgn_pairs(pmf, 100_000, -10 * np.log10(sigma2), 1)
    model = fit_aux_model(pairs, pmf)
    for c in model.covs:
        assert np.allclose(np.diag(c), sigma2 / 2, rtol=0.1)
        assert abs(c[0, 1]) < 0.1 * sigma2 / 2
    assert not model.low_confidence


def test_fit_noiseless_regularised():
    pmf = uniform_qam(16)
    rng = np.random.default_rng(0)
    idx = rng.permutation(np.repeat(np.arange(16), 40))
    x = pmf.scaled_points[idx]
    model = fit_aux_model(TrainingPairs(x, x.copy()), pmf)
    assert np.allclose(model.means[:, 0] + 1j * model.means[:, 1], pmf.scaled_points, atol=1e-15)
    assert np.allclose(model.covs[:, 0, 0], 1e-12 * pmf.scaled_power())
    assert np.all(np.abs(model.covs[:, 0, 1]) < 1e-30)


def test_fit_unseen_points_fall_back():
    pmf = uniform_qam(16)
    rng = np.random.default_rng(1)
    idx = rng.integers(0, 8, 5000)
    x = pmf.scaled_points[idx]
    y = awgn_apply(x * np.exp(0.1j), 20.0, 2)
    model = fit_aux_model(TrainingPairs(x, y, idx), pmf)
    mu = model.means[:, 0] + 1j * model.means[:, 1]
    # never-sent points sit at the constellation point times the fitted gain
    assert np.allclose(mu[8:], pmf.scaled_points[8:] * np.exp(0.1j), atol=0.02)
    assert model.low_confidence


def test_fit_rejects_unknown_symbols():
    pmf = uniform_qam(16)
    with pytest.raises(ValueError):
        fit_aux_model(TrainingPairs([0.123 + 0j] * 10, [0.1 + 0j] * 10), pmf)


def test_fit_needs_observations():
    pmf = uniform_qam(16)
    x = pmf.scaled_points[:1]
    with pytest.raises(ValueError):
        fit_aux_model(TrainingPairs(x, x), pmf)


def test_model_validation():
    with pytest.raises(ValueError):
        AuxChannelModel(np.zeros((1, 2)), np.array([[[1.0, 0.5], [0.4, 1.0]]]))
    with pytest.raises(ValueError):
        AuxChannelModel(np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))


def test_posterior_argmax_at_mean():
    pmf = uniform_qam(16)
    covs = np.tile(np.eye(2) * 1e-3, (16, 1, 1))
    sp = pmf.scaled_points
    model = AuxChannelModel(np.column_stack([sp.real, sp.imag]), covs)
    post, flags = symbol_posteriors(model, pmf, sp)
    assert np.array_equal(np.argmax(post, axis=1), np.arange(16))
    assert not flags.any()


def test_posteriors_softmax_identity():
    pmf = uniform_qam(16)
    sp = pmf.scaled_points
    s2 = 0.05
    model = AuxChannelModel(np.column_stack([sp.real, sp.imag]), np.tile(np.eye(2) * s2, (16, 1, 1)))
    y = np.array([0.1 + 0.3j, -0.7 + 0.2j])
    post, _ = symbol_posteriors(model, pmf, y)
    d = np.abs(y[:, None] - sp[None, :]) ** 2 / (2 * s2)
    ref = np.exp(-d) / np.exp(-d).sum(1, keepdims=True)
    assert np.allclose(post, ref, atol=1e-14)


def test_posteriors_normalised():
    pmf = uniform_qam(64)
    model = fit_aux_model(awgn_pairs(pmf, 20_000, 15.0, 3), pmf)
    rng = np.random.default_rng(4)
    y = rng.standard_normal(10_000) + 1j * rng.standard_normal(10_000)
    post, _ = symbol_posteriors(model, pmf, y)
    assert np.max(np.abs(post.sum(1) - 1)) < 1e-12


def test_posteriors_underflow_returns_prior():
    pmf = mb_pmf(qam_points(16), 0.2)
    sp = pmf.scaled_points
    model = AuxChannelModel(np.column_stack([sp.real, sp.imag]), np.tile(np.eye(2) * 1e-6, (16, 1, 1)))
    # squared distance overflows, so every log-likelihood is -inf
    with np.errstate(over="ignore"):
        lp, flags = log_symbol_posteriors(model, pmf, np.array([1e200 + 0j]))
    assert flags[0]
    assert np.allclose(np.exp(lp[0]), pmf.probabilities)


def test_air_noiseless_equals_entropy():
    pmf = mb_pmf(qam_points(64), 0.1)
    rng = np.random.default_rng(5)
    idx = pmf.sample(20_000, rng)
    x = pmf.scaled_points[idx]
    pairs = TrainingPairs(x, x, idx)
    est = estimate_air(pmf, fit_aux_model(pairs, pmf), pairs)
    assert est.air_bits_per_symbol == pytest.approx(pmf.entropy(), abs=1e-6)


def test_air_matches_quadrature_16qam():
    pmf = uniform_qam(16)
    pairs = awgn_pairs(pmf, 200_000, 10.0, 6)
    est = estimate_air(pmf, fit_aux_model(pairs, pmf), pairs)
    assert est.air_bits_per_symbol == pytest.approx(QAM16_MI_10DB, abs=0.02)
    assert est.air_bits_per_symbol == pytest.approx(est.input_entropy - est.cond_entropy_ub)
    assert 0 < est.stderr < 0.01


def test_air_low_confidence_and_clamp():
    pmf = uniform_qam(16)
    pairs = awgn_pairs(pmf, 500, 10.0, 7)
    est = estimate_air(pmf, fit_aux_model(pairs, pmf), pairs)
    assert est.low_confidence
    # a wildly wrong model gives a negative bound, clamped to zero
    sp = pmf.scaled_points[::-1]
    bad = AuxChannelModel(np.column_stack([sp.real, sp.imag]), np.tile(np.eye(2) * 1e-3, (16, 1, 1)))
    big = awgn_pairs(pmf, 5000, 10.0, 8)
    est = estimate_air(pmf, bad, big)
    assert est.clamped and est.air_bits_per_symbol == 0.0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, 2 * np.pi))
def test_air_invariant_to_rotation(phi):
    # fitting on rotated outputs reproduces the same bound
    pmf = uniform_qam(16)
    pairs = awgn_pairs(pmf, 20_000, 12.0, 9)
    a = estimate_air(pmf, fit_aux_model(pairs, pmf), pairs).air_bits_per_symbol
    rot = TrainingPairs(pairs.x, pairs.y * np.exp(1j * phi), pairs.idx)
    b = estimate_air(pmf, fit_aux_model(rot, pmf), rot).air_bits_per_symbol
    assert a == pytest.approx(b, abs=1e-9)


def test_mismatched_model_never_beats_matched():
    pmf = uniform_qam(16)
    pairs = awgn_pairs(pmf, 50_000, 12.0, 10)
    model = fit_aux_model(pairs, pmf)
    best = estimate_air(pmf, model, pairs).air_bits_per_symbol
    rng = np.random.default_rng(11)
    for _ in range(10):
        pert = AuxChannelModel(model.means + rng.normal(0, 0.02, model.means.shape),
                               model.covs * rng.uniform(0.5, 2.0))
        assert estimate_air(pmf, pert, pairs).air_bits_per_symbol <= best + 1e-3


def test_model_file_round_trip(tmp_path):
    pmf = uniform_qam(16)
    pairs = awgn_pairs(pmf, 5000, 15.0, 12)
    model = fit_aux_model(pairs, pmf)
    write_model(tmp_path / "m.txt", pmf, model)
    pmf2, model2 = read_model(tmp_path / "m.txt")
    assert np.array_equal(pmf2.points, pmf.points) and pmf2.alpha == pmf.alpha
    assert np.array_equal(model2.means, model.means) and np.array_equal(model2.covs, model.covs)
