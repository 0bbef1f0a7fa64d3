import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import j_function_hermite, qam_mi
from wdmshape.analysis import (
    ExitCurve,
    RunReport,
    aggregate_report,
    awgn_posterior_source,
    count_ber,
    exit_decoder,
    exit_demapper,
    gaussian_apriori,
    histogram_mi,
    is_error_free,
    j_function,
    j_inverse,
    max_error_free_distance,
    net_rate_gbps,
    to_csv,
    tunnel_open,
)
from wdmshape.labeling import named_labeling
from wdmshape.turbo import FecConfig, llr_mutual_information


def test_count_ber_examples():
    a = np.random.default_rng(0).integers(0, 2, 1_000_000).astype(np.uint8)
    same = count_ber(a, a)
    assert same.errors == 0 and not same.reliable
    with pytest.warns(UserWarning, match="polarity"):
        inv = count_ber(a, 1 - a)
    assert inv.ber == 1.0
    b = a.copy()
    b[np.random.default_rng(1).choice(a.size, 123, replace=False)] ^= 1
    c = count_ber(a, b)
    assert c.errors == 123 and c.ber == pytest.approx(1.23e-4) and c.reliable
    with pytest.raises(ValueError):
        count_ber(a, a[:-1])


@pytest.mark.parametrize("sigma", [0.3, 1.0, 2.0, 3.0, 6.0])
def test_j_function_matches_hermite_oracle(sigma):
    assert j_function(sigma) == pytest.approx(j_function_hermite(sigma), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.99))
def test_j_inverse_round_trip(mi):
    assert j_function(j_inverse(mi)) == pytest.approx(mi, abs=1e-6)


def test_gaussian_apriori_has_requested_mi():
    rng = np.random.default_rng(2)
    bits = rng.integers(0, 2, 200_000)
    for mi in (0.2, 0.5, 0.9):
        llr = gaussian_apriori(bits, mi, rng)
        assert llr_mutual_information(llr, bits) == pytest.approx(mi, abs=0.01)
        assert histogram_mi(llr, bits) == pytest.approx(mi, abs=0.02)


def test_exit_curve_validation():
    with pytest.raises(ValueError):
        ExitCurve([0.0, 0.5, 0.5], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        ExitCurve([-0.1, 0.5], [0.1, 0.2])
    c = ExitCurve([0.0, 1.0], [0.2, 0.6])
    assert c(0.5) == pytest.approx(0.4) and c.gain() == pytest.approx(0.4) and c.area() == pytest.approx(0.4)


def test_noiseless_bijective_demapper_is_perfect():
    t = named_labeling("16qam")
    lp, bits, _ = awgn_posterior_source(t, 60.0, 10_000, 0)
    c = exit_demapper(t, lp, bits, [0.0, 0.5, 1.0])
    assert np.allclose(c.ie, 1.0, atol=1e-3)
    assert not c.flags


def test_demapper_curve_monotone_and_area():
    t = named_labeling("16qam")
    lp, bits, _ = awgn_posterior_source(t, 10.0, 20_000, 1)
    grid = np.linspace(0, 1, 11)
    c = exit_demapper(t, lp, bits, grid, estimator="exact")
    assert np.all(np.diff(c.ie) >= -0.005)
    # area theorem: the curve's area is the symbol-wise rate per label bit
    assert c.area() == pytest.approx(qam_mi(16, 10.0) / 4, abs=0.05)


def test_small_source_flagged():
    t = named_labeling("16qam")
    lp, bits, _ = awgn_posterior_source(t, 10.0, 500, 1)
    assert exit_demapper(t, lp, bits, [0.0, 1.0]).flags


def test_decoder_curve_endpoints_and_rate_order():
    grid = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
    low = exit_decoder(FecConfig(1.0, 3, 1000), grid, n_blocks=1)
    high = exit_decoder(FecConfig(5.0, 6, 400), grid, n_blocks=1)
    assert low.ie[-1] > 0.999 and high.ie[-1] > 0.999
    assert np.all(low.ie[:-1] > high.ie[:-1])


def test_tunnel_predicate_on_synthetic_curves():
    grid = np.linspace(0, 1, 11)
    dec = ExitCurve(grid, grid**2)  # decoder maps I_A -> I_E
    assert tunnel_open(ExitCurve(grid, 0.6 + 0.4 * grid), dec)
    assert not tunnel_open(ExitCurve(grid, 0.3 + 0.2 * grid), dec)


def test_net_rates_reproduce_table():
    assert [round(net_rate_gbps(e, 10e9, 0.02), 1) for e in (5, 5.5, 6)] == [98.0, 107.8, 117.6]
    assert [round(net_rate_gbps(e, 10e9, 0.02, hd_fec=True), 1) for e in (5, 5.5, 6)] == [91.1, 100.2, 109.4]


def test_error_free_rule():
    assert is_error_free(0, 1000)
    assert not is_error_free(5, 1_000_000)  # too few errors to claim a BER
    assert is_error_free(100, 2_000_000)
    assert not is_error_free(200, 1_000_000)
    assert not is_error_free(0, 0)


def test_run_report_validation():
    kw = dict(distance_km=80.0, power_dbm=-2.0, format="x", eta=5.0, snr_db=20.0, air=6.0,
              pre_fec_ber=0.01, post_fec_ber=0.0, post_fec_errors=0, post_fec_bits=1000, seeds={"base": 0})
    r = RunReport(**kw)
    assert r.error_free and r.to_dict()["error_free"]
    with pytest.raises(ValueError):
        RunReport(**{**kw, "pre_fec_ber": 1.5})


def run(fmt, dist, power, air, errors=0):
    return {"format": fmt, "distance_km": dist, "power_dbm": power, "air": air, "snr_db": 10 + air,
            "eta": 5.0, "post_fec_errors": errors, "post_fec_bits": 1000}


def test_aggregate_picks_best_power_per_distance():
    runs = [run("s", 80, -4, 6.0), run("s", 80, -2, 6.3), run("s", 160, -2, 5.9, errors=7),
            run("s", 160, 0, 5.8, errors=9), run("u", 80, -2, 5.9)]
    summ = aggregate_report(runs)
    s80 = next(s for s in summ if s["format"] == "s" and s["distance_km"] == 80)
    assert s80["best_power_dbm"] == -2 and s80["max_air"] == 6.3 and s80["n_runs"] == 2
    assert s80["net_rate_gbps"] == pytest.approx(98.0)
    assert max_error_free_distance(summ, "s") == 80
    assert max_error_free_distance(summ, "none") is None
    # a single run passes through
    one = aggregate_report([run("u", 80, -2, 5.9)])
    assert one[0]["max_air"] == 5.9 and one[0]["best_power_dbm"] == -2
    csv = to_csv(summ)
    assert csv.splitlines()[0].startswith("format,distance_km") and len(csv.splitlines()) == 4
