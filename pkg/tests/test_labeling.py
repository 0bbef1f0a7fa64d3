import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import demap_brute_force
from wdmshape.air import AuxChannelModel, symbol_posteriors
from wdmshape.channels import awgn_apply
from wdmshape.labeling import (
    LabelingFileError,
    LabelingTable,
    PamLabeling,
    build_labeling,
    build_labeling_1d,
    gray_code,
    map_bits,
    named_labeling,
    read_labeling,
    reference_pam_pmf,
    soft_demap,
    write_labeling,
)

LABELINGS = ["16qam", "64qam", "256qam-shaped", "1024qam-shaped"]


def awgn_posteriors(table, snr_db, n, seed):
    pmf = table.pmf()
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, table.m * n).astype(np.uint8)
    idx = map_bits(bits, table)
    y = awgn_apply(pmf.scaled_points[idx], snr_db, seed + 1)
    sp = pmf.scaled_points
    nv = 10 ** (-snr_db / 10)
    model = AuxChannelModel(np.column_stack([sp.real, sp.imag]), np.tile(np.eye(2) * nv / 2, (len(sp), 1, 1)))
    post, _ = symbol_posteriors(model, pmf, y)
    return post, bits.reshape(n, table.m), idx


def test_uniform_is_gray_bijection():
    t = named_labeling("64qam")
    assert t.is_bijective() and t.m == 6
    assert np.all(t.ambiguity() == 0)
    prefixes = t.dim_i.prefixes
    for a, b in zip(prefixes[:-1], prefixes[1:]):
        assert sum(x != y for x, y in zip(a, b)) == 1
    g = gray_code(3)
    assert np.all(np.abs(np.diff(g.astype(int), axis=0)).sum(1) == 1)


def test_reference_32pam_label_ownership():
    d = build_labeling_1d(reference_pam_pmf(32))
    assert d.m == 7
    owners = np.bincount(d.lut, minlength=32)
    for s in range(32):
        assert owners[s] == 2 ** (7 - d.lengths[s])
    assert owners[d.lengths == 4].tolist() == [8] * int(np.sum(d.lengths == 4))
    assert owners[d.lengths == 7].tolist() == [1] * int(np.sum(d.lengths == 7))


@pytest.mark.parametrize("name", LABELINGS)
def test_kraft_and_mirror(name):
    t = named_labeling(name)
    for d in (t.dim_i, t.dim_q):
        assert d.kraft() == 1.0
        assert d.mirror_ok()
        # each half-line carries exactly half the mass behind its sign bit
        half = d.pmf()[d.n // 2:]
        assert half.sum() == 0.5
        assert all(p[0] == "0" for p in d.prefixes[d.n // 2:])
    assert t.is_bijective() == (name.endswith("qam"))
    assert (t.m > np.log2(t.n_points)) == name.endswith("-shaped")


def test_label_entropy_equals_pmf_entropy():
    t = named_labeling("1024qam-shaped")
    d = t.dim_i
    p = d.pmf()
    # a symbol with l_i-bit prefix has information content l_i bits
    assert np.sum(p * d.lengths) == pytest.approx(-np.sum(p * np.log2(p)), abs=1e-12)


def test_build_rejects_bad_pmfs():
    with pytest.raises(ValueError):
        build_labeling_1d([0.5, 0.3, 0.2, 0.0])
    with pytest.raises(ValueError):
        build_labeling_1d([0.125, 0.125, 0.25, 0.5])
    with pytest.raises(ValueError):
        build_labeling_1d([0.25, 0.25, 0.5])


def test_non_monotone_half_line_still_valid():
    # shorter prefixes away from the centre need the search path
    half = np.array([3, 4, 4, 3, 4, 4], float)
    d = build_labeling_1d(np.concatenate([2.0 ** -half[::-1], 2.0 ** -half]))
    assert d.kraft() == 1.0 and d.mirror_ok()


@pytest.mark.parametrize("name", ["256qam-shaped", "1024qam-shaped"])
def test_mapper_statistics(name):
    t = named_labeling(name)
    rng = np.random.default_rng(1)
    idx = map_bits(rng.integers(0, 2, t.m * 100_000), t)
    n = t.dim_q.n
    for emp, target in ((np.bincount(idx // n, minlength=n) / idx.size, t.dim_i.pmf()),
                        (np.bincount(idx % n, minlength=n) / idx.size, t.dim_q.pmf())):
        assert 0.5 * np.abs(emp - target).sum() < 0.01


def test_all_zero_bits_map_to_one_symbol():
    t = named_labeling("1024qam-shaped")
    idx = map_bits(np.zeros(t.m * 50, np.uint8), t)
    assert np.all(idx == idx[0])
    i, q = divmod(int(idx[0]), t.dim_q.n)
    assert t.dim_i.prefixes[i] == "0" * t.dim_i.lengths[i]


def test_map_rejects_ragged_input():
    with pytest.raises(ValueError):
        map_bits(np.zeros(7, np.uint8), named_labeling("16qam"))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(LABELINGS), st.integers(0, 2**31 - 1))
def test_noiseless_hard_demap_recovers_unique_bits(name, seed):
    t = named_labeling(name)
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, (40, t.m)).astype(np.uint8)
    idx = map_bits(bits.ravel(), t)
    post = np.zeros((40, t.n_points))
    post[np.arange(40), idx] = 1.0
    llr = soft_demap(post, None, t)
    li = t.dim_i.lengths[idx // t.dim_q.n]
    lq = t.dim_q.lengths[idx % t.dim_q.n]
    mi = t.dim_i.m
    for k in range(40):
        unique = np.r_[np.arange(li[k]), mi + np.arange(lq[k])]
        amb = np.setdiff1d(np.arange(t.m), unique)
        assert np.array_equal(llr[k, unique] < 0, bits[k, unique].astype(bool))
        assert np.all(np.abs(llr[k, unique]) == 50.0)
        assert np.all(llr[k, amb] == 0.0)
    # a-priori information on the ambiguous bits resolves them
    apriori = np.where(bits == 0, 50.0, -50.0)
    app = soft_demap(post, apriori, t) + apriori
    assert np.array_equal(app < 0, bits.astype(bool))


def toy_table():
    # 4-point dyadic {1/2, 1/4, 1/8, 1/8} on the I axis, 2-point uniform on Q
    di = PamLabeling([1, 2, 3, 3], ["0", "10", "110", "111"], 3)
    dq = PamLabeling([1, 1], ["1", "0"], 1)
    return LabelingTable(di, dq)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_toy_demap_matches_enumeration(seed, with_apriori):
    t = toy_table()
    rng = np.random.default_rng(seed)
    post = rng.dirichlet(np.ones(t.n_points), size=5)
    apriori = rng.normal(0, 3, (5, t.m)) if with_apriori else np.zeros((5, t.m))
    got = soft_demap(post, apriori if with_apriori else None, t)
    ref = demap_brute_force(post, apriori, t.dim_i.prefixes, t.dim_q.prefixes, t.dim_i.m, t.dim_q.m)
    assert np.allclose(got, ref, atol=1e-9)


def test_shaped_256_demap_matches_enumeration():
    t = named_labeling("256qam-shaped")
    post, bits, _ = awgn_posteriors(t, 12.0, 3, 5)
    rng = np.random.default_rng(6)
    apriori = rng.normal(0, 2, (3, t.m))
    got = soft_demap(post, apriori, t)
    ref = demap_brute_force(post, apriori, t.dim_i.prefixes, t.dim_q.prefixes, t.dim_i.m, t.dim_q.m)
    assert np.allclose(got, ref, atol=1e-8)


def test_conditioning_on_all_but_one_bit():
    t = named_labeling("256qam-shaped")
    post, bits, _ = awgn_posteriors(t, 10.0, 4, 7)
    label = np.random.default_rng(8).integers(0, 2, t.m).astype(np.uint8)
    for j in range(t.m):
        apriori = np.where(label == 0, 50.0, -50.0)[None, :].repeat(4, 0)
        apriori[:, j] = 0.0
        got = soft_demap(post, apriori, t)[:, j]
        lab0, lab1 = label.copy(), label.copy()
        lab0[j], lab1[j] = 0, 1
        s0, s1 = map_bits(lab0, t)[0], map_bits(lab1, t)[0]

        def owned(s):
            return 2.0 ** (t.m - t.dim_i.lengths[s // t.dim_q.n] - t.dim_q.lengths[s % t.dim_q.n])

        ref = np.log(post[:, s0] / owned(s0)) - np.log(post[:, s1] / owned(s1))
        assert np.allclose(got, np.clip(ref, -50, 50), atol=1e-6)


def test_qpsk_llrs_gaussian_consistent():
    t = named_labeling("4qam")
    post, bits, _ = awgn_posteriors(t, 6.0, 50_000, 9)
    ls = (soft_demap(post, None, t) * (1 - 2.0 * bits)).ravel()
    assert ls.mean() == pytest.approx(ls.var() / 2, rel=0.1)


@pytest.mark.parametrize("name,snr", [("16qam", 10.0), ("256qam-shaped", 14.0), ("1024qam-shaped", 18.0)])
def test_llrs_consistent(name, snr):
    # exact LLRs satisfy E[s tanh(L/2)] = E[tanh(L/2)^2] for s = 1 - 2b
    t = named_labeling(name)
    post, bits, _ = awgn_posteriors(t, snr, 10_000, 10)
    th = np.tanh(soft_demap(post, None, t) / 2)
    lhs = np.mean((1 - 2.0 * bits) * th)
    assert lhs == pytest.approx(np.mean(th**2), rel=0.02)


def test_degenerate_posteriors_clamped():
    t = named_labeling("16qam")
    post = np.zeros((1, 16))
    post[0, 3] = 1.0
    out = soft_demap(post, None, t)
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) == 50.0)


def test_labeling_file_round_trip(tmp_path):
    t = named_labeling("1024qam-shaped")
    write_labeling(tmp_path / "l.txt", t)
    back = read_labeling(tmp_path / "l.txt")
    assert back.dim_i.prefixes == t.dim_i.prefixes and back.dim_q.prefixes == t.dim_q.prefixes
    assert np.array_equal(back.dim_i.lengths, t.dim_i.lengths)
    text = (tmp_path / "l.txt").read_text()
    assert "# systematic_I=" in text


def test_corrupted_labeling_file_reports_line(tmp_path):
    t = named_labeling("256qam-shaped")
    p = tmp_path / "bad.txt"
    write_labeling(p, t)
    lines = p.read_text().splitlines()
    # lengthen one prefix: the Kraft sum drops below 1
    for i, ln in enumerate(lines):
        parts = ln.split()
        if parts and parts[0] == "I" and parts[2] == "3":
            parts[2], parts[3] = "4", parts[3] + "0"
            lines[i] = " ".join(parts)
            break
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(LabelingFileError, match=r"bad\.txt:\d+: Kraft"):
        read_labeling(p)


def test_systematic_positions_unique_for_every_symbol():
    t = named_labeling("1024qam-shaped")
    pos = t.systematic_positions()
    amb = t.ambiguity()
    assert np.all(amb[pos] == 0)
    order = t.position_order()
    assert np.all(np.diff(amb[order]) >= 0)


def test_build_labeling_from_marginals():
    t = build_labeling(reference_pam_pmf(16), np.full(16, 1 / 16))
    assert t.dim_i.m == 6 and t.dim_q.m == 4
