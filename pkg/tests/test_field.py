import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fieldattn.corpus import CandidateSpan, ParsedSentence, Token
from fieldattn.field import (
    BiasScope,
    FieldSpec,
    RecoupleConfig,
    Strategy,
    bias_record,
    build_bias,
    field_size,
    fusion_bias,
    gau_bias,
    gmm_bias,
    mul_bias,
    mul_recouple,
)

from oracles import oracle_gau, oracle_gmm, oracle_mul

CENTRAL = BiasScope.CENTRAL_ROW


def chain(n):
    return ParsedSentence(tuple(Token(i, f"w{i}", i + 1 if i + 1 < n else None) for i in range(n)), id="chain")


def test_field_size_examples():
    assert field_size(ParsedSentence((Token(0, "a", None),)), 0) == 1
    assert field_size(chain(3), 1) == 1
    heads = [5, 0, 0, 0, 0, None]
    s = ParsedSentence(tuple(Token(i, "w", h) for i, h in enumerate(heads)))
    # center 0: head at 5, children at 1..4 -> largest offset 5
    assert field_size(s, 0) == 5
    with pytest.raises(IndexError):
        field_size(s, 6)


def test_gau_examples():
    g = gau_bias(5, FieldSpec(2, 2)).values
    assert g[2, 2] == 0.0
    assert g[2, 3] == -0.5
    assert g[2, 0] == -2.0
    assert np.all(np.delete(g, 2, axis=0) == 0.0)


def test_gau_all_rows():
    g = gau_bias(6, FieldSpec(1, 3), BiasScope.ALL_ROWS).values
    for r in range(6):
        np.testing.assert_array_equal(g[r], g[1])
    assert g[0, 1] == 0.0


def test_gau_shape_properties():
    row = gau_bias(12, FieldSpec(4, 3)).values[4]
    assert np.all(row <= 0)
    assert np.argmax(row) == 4
    d = np.abs(np.arange(12) - 4)
    for a in range(12):
        for b in range(12):
            if d[a] < d[b]:
                assert row[a] > row[b]


def test_mul_recouple_examples():
    assert mul_recouple([FieldSpec(3, 2)]) == (3.0, 1.0)
    mu, sd = mul_recouple([FieldSpec(0, 2), FieldSpec(4, 2)])
    assert mu == 2.0
    assert sd**2 == pytest.approx(0.5, abs=1e-15)
    mu, sd = mul_recouple([FieldSpec(5, 4), FieldSpec(5, 4)])
    assert mu == 5.0
    assert sd == pytest.approx(math.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        mul_recouple([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 50), st.integers(1, 12)), min_size=1, max_size=5))
def test_mul_recouple_bounds(members):
    group = [FieldSpec(c, d) for c, d in members]
    mu, sd = mul_recouple(group)
    assert sd <= min(f.sigma for f in group) + 1e-12
    assert min(f.center for f in group) - 1e-9 <= mu <= max(f.center for f in group) + 1e-9


def test_mul_singleton_doubles_gau():
    f = FieldSpec(3, 2)
    np.testing.assert_allclose(mul_bias(8, f, [f]).values, 2 * gau_bias(8, f).values, atol=1e-15)


def test_mul_zero_at_coinciding_centre():
    f = FieldSpec(4, 2)
    assert mul_bias(9, f, [f]).values[4, 4] == 0.0


def test_mul_two_centres_brute_force():
    group = [FieldSpec(2, 2), FieldSpec(6, 2)]
    for f in group:
        got = mul_bias(8, f, group).values
        want = oracle_mul(8, f.center, 1.0, [(2, 1.0), (6, 1.0)])
        np.testing.assert_allclose(got[f.center], want, atol=1e-12)
        assert np.all(got <= 0)


def test_gmm_singleton_is_gau_plus_constant():
    f = FieldSpec(3, 4)
    g = gmm_bias(10, f, [f], RecoupleConfig(Strategy.GMM, alpha=1.0, beta=0.0)).values[3]
    expect = gau_bias(10, f).values[3] - math.log(math.sqrt(2 * math.pi * f.sigma**2))
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_gmm_symmetric_pair():
    group = [FieldSpec(2, 2), FieldSpec(6, 2)]
    row = gmm_bias(9, group[0], group, RecoupleConfig(Strategy.GMM)).values[2]
    # midpoint 4: row[4 - k] == row[4 + k]
    for k in range(5):
        assert row[4 - k] == pytest.approx(row[4 + k], abs=1e-12)


def test_gmm_naive_oracle():
    group = [FieldSpec(2, 2), FieldSpec(6, 2)]
    cfg = RecoupleConfig(Strategy.GMM, 0.5, 0.5)
    for f in group:
        other = [(g.center, g.sigma) for g in group if g != f]
        got = gmm_bias(8, f, group, cfg).values[f.center]
        np.testing.assert_allclose(got, oracle_gmm(8, f.center, f.sigma, other, 0.5, 0.5), atol=1e-12)


def test_gmm_extreme_distances_stay_finite():
    group = [FieldSpec(0, 1), FieldSpec(10_000, 1)]
    cfg = RecoupleConfig(Strategy.GMM)
    row = gmm_bias(10_001, group[0], group, cfg).values[0]
    assert np.all(np.isfinite(row))
    # near each centre the other component is negligible
    assert row[0] == pytest.approx(math.log(0.5) - 0.5 * math.log(2 * math.pi * 0.25), abs=1e-12)
    assert row[10_000] == pytest.approx(math.log(0.5) - 0.5 * math.log(2 * math.pi * 0.25), abs=1e-12)


def test_gmm_zero_weights_rejected():
    f = FieldSpec(1, 2)
    with pytest.raises(ValueError):
        gmm_bias(4, f, [f], RecoupleConfig(Strategy.GMM, alpha=0.0, beta=0.0))
    with pytest.raises(ValueError):
        RecoupleConfig(Strategy.GMM, alpha=0.8, beta=0.5)
    with pytest.raises(ValueError):
        gmm_bias(4, f, [FieldSpec(2, 2)], RecoupleConfig(Strategy.GMM))


def test_fusion_is_mean():
    group = [FieldSpec(2, 2), FieldSpec(6, 2)]
    cfg = RecoupleConfig(Strategy.FUSION)
    for f in group:
        want = 0.5 * (mul_bias(8, f, group).values + gmm_bias(8, f, group, cfg).values)
        np.testing.assert_allclose(fusion_bias(8, f, group, cfg).values, want, atol=1e-15)
    f = FieldSpec(3, 2)
    single = 0.5 * (2 * gau_bias(8, f).values[3] + gmm_bias(8, f, [f], cfg).values[3])
    np.testing.assert_allclose(fusion_bias(8, f, [f], cfg).values[3], single, atol=1e-15)


def test_fusion_idempotent_when_equal():
    # mean of a matrix with itself is itself; check the operator directly
    f = FieldSpec(2, 2)
    m = mul_bias(6, f, [f]).values
    np.testing.assert_array_equal(0.5 * (m + m), m)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 10), st.integers(1, 6)), min_size=1, max_size=4, unique_by=lambda t: t[0]),
    st.integers(1, 20),
)
def test_translation_invariance(members, shift):
    n = 12
    group = [FieldSpec(c, d) for c, d in members]
    moved = [FieldSpec(c + shift, d) for c, d in members]
    f, g = group[0], moved[0]
    cfg = RecoupleConfig(Strategy.GMM)
    pairs = [
        (gau_bias(n, f).values, gau_bias(n + shift, g).values),
        (mul_bias(n, f, group).values, mul_bias(n + shift, g, moved).values),
        (gmm_bias(n, f, group, cfg).values, gmm_bias(n + shift, g, moved, cfg).values),
    ]
    for a, b in pairs:
        np.testing.assert_allclose(a[f.center], b[g.center, shift:], atol=1e-9)


FIG1 = "Attack happened without declaration of war , the attack was judged".split()


def fig1():
    heads = [1, None, 1, 2, 3, 4, 1, 8, 10, 10, 1]
    tokens = tuple(Token(i, w, h) for i, (w, h) in enumerate(zip(FIG1, heads)))
    return ParsedSentence(tokens, (CandidateSpan(0, 1), CandidateSpan(8, 1)), "fig1")


def test_build_bias_dispatch():
    s = fig1()
    c = s.candidates[0]
    assert not build_bias(s, c, RecoupleConfig(Strategy.NONE)).values.any()
    sigma = field_size(s, 0) / 2
    gau = build_bias(s, c, RecoupleConfig(Strategy.GAU)).values
    np.testing.assert_allclose(gau[0], oracle_gau(len(s), 0, sigma))


def test_build_bias_mul_fig1_argmax_between_occurrences():
    s = fig1()
    cfg = RecoupleConfig(Strategy.MUL)
    specs = [(c.position, field_size(s, c.position) / 2) for c in s.candidates]
    for c in s.candidates:
        row = build_bias(s, c, cfg).values[c.position]
        want = oracle_mul(len(s), c.position, field_size(s, c.position) / 2, specs)
        np.testing.assert_allclose(row, want, atol=1e-12)
        best = max(range(len(s)), key=lambda j: want[j])
        assert int(np.argmax(row)) == best
        assert 0 <= best <= 8


def test_build_bias_singleton_group_is_total():
    s = fig1()
    s = ParsedSentence(s.tokens, (CandidateSpan(5, 2),), s.id)
    for strat in Strategy:
        g = build_bias(s, s.candidates[0], RecoupleConfig(strat)).values
        assert g.shape == (len(s), len(s))
        assert np.all(np.isfinite(g))


def test_bias_record_layout():
    s = fig1()
    rec = bias_record(s, s.candidates[1], RecoupleConfig(Strategy.FUSION))
    assert rec["strategy"] == "fusion" and rec["n"] == len(s)
    assert len(rec["matrix"]) == len(s) and len(rec["matrix"][0]) == len(s)
    assert all(v == 0.0 for i, row in enumerate(rec["matrix"]) if i != 8 for v in row)


def test_matrices_read_only():
    g = gau_bias(4, FieldSpec(1, 2))
    with pytest.raises(ValueError):
        g.values[0, 0] = 1.0
