import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from power_attention import (
    DimensionMismatch,
    ExpansionKind,
    ExpansionSpec,
    InvalidSpec,
    enumerate_ndmi,
    expand,
    expansion_dim,
    expansion_inner,
    multinomial_weight,
)
from power_attention.expansions import ENUMERATION_CAP, monomial_table

from conftest import max_rel_error


class TestExpansionDim:
    @pytest.mark.parametrize(
        "spec,expected",
        [
            (ExpansionSpec.spow(2, 64), 2080),
            (ExpansionSpec.tpow(3, 64), 262144),
            (ExpansionSpec.spow(1, 17), 17),
            (ExpansionSpec.tspow(2, 64, 8), 2304),  # C(9,2) * 8^2
            (ExpansionSpec.tpow(6, 64), 68719476736),
            (ExpansionSpec.spow(6, 64), 119877472),
        ],
    )
    def test_values(self, spec, expected):
        assert expansion_dim(spec) == expected

    def test_tspow_formulas(self):
        # literal formulas: C(d/d_tile+p-1, p) * d_tile^p; one tile -> d^p
        for d, p, tile in [(8, 2, 2), (8, 3, 4), (16, 2, 8), (6, 4, 3)]:
            n_tiles = d // tile
            expected = math.comb(n_tiles + p - 1, p) * tile**p
            assert expansion_dim(ExpansionSpec.tspow(p, d, tile)) == expected
        for d, p in [(4, 2), (8, 3)]:
            assert expansion_dim(ExpansionSpec.tspow(p, d, d)) == d**p

    def test_dim_ordering(self):
        # spow <= tspow <= tpow for p >= 2
        for d, p, tile in [(8, 2, 2), (8, 3, 4), (16, 4, 4)]:
            spow = expansion_dim(ExpansionSpec.spow(p, d))
            tspow = expansion_dim(ExpansionSpec.tspow(p, d, tile))
            tpow = expansion_dim(ExpansionSpec.tpow(p, d))
            assert spow < tspow <= tpow

    def test_invalid_tile(self):
        with pytest.raises(InvalidSpec):
            ExpansionSpec.tspow(2, 64, 7)

    def test_overflow(self):
        with pytest.raises(OverflowError):
            expansion_dim(ExpansionSpec.tpow(12, 64))

    def test_table_savings(self):
        # savings column: 1 - C(d+p-1,p)/d^p for d=64, p=2..6 truncates to
        # 49/82/95/99 percent, and to 99.8 at p=6
        for p, whole in {2: 49, 3: 82, 4: 95, 5: 99}.items():
            frac = 1 - expansion_dim(ExpansionSpec.spow(p, 64)) / expansion_dim(
                ExpansionSpec.tpow(p, 64)
            )
            assert math.floor(frac * 100) == whole
        frac6 = 1 - expansion_dim(ExpansionSpec.spow(6, 64)) / expansion_dim(
            ExpansionSpec.tpow(6, 64)
        )
        assert math.floor(frac6 * 1000) == 998

    def test_state_expansion_factor(self):
        # D/d at d=64: ~32.5 for p=2, 715 for p=3, ~11976 for p=4
        factors = {p: expansion_dim(ExpansionSpec.spow(p, 64)) / 64 for p in (2, 3, 4)}
        assert factors[2] == pytest.approx(32.5)
        assert factors[3] == pytest.approx(715.0)
        assert factors[4] == pytest.approx(11976.25)


class TestNdmi:
    def test_small_enumerations(self):
        assert enumerate_ndmi(2, 2).tolist() == [[0, 0], [0, 1], [1, 1]]
        assert enumerate_ndmi(2, 3).tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 1]]
        assert enumerate_ndmi(1, 5).tolist() == [[0, 0, 0, 0, 0]]

    @pytest.mark.parametrize("d,p", [(2, 2), (3, 4), (5, 3), (8, 2), (1, 7)])
    def test_count_and_order(self, d, p):
        ndmi = enumerate_ndmi(d, p)
        assert ndmi.shape == (math.comb(d + p - 1, p), p)
        assert (np.diff(ndmi, axis=1) >= 0).all()  # non-decreasing rows
        as_tuples = [tuple(row) for row in ndmi]
        assert as_tuples == sorted(as_tuples)  # lexicographic
        assert len(set(as_tuples)) == len(as_tuples)

    def test_stable_across_calls(self):
        assert enumerate_ndmi(5, 3).tolist() == enumerate_ndmi(5, 3).tolist()

    def test_cap(self):
        with pytest.raises(OverflowError):
            enumerate_ndmi(64, 8, cap=10_000)


class TestMultinomialWeight:
    @pytest.mark.parametrize(
        "indices,p,expected",
        [
            ((0, 1), 2, math.sqrt(2)),
            ((0, 0), 2, 1.0),
            ((0, 0, 1), 3, math.sqrt(3)),
            ((0, 1, 2), 3, math.sqrt(6)),
            ((1, 1, 1), 3, 1.0),
        ],
    )
    def test_values(self, indices, p, expected):
        assert multinomial_weight(indices, p) == pytest.approx(expected, rel=1e-15)

    def test_exact_small_degrees(self):
        # exact in double precision for p <= 8
        for p in range(1, 9):
            idx = tuple(range(p))  # all distinct: weight sqrt(p!)
            assert multinomial_weight(idx, p) == math.sqrt(math.factorial(p))
            assert multinomial_weight((0,) * p, p) == 1.0

    def test_large_degree_loggamma(self):
        w = multinomial_weight(tuple(range(12)), 12)
        assert w == pytest.approx(math.sqrt(math.factorial(12)), rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(InvalidSpec):
            multinomial_weight((0, 1), 3)


class TestExpand:
    def test_tpow_ordered_products(self):
        out = expand(np.array([1.0, 2.0]), ExpansionSpec.tpow(2, 2))
        assert out.tolist() == [1.0, 2.0, 2.0, 4.0]

    def test_spow_worked_example(self):
        out = expand(np.array([1.0, 2.0]), ExpansionSpec.spow(2, 2))
        np.testing.assert_allclose(out, [1.0, 2 * math.sqrt(2), 4.0], rtol=1e-15)

    def test_spow_sparsity(self):
        out = expand(np.array([1.0, 0.0]), ExpansionSpec.spow(2, 2))
        assert out.tolist() == [1.0, 0.0, 0.0]

    @pytest.mark.parametrize("kind,tile", [("tpow", None), ("spow", None), ("tspow", 2)])
    def test_identity_at_degree_one(self, kind, tile, rng):
        x = rng.uniform(-1, 1, 6)
        spec = ExpansionSpec(ExpansionKind(kind), 1, 6, tile)
        np.testing.assert_array_equal(expand(x, spec), x)

    def test_batched_matches_single(self, rng):
        spec = ExpansionSpec.spow(3, 4)
        x = rng.uniform(-1, 1, (2, 5, 4))
        batched = expand(x, spec)
        for i in range(2):
            for j in range(5):
                np.testing.assert_array_equal(batched[i, j], expand(x[i, j], spec))

    def test_length_checked(self):
        with pytest.raises(DimensionMismatch):
            expand(np.ones(3), ExpansionSpec.spow(2, 4))

    def test_float32_preserved(self):
        out = expand(np.ones(4, dtype=np.float32), ExpansionSpec.spow(2, 4))
        assert out.dtype == np.float32


class TestInnerProduct:
    def test_orthogonal(self):
        spec = ExpansionSpec.spow(2, 2)
        got = expansion_inner(np.array([1.0, 1.0]), np.array([1.0, -1.0]), spec)
        assert abs(got) <= 1e-9  # (x . y)^2 = 0 for orthogonal inputs

    @pytest.mark.parametrize("kind,tile", [("tpow", None), ("spow", None), ("tspow", 1)])
    def test_worked_value(self, kind, tile):
        spec = ExpansionSpec(ExpansionKind(kind), 2, 2, tile)
        got = expansion_inner(np.array([1.0, 2.0]), np.array([3.0, 4.0]), spec)
        assert got == pytest.approx(121.0, rel=1e-12)

    def test_unit_vector_tspow(self):
        x = np.zeros(64)
        x[0] = 1.0
        spec = ExpansionSpec.tspow(4, 64, 8)
        assert expansion_inner(x, x, spec) == pytest.approx(1.0, rel=1e-12)

    def test_shortcut_above_threshold(self, rng):
        spec = ExpansionSpec.tpow(4, 16)  # D = 65536
        x = rng.uniform(-1, 1, 16)
        y = rng.uniform(-1, 1, 16)
        direct = expansion_inner(x, y, spec, materialize_threshold=10)
        materialized = expansion_inner(x, y, spec)
        assert direct == pytest.approx(materialized, rel=1e-12)

    @given(
        d=st.integers(2, 16),
        p=st.integers(1, 4),
        kind=st.sampled_from(list(ExpansionKind)),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_identity_property(self, d, p, kind, data):
        if kind is ExpansionKind.TSPOW:
            divisors = [t for t in range(1, d + 1) if d % t == 0]
            tile = data.draw(st.sampled_from(divisors))
            spec = ExpansionSpec.tspow(p, d, tile)
        else:
            spec = ExpansionSpec(kind, p, d)
        seed = data.draw(st.integers(0, 2**32 - 1))
        gen = np.random.default_rng(seed)
        x = gen.uniform(-1, 1, d)
        y = gen.uniform(-1, 1, d)
        got = float(expand(x, spec) @ expand(y, spec))
        want = float(np.dot(x, y) ** p)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


class TestMonomialTable:
    @pytest.mark.parametrize(
        "spec",
        [
            ExpansionSpec.tpow(3, 3),
            ExpansionSpec.spow(3, 5),
            ExpansionSpec.tspow(2, 6, 2),
            ExpansionSpec.tspow(3, 4, 2),
        ],
    )
    def test_table_matches_expand(self, spec, rng):
        idx, weights = monomial_table(spec)
        assert idx.shape == (expansion_dim(spec), spec.p)
        x = rng.uniform(-1, 1, spec.d)
        via_table = weights * np.prod(x[idx], axis=1)
        np.testing.assert_allclose(via_table, expand(x, spec), rtol=1e-14)

    def test_cap_guard(self):
        with pytest.raises(OverflowError):
            monomial_table(ExpansionSpec.tpow(8, 64))  # D = 2^48 > cap

    def test_cap_value(self):
        assert ENUMERATION_CAP == 2**31
