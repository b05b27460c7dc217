import numpy as np
import pytest

from opcert import wavelet as wv


def analysis_matrix(filt, n):
    """Dense single-level transform matrix built tap by tap (oracle)."""
    m = np.zeros((n, n))
    for k in range(n // 2):
        for tap in range(filt.length):
            col = (2 * k + tap) % n
            m[k, col] += filt.dec_lo[tap]
            m[n // 2 + k, col] += filt.dec_hi[tap]
    return m


def multilevel_matrix(filt, n, levels):
    """Compose per-level matrices acting on the leading lowpass block."""
    total = np.eye(n)
    size = n
    for _ in range(levels):
        step = np.eye(n)
        step[:size, :size] = analysis_matrix(filt, size)
        total = step @ total
        size //= 2
    return total


class TestFilters:
    @pytest.mark.parametrize("name,taps", [("db4", 8), ("db6", 12)])
    def test_lengths(self, name, taps):
        assert wv.get_filter(name).length == taps

    @pytest.mark.parametrize("name", ["db4", "db6"])
    def test_orthonormality(self, name):
        f = wv.get_filter(name)
        assert abs(np.sum(f.dec_lo**2) - 1.0) < 1e-10
        assert abs(np.sum(f.dec_lo) - np.sqrt(2.0)) < 1e-12
        # vanishing cross/auto correlation at even lags
        for g in (f.dec_lo, f.dec_hi):
            for lag in range(2, f.length, 2):
                assert abs(np.dot(g[:-lag], g[lag:])) < 1e-12
        assert abs(np.dot(f.dec_lo, f.dec_hi)) < 1e-12

    @pytest.mark.parametrize("name", ["db4", "db6"])
    def test_reconstruction_filters_time_reversed(self, name):
        f = wv.get_filter(name)
        assert np.array_equal(f.rec_lo, f.dec_lo[::-1])
        assert np.array_equal(f.rec_hi, f.dec_hi[::-1])

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            wv.get_filter("haar")


class TestDwt1d:
    def test_constant_annihilated(self):
        c = wv.dwt_multilevel(np.ones(64), wv.get_filter("db4"), 2)
        for d in c.details:
            assert np.max(np.abs(d)) < 1e-10

    def test_energy_preserved(self):
        gen = np.random.default_rng(0)
        x = gen.standard_normal(256)
        c = wv.dwt_multilevel(x, wv.get_filter("db6"), 3)
        energy = np.sum(c.approx**2) + sum(np.sum(d**2) for d in c.details)
        assert abs(energy - np.sum(x**2)) < 1e-10 * np.sum(x**2)

    def test_total_count_equals_length(self):
        x = np.random.default_rng(1).standard_normal(128)
        c = wv.dwt_multilevel(x, wv.get_filter("db4"), 4)
        assert c.total_count() == 128

    def test_matches_matrix_oracle(self):
        f = wv.get_filter("db6")
        x = np.random.default_rng(2).standard_normal(64)
        mat = multilevel_matrix(f, 64, 3)
        oracle = mat @ x
        c = wv.dwt_multilevel(x, f, 3)
        packed = np.concatenate([c.approx, c.details[2], c.details[1], c.details[0]])
        assert np.max(np.abs(packed - oracle)) < 1e-12
        # the oracle matrix must itself be orthogonal
        assert np.max(np.abs(mat @ mat.T - np.eye(64))) < 1e-12

    def test_impulse_inverse_matches_matrix_column(self):
        f = wv.get_filter("db4")
        n, levels = 32, 2
        mat_inv = multilevel_matrix(f, n, levels).T  # orthogonal inverse
        approx = np.zeros(n >> levels)
        approx[3] = 1.0
        coeffs = wv.DwtCoefficients(
            approx,
            [np.zeros(n >> k) for k in range(1, levels + 1)],
            levels,
            (n,),
            (0,),
        )
        rec = wv.idwt_multilevel(coeffs, f)
        assert np.max(np.abs(rec - mat_inv[:, 3])) < 1e-12

    @pytest.mark.parametrize("name", ["db4", "db6"])
    def test_roundtrip(self, name):
        f = wv.get_filter(name)
        x = np.random.default_rng(3).standard_normal(128)
        back = wv.idwt_multilevel(wv.dwt_multilevel(x, f, 3), f)
        assert np.max(np.abs(back - x)) < 1e-9

    def test_linearity(self):
        f = wv.get_filter("db6")
        gen = np.random.default_rng(4)
        x, y = gen.standard_normal(64), gen.standard_normal(64)
        a, b = 2.5, -1.25
        lhs = wv.dwt_packed(a * x + b * y, f, 2)
        rhs = a * wv.dwt_packed(x, f, 2) + b * wv.dwt_packed(y, f, 2)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_adjoint_identity(self):
        f = wv.get_filter("db4")
        gen = np.random.default_rng(5)
        x, c = gen.standard_normal(128), gen.standard_normal(128)
        lhs = np.dot(wv.dwt_packed(x, f, 3), c)
        rhs = np.dot(x, wv.idwt_packed(c, f, 3))
        assert abs(lhs - rhs) < 1e-10

    def test_indivisible_length_rejected(self):
        with pytest.raises(wv.DecompositionError):
            wv.dwt_multilevel(np.ones(60), wv.get_filter("db4"), 3)
        with pytest.raises(wv.DecompositionError):
            wv.dwt_multilevel(np.ones(64), wv.get_filter("db4"), 0)

    def test_padding_records_and_roundtrips(self):
        f = wv.get_filter("db4")
        x = np.random.default_rng(6).standard_normal(85)
        c = wv.dwt_multilevel(x, f, 2, pad_to_fit=True)
        assert c.pad == (3,)
        assert np.max(np.abs(wv.idwt_multilevel(c, f) - x)) < 1e-9

    def test_inconsistent_coefficients_rejected(self):
        f = wv.get_filter("db4")
        c = wv.dwt_multilevel(np.ones(64), f, 2)
        c.details[0] = c.details[0][:-1]
        with pytest.raises(wv.CoefficientError):
            wv.idwt_multilevel(c, f)


class TestDwt2d:
    def test_constant_field(self):
        c = wv.dwt2d_multilevel(np.ones((32, 32)), wv.get_filter("db4"), 2)
        for level in c.details:
            for band in level:
                assert np.max(np.abs(band)) < 1e-10

    def test_roundtrip_and_energy(self):
        f = wv.get_filter("db4")
        x = np.random.default_rng(7).standard_normal((64, 64))
        c = wv.dwt2d_multilevel(x, f, 2)
        back = wv.idwt2d_multilevel(c, f)
        assert np.max(np.abs(back - x)) < 1e-9
        energy = np.sum(c.approx**2) + sum(
            np.sum(b**2) for level in c.details for b in level
        )
        assert abs(energy - np.sum(x**2)) < 1e-9 * np.sum(x**2)

    def test_count_preserved(self):
        x = np.random.default_rng(8).standard_normal((32, 16))
        c = wv.dwt2d_multilevel(x, wv.get_filter("db4"), 2)
        assert c.total_count() == 32 * 16

    def test_matches_separable_matrix_oracle(self):
        f = wv.get_filter("db4")
        n = 16
        x = np.random.default_rng(9).standard_normal((n, n))
        m = analysis_matrix(f, n)
        oracle = m @ x @ m.T  # rows then columns, one level
        c = wv.dwt2d_multilevel(x, f, 1)
        h = n // 2
        packed = np.zeros((n, n))
        packed[:h, :h] = c.approx
        dx, dy, dxy = c.details[0]
        packed[:h, h:] = dy
        packed[h:, :h] = dx
        packed[h:, h:] = dxy
        assert np.max(np.abs(packed - oracle)) < 1e-12

    def test_packed_matches_container(self):
        f = wv.get_filter("db6")
        x = np.random.default_rng(10).standard_normal((32, 32))
        packed = wv.dwt2d_packed(x, f, 2)
        c = wv.dwt2d_multilevel(x, f, 2)
        assert np.max(np.abs(packed[:8, :8] - c.approx)) < 1e-12
        assert np.max(np.abs(wv.idwt2d_packed(packed, f, 2) - x)) < 1e-9

    def test_2d_padding(self):
        f = wv.get_filter("db4")
        x = np.random.default_rng(11).standard_normal((85, 85))
        c = wv.dwt2d_multilevel(x, f, 4, pad_to_fit=True)
        assert c.pad == (11, 11)
        assert np.max(np.abs(wv.idwt2d_multilevel(c, f) - x)) < 1e-9
