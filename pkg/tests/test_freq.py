import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syncmotion.freq import (
    SpectralCoeffs,
    ac_synthesis_basis,
    analyze,
    band_energy,
    band_signal,
    check_cutoff,
    decompose,
    n_coeff_rows,
    pack_freq_repr,
    recompose,
    split_bands,
    synthesize,
    unpack_freq_repr,
)

import oracles


def random_signal(rng, n, cols=3):
    return rng.standard_normal((n, cols))


class TestAnalyze:
    def test_constant_signal_is_pure_dc(self):
        x = np.full((64, 2), 5.0)
        c = analyze(x)
        np.testing.assert_allclose(c.a[0], 5.0, atol=1e-12)
        np.testing.assert_allclose(c.a[1:], 0.0, atol=1e-12)
        np.testing.assert_allclose(c.b, 0.0, atol=1e-12)

    def test_single_cosine_energy_location(self):
        u = np.arange(64)
        x = np.cos(2 * np.pi * 5 * u / 64)[:, None]
        c = analyze(x)
        a_ref, b_ref = oracles.dft_naive(x)
        np.testing.assert_allclose(c.a, a_ref, atol=1e-12)
        np.testing.assert_allclose(c.b, b_ref, atol=1e-12)
        np.testing.assert_allclose(c.a[5, 0], 0.5, atol=1e-12)
        np.testing.assert_allclose(c.a[59, 0], 0.5, atol=1e-12)
        mask = np.ones(64, dtype=bool)
        mask[[5, 59]] = False
        assert np.max(np.abs(c.a[mask])) < 1e-12

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        x = random_signal(rng, 64)
        np.testing.assert_allclose(synthesize(analyze(x)), x, atol=1e-9)

    def test_matches_naive_dft(self):
        rng = np.random.default_rng(1)
        for n in (16, 64, 128):
            x = random_signal(rng, n, 2)
            c = analyze(x)
            a_ref, b_ref = oracles.dft_naive(x)
            assert np.max(np.abs(c.a - a_ref)) < 1e-9
            assert np.max(np.abs(c.b - b_ref)) < 1e-9

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            analyze(np.zeros((8, 1)))

    def test_cutoff_validation(self):
        with pytest.raises(ValueError):
            check_cutoff(3, 64)
        with pytest.raises(ValueError):
            check_cutoff(16, 63)
        check_cutoff(16, 64)


class TestBands:
    def test_constant_all_dc(self):
        x = np.full((64, 1), 5.0)
        bands = split_bands(analyze(x), 16)
        np.testing.assert_allclose(bands.dc, 5.0, atol=1e-9)
        np.testing.assert_allclose(bands.ac, 0.0, atol=1e-12)

    def test_mid_band_cosine_goes_to_ac(self):
        u = np.arange(64)
        x = np.cos(2 * np.pi * 5 * u / 64)[:, None]
        for mode in ("symmetric", "literal"):
            bands = split_bands(analyze(x), 16, mode)
            np.testing.assert_allclose(bands.dc, 0.0, atol=1e-12)
            np.testing.assert_allclose(bands.ac, x, atol=1e-9)

    def test_high_frequency_discarded(self):
        u = np.arange(64)
        x = np.cos(2 * np.pi * 20 * u / 64)[:, None]
        bands = split_bands(analyze(x), 16)
        np.testing.assert_allclose(bands.dc, 0.0, atol=1e-12)
        np.testing.assert_allclose(bands.ac, 0.0, atol=1e-12)

    def test_exactness_all_modes(self):
        rng = np.random.default_rng(2)
        for mode in ("symmetric", "literal"):
            for n in (16, 64, 128):
                for L in {4, min(16, n // 4), n // 4}:
                    x = random_signal(rng, n)
                    c = analyze(x)
                    total = (
                        band_signal(c, L, "dc", mode)
                        + band_signal(c, L, "ac", mode)
                        + band_signal(c, L, "discarded", mode)
                    )
                    assert np.max(np.abs(total - x)) < 1e-9

    def test_band_signal_matches_naive_synthesis(self):
        rng = np.random.default_rng(3)
        x = random_signal(rng, 32, 2)
        c = analyze(x)
        a_ref, b_ref = oracles.dft_naive(x)
        L = 8
        dc = band_signal(c, L, "dc", "symmetric")
        ref = oracles.dft_synthesize_indices(a_ref, b_ref, range(-2, 3))
        np.testing.assert_allclose(dc, ref, atol=1e-9)
        ac = band_signal(c, L, "ac", "symmetric")
        idx = [l for k in range(3, L) for l in (k, -k)]
        np.testing.assert_allclose(ac, oracles.dft_synthesize_indices(a_ref, b_ref, idx), atol=1e-9)

    def test_literal_bands_match_paper_index_sets(self):
        rng = np.random.default_rng(4)
        x = random_signal(rng, 48, 2)
        c = analyze(x)
        a_ref, b_ref = oracles.dft_naive(x)
        L = 10
        dc = band_signal(c, L, "dc", "literal")
        np.testing.assert_allclose(
            dc, oracles.dft_synthesize_indices(a_ref, b_ref, range(-3, 3)), atol=1e-9
        )
        ac = band_signal(c, L, "ac", "literal")
        idx = list(range(-L, -3)) + list(range(3, L))
        np.testing.assert_allclose(
            ac, oracles.dft_synthesize_indices(a_ref, b_ref, idx), atol=1e-9
        )

    def test_idempotence(self):
        rng = np.random.default_rng(5)
        x = random_signal(rng, 64)
        bands = split_bands(analyze(x), 16)
        again_dc = split_bands(analyze(bands.dc), 16)
        np.testing.assert_allclose(again_dc.dc, bands.dc, atol=1e-9)
        np.testing.assert_allclose(again_dc.ac, 0.0, atol=1e-9)
        again_ac = split_bands(analyze(bands.ac), 16)
        np.testing.assert_allclose(again_ac.ac, bands.ac, atol=1e-9)
        np.testing.assert_allclose(again_ac.dc, 0.0, atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_linearity(self, seed):
        rng = np.random.default_rng(seed)
        x, y = random_signal(rng, 64), random_signal(rng, 64)
        alpha, beta = rng.uniform(-2, 2, 2)
        left = split_bands(analyze(alpha * x + beta * y), 16)
        bx, by = split_bands(analyze(x), 16), split_bands(analyze(y), 16)
        np.testing.assert_allclose(left.dc, alpha * bx.dc + beta * by.dc, atol=1e-9)
        np.testing.assert_allclose(left.ac, alpha * bx.ac + beta * by.ac, atol=1e-9)

    def test_real_valued_output(self):
        rng = np.random.default_rng(6)
        x = random_signal(rng, 64)
        bands = split_bands(analyze(x), 16, "literal")
        assert bands.dc.dtype == np.float64 and bands.ac.dtype == np.float64


class TestPacking:
    def test_row_count(self):
        rng = np.random.default_rng(7)
        x = random_signal(rng, 64)
        F = pack_freq_repr(analyze(x), 16)
        assert n_coeff_rows(16) == 52
        assert np.any(F[:52] != 0.0)
        np.testing.assert_array_equal(F[52:], 0.0)

    def test_ac_silent_signal_packs_to_zero(self):
        u = np.arange(64)
        # dc content + discarded content only
        x = (1.5 + np.cos(2 * np.pi * 2 * u / 64) + np.cos(2 * np.pi * 20 * u / 64))[:, None]
        F = pack_freq_repr(analyze(x), 16)
        np.testing.assert_allclose(F, 0.0, atol=1e-12)

    def test_pack_unpack_round_trip(self):
        rng = np.random.default_rng(8)
        for mode in ("symmetric", "literal"):
            x = random_signal(rng, 64)
            bands = split_bands(analyze(x), 16, mode)
            ac = unpack_freq_repr(bands.F, 16, 64)
            np.testing.assert_allclose(ac, bands.ac, atol=1e-9)

    def test_unpack_reproduces_interior_cosine(self):
        u = np.arange(64)
        x = np.cos(2 * np.pi * 5 * u / 64)[:, None]
        F = pack_freq_repr(analyze(x), 16)
        np.testing.assert_allclose(unpack_freq_repr(F, 16, 64), x, atol=1e-9)

    def test_zero_rows_ignored(self):
        rng = np.random.default_rng(9)
        x = random_signal(rng, 64)
        F = pack_freq_repr(analyze(x), 16)
        perturbed = F.copy()
        perturbed[52:] = rng.standard_normal(perturbed[52:].shape)
        np.testing.assert_array_equal(
            unpack_freq_repr(F, 16, 64), unpack_freq_repr(perturbed, 16, 64)
        )

    def test_zero_f_gives_zero_ac(self):
        np.testing.assert_array_equal(unpack_freq_repr(np.zeros((64, 3)), 16, 64), 0.0)

    def test_basis_shape(self):
        basis = ac_synthesis_basis(64, 16)
        assert basis.shape == (64, 52)


class TestRecompose:
    def test_dc_plus_zero(self):
        rng = np.random.default_rng(10)
        x = random_signal(rng, 64)
        np.testing.assert_array_equal(recompose(x, np.zeros_like(x)), x)

    def test_band_limited_round_trip(self):
        rng = np.random.default_rng(11)
        c = SpectralCoeffs(a=np.zeros((64, 1)), b=np.zeros((64, 1)))
        for l in (0, 1, 2, 5, 9, 15):
            c.a[l] = rng.standard_normal()
            c.b[l] = rng.standard_normal()
            if l:
                c.a[64 - l] = c.a[l]
                c.b[64 - l] = -c.b[l]
        x = synthesize(c)
        bands = split_bands(analyze(x), 16)
        np.testing.assert_allclose(recompose(bands.dc, bands.ac), x, atol=1e-9)

    def test_zero_plus_zero(self):
        z = np.zeros((4, 2))
        np.testing.assert_array_equal(recompose(z, z), z)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            recompose(np.zeros((4, 2)), np.zeros((5, 2)))


def test_band_energy_partition():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((64, 2))
    e = band_energy(x, 16)
    # orthogonal bands: energies add up to the total
    assert abs(sum(e.values()) - float(np.sum(x**2))) < 1e-6
