"""Transform-domain decomposition: oracles, identities, gradient checks."""

import numpy as np
import pytest

from mpmri import tensor_core as tc
from mpmri.tensor_core import GroupingMode


def brute_spectrum(t):
    """Independent oracle: explicit DFT loops plus per-slice SVD."""
    w, h, s, n = t.shape
    that = np.zeros((w, h, s, n), dtype=complex)
    for a in range(s):
        for b in range(n):
            for j in range(s):
                for k in range(n):
                    that[:, :, a, b] += t[:, :, j, k] * np.exp(
                        -2j * np.pi * (a * j / s + b * k / n)
                    )
    out = np.zeros((min(w, h), s, n))
    for a in range(s):
        for b in range(n):
            out[:, a, b] = np.linalg.svd(that[:, :, a, b], compute_uv=False)
    return out


def svd2x2(m):
    """Closed-form singular values of a 2x2 complex matrix."""
    g = m.conj().T @ m
    tr = g[0, 0].real + g[1, 1].real
    det = np.linalg.det(g).real
    disc = max(tr * tr / 4 - det, 0.0)
    lam1 = tr / 2 + np.sqrt(disc)
    lam2 = max(tr - lam1, 0.0)
    return np.sqrt([lam1, lam2])


def brute_tdr(y, y_gt, grouping, drop):
    groups = tc.channel_groups(y.shape[3], grouping)
    ratios = []
    for idx in groups:
        sp = brute_spectrum(y[:, :, :, idx])
        sg = brute_spectrum(y_gt[:, :, :, idx])
        if drop:
            sp[-drop:] = 0.0
            sg[-drop:] = 0.0
        ratios.append(np.sum((sg - sp) ** 2) / np.sum(sg**2))
    return float(np.mean(ratios))


class TestTsvd:
    def test_zero_tensor_zero_spectrum(self):
        f = tc.tsvd(np.zeros((2, 2, 2, 2)))
        assert np.all(f.sigma == 0.0)

    def test_singleton_modes_reduce_to_matrix_svd(self):
        t = np.diag([3.0, 1.0])[:, :, None, None]
        f = tc.tsvd(t)
        np.testing.assert_allclose(f.sigma[:, 0, 0], [3.0, 1.0], atol=1e-12)

    def test_two_slice_dft_oracle(self):
        rng = np.random.default_rng(42)
        t = rng.standard_normal((2, 2, 2, 1))
        sig = tc.tsvd(t).sigma
        a0, a1 = t[:, :, 0, 0], t[:, :, 1, 0]
        np.testing.assert_allclose(sig[:, 0, 0], svd2x2(a0 + a1 + 0j), atol=1e-12)
        np.testing.assert_allclose(sig[:, 1, 0], svd2x2(a0 - a1 + 0j), atol=1e-12)

    def test_spectrum_matches_brute_force(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((3, 4, 3, 2))
        np.testing.assert_allclose(tc.tsvd_spectrum(t)[0], brute_spectrum(t), atol=1e-10)

    def test_nonfinite_rejected(self):
        t = np.zeros((2, 2, 2, 2))
        t[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            tc.tsvd(t)

    def test_spectra_sorted_descending_nonnegative(self):
        rng = np.random.default_rng(2)
        s = tc.tsvd_spectrum(rng.standard_normal((5, 6, 3, 4)))[0]
        assert np.all(s >= 0)
        assert np.all(np.diff(s, axis=0) <= 1e-12)


class TestGrouping:
    def test_merged_equals_whole_tensor(self):
        rng = np.random.default_rng(3)
        t = rng.standard_normal((3, 3, 2, 4))
        merged = tc.tsvd_spectrum(t, GroupingMode.MERGED)
        assert len(merged) == 1
        np.testing.assert_allclose(merged[0], tc.tsvd(t).sigma, atol=1e-12)

    def test_per_parameter_on_single_channel_equals_merged(self):
        rng = np.random.default_rng(4)
        t = rng.standard_normal((3, 3, 2, 1))
        a = tc.tsvd_spectrum(t, GroupingMode.PER_PARAMETER)
        b = tc.tsvd_spectrum(t, GroupingMode.MERGED)
        assert len(a) == len(b) == 1
        np.testing.assert_allclose(a[0], b[0], atol=1e-14)

    def test_groups_partition_channels(self):
        for n in (1, 2, 3, 5, 7, 9):
            for mode in GroupingMode:
                groups = tc.channel_groups(n, mode)
                cat = np.concatenate(groups)
                assert sorted(cat.tolist()) == list(range(n))
                assert all(len(g) > 0 for g in groups)

    def test_per_model_seven_channel_split(self):
        groups = tc.channel_groups(7, GroupingMode.PER_MODEL)
        assert [g.tolist() for g in groups] == [[0, 1, 2, 3], [4, 5, 6]]


class TestParseval:
    def test_parseval_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            dims = tuple(rng.integers(1, 7, size=4))
            t = rng.standard_normal(dims)
            s = tc.tsvd_spectrum(t)[0]
            lhs = np.sum(s**2)
            rhs = dims[2] * dims[3] * np.sum(t**2)
            assert abs(lhs - rhs) <= 1e-9 * rhs


class TestTruncation:
    def test_drop_zero_is_identity(self):
        rng = np.random.default_rng(6)
        s = np.sort(rng.random((3, 2, 2)), axis=0)[::-1]
        np.testing.assert_array_equal(tc.truncate_spectrum(s, 0), s)

    def test_drop_one_zeroes_smallest(self):
        s = np.array([3.0, 1.0]).reshape(2, 1, 1)
        out = tc.truncate_spectrum(s, 1)
        np.testing.assert_array_equal(out[:, 0, 0], [3.0, 0.0])

    def test_drop_out_of_range_rejected(self):
        s = np.zeros((2, 1, 1))
        with pytest.raises(ValueError):
            tc.truncate_spectrum(s, 2)
        with pytest.raises(ValueError):
            tc.truncate_spectrum(s, -1)

    def test_truncation_residual_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            t = rng.standard_normal((5, 4, 3, 2))
            f = tc.tsvd(t)
            for drop in (1, 2, 3):
                rec = tc.reconstruct(tc.truncate_factors(f, drop))
                resid = np.sum((t - rec) ** 2)
                dropped = np.sum(f.sigma[-drop:] ** 2) / (3 * 2)
                assert abs(resid - dropped) <= 1e-9 * max(dropped, 1e-30)


class TestReconstruct:
    def test_roundtrip(self):
        rng = np.random.default_rng(8)
        t = rng.standard_normal((4, 4, 3, 2))
        rec = tc.reconstruct(tc.tsvd(t))
        assert np.linalg.norm(rec - t) / np.linalg.norm(t) < 1e-10

    def test_tubal_rank_one_truncation_is_lossless(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal(4)
        b = rng.standard_normal(5)
        c = rng.standard_normal((3, 2))
        t = a[:, None, None, None] * b[None, :, None, None] * c[None, None, :, :]
        f = tc.tsvd(t)
        rec = tc.reconstruct(tc.truncate_factors(f, 3))  # keep only the top value
        assert np.linalg.norm(rec - t) / np.linalg.norm(t) < 1e-10


class TestOrthogonalInvariance:
    def test_left_rotation_preserves_spectrum(self):
        rng = np.random.default_rng(10)
        t = rng.standard_normal((5, 4, 3, 2))
        q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        t_rot = np.einsum("wv,vhsn->whsn", q, t)
        s1 = tc.tsvd_spectrum(t)[0]
        s2 = tc.tsvd_spectrum(t_rot)[0]
        assert np.max(np.abs(s1 - s2)) < 1e-10


class TestTdrLoss:
    def test_equal_tensors_zero(self):
        rng = np.random.default_rng(11)
        t = rng.standard_normal((3, 3, 2, 2))
        assert tc.tdr_loss(t, t) == 0.0

    def test_zero_prediction_gives_one(self):
        rng = np.random.default_rng(12)
        g = rng.standard_normal((3, 3, 2, 2))
        assert abs(tc.tdr_loss(np.zeros_like(g), g) - 1.0) < 1e-12

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(13)
        y = rng.standard_normal((3, 4, 2, 2))
        g = rng.standard_normal((3, 4, 2, 2))
        for mode in GroupingMode:
            for drop in (0, 1):
                got = tc.tdr_loss(y, g, mode, drop)
                want = brute_tdr(y, g, mode, drop)
                assert abs(got - want) < 1e-10 * max(1.0, abs(want))

    def test_zero_reference_rejected(self):
        y = np.ones((2, 2, 2, 1))
        with pytest.raises(ValueError, match="zero"):
            tc.tdr_loss(y, np.zeros_like(y))

    def test_scale_free(self):
        rng = np.random.default_rng(14)
        y = rng.standard_normal((3, 3, 2, 2))
        g = rng.standard_normal((3, 3, 2, 2))
        base = tc.tdr_loss(y, g)
        for c in (-2.5, 0.3, 7.0):
            assert abs(tc.tdr_loss(c * y, c * g) - base) < 1e-12


class TestTdrGrad:
    def test_zero_at_minimum(self):
        rng = np.random.default_rng(15)
        t = rng.standard_normal((3, 3, 2, 2))
        grad = tc.tdr_grad(t, t)
        assert np.max(np.abs(grad)) < 1e-12

    @pytest.mark.parametrize("mode", list(GroupingMode))
    @pytest.mark.parametrize("drop", [0, 1])
    def test_finite_difference_agreement(self, mode, drop):
        rng = np.random.default_rng(16)
        h = 1e-6
        for _ in range(3):
            y = rng.standard_normal((4, 4, 2, 2))
            g = rng.standard_normal((4, 4, 2, 2))
            grad = tc.tdr_grad(y, g, mode, drop)
            fd = np.zeros_like(y)
            it = np.nditer(y, flags=["multi_index"])
            for _v in it:
                i = it.multi_index
                yp, ym = y.copy(), y.copy()
                yp[i] += h
                ym[i] -= h
                fd[i] = (tc.tdr_loss(yp, g, mode, drop) - tc.tdr_loss(ym, g, mode, drop)) / (2 * h)
            assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) < 1e-4

    def test_per_parameter_channels_are_uncoupled(self):
        rng = np.random.default_rng(17)
        y = rng.standard_normal((3, 3, 2, 3))
        g = rng.standard_normal((3, 3, 2, 3))
        y2 = y.copy()
        y2[:, :, :, 1] += rng.standard_normal((3, 3, 2))
        g1 = tc.tdr_grad(y, g, GroupingMode.PER_PARAMETER)
        g2 = tc.tdr_grad(y2, g, GroupingMode.PER_PARAMETER)
        np.testing.assert_allclose(g1[:, :, :, 0], g2[:, :, :, 0], atol=1e-14)
        np.testing.assert_allclose(g1[:, :, :, 2], g2[:, :, :, 2], atol=1e-14)
        assert np.max(np.abs(g1[:, :, :, 1] - g2[:, :, :, 1])) > 1e-8

    def test_degenerate_spectrum_warns_but_returns(self):
        t = np.zeros((3, 3, 2, 2))
        t[0, 0, 0, 0] = 1.0  # transform slices share singular values
        g = np.ones((3, 3, 2, 2))
        with pytest.warns(tc.DegenerateSpectrumWarning):
            grad = tc.tdr_grad(t, g)
        assert np.all(np.isfinite(grad))
