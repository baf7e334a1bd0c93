"""Gradient-scheme construction and subsampling against random baselines."""

import numpy as np
import pytest

from mpmri import qspace
from mpmri.qspace import GradientScheme, electrostatic_energy


@pytest.fixture(scope="module")
def dense90():
    return qspace.make_dense_scheme(90, [1000, 2000, 3000], seed=0)


def random_antipodal_energy(n, trials, seed):
    rng = np.random.default_rng(seed)
    energies = []
    for _ in range(trials):
        p = rng.standard_normal((n, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        energies.append(electrostatic_energy(p))
    return np.array(energies)


class TestDenseScheme:
    def test_90x3_gives_271_entries(self, dense90):
        assert len(dense90) == 271
        assert dense90.n_weighted == 270
        assert len(dense90.b0_indices()) == 1
        np.testing.assert_array_equal(dense90.shells, [1000.0, 2000.0, 3000.0])

    def test_single_direction_is_unit(self):
        s = qspace.make_dense_scheme(1, [1000], seed=3)
        assert len(s) == 2
        g = s.directions[s.bvals > 0][0]
        assert abs(np.linalg.norm(g) - 1.0) < 1e-9

    def test_six_directions_beat_random_configurations(self):
        s = qspace.make_dense_scheme(6, [1000], seed=1)
        placed = s.directions[s.bvals > 0]
        e = electrostatic_energy(placed)
        best_random = random_antipodal_energy(6, 1000, seed=2).min()
        assert e <= best_random

    def test_unit_norms_and_determinism(self, dense90):
        g = dense90.directions[dense90.bvals > 0]
        assert np.max(np.abs(np.linalg.norm(g, axis=1) - 1.0)) < 1e-9
        again = qspace.make_dense_scheme(90, [1000, 2000, 3000], seed=0)
        np.testing.assert_array_equal(dense90.directions, again.directions)
        np.testing.assert_array_equal(dense90.bvals, again.bvals)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            qspace.make_dense_scheme(0, [1000])
        with pytest.raises(ValueError):
            qspace.make_dense_scheme(6, [])
        with pytest.raises(ValueError):
            qspace.make_dense_scheme(6, [0.0])


class TestSubsample:
    def test_full_shell_returns_scheme_in_order(self, dense90):
        s = qspace.subsample(dense90, 90, seed=0)
        np.testing.assert_array_equal(s.directions, dense90.directions)
        np.testing.assert_array_equal(s.bvals, dense90.bvals)

    @pytest.mark.parametrize("k,total", [(6, 18), (10, 30), (20, 60)])
    def test_sparse_counts(self, dense90, k, total):
        s = qspace.subsample(dense90, k, seed=0)
        assert s.n_weighted == total
        assert len(s.b0_indices()) == 1
        for b in (1000.0, 2000.0, 3000.0):
            assert len(s.shell_indices(b)) == k

    def test_subset_of_dense(self, dense90):
        s = qspace.subsample(dense90, 6, seed=0)
        dense_rows = {tuple(np.r_[g, b]) for g, b in zip(dense90.directions, dense90.bvals)}
        for g, b in zip(s.directions, s.bvals):
            assert tuple(np.r_[g, b]) in dense_rows

    def test_selected_subset_beats_median_random_subset(self, dense90):
        s = qspace.subsample(dense90, 6, seed=0)
        chosen = s.directions[s.bvals == 1000.0]
        e = electrostatic_energy(chosen)
        pool = dense90.directions[dense90.bvals == 1000.0]
        rng = np.random.default_rng(3)
        rand = [
            electrostatic_energy(pool[rng.choice(90, 6, replace=False)]) for _ in range(1000)
        ]
        assert e <= np.median(rand)

    def test_swap_passes_do_not_increase_energy(self, dense90):
        pool = dense90.directions[dense90.bvals == 2000.0]
        start = int(np.random.default_rng(0).integers(90))
        greedy = qspace._greedy_farthest(pool, 8, start)
        improved = qspace._swap_improve(pool, greedy, 200)
        assert electrostatic_energy(pool[improved]) <= electrostatic_energy(pool[greedy]) + 1e-12

    def test_oversized_request_rejected(self, dense90):
        with pytest.raises(ValueError, match="exceeds"):
            qspace.subsample(dense90, 91, seed=0)

    def test_determinism(self, dense90):
        a = qspace.subsample(dense90, 10, seed=5)
        b = qspace.subsample(dense90, 10, seed=5)
        np.testing.assert_array_equal(a.directions, b.directions)


class TestAcceleration:
    def test_paper_factors(self, dense90):
        for k, factor in ((6, 15.0), (10, 9.0), (20, 4.5)):
            s = qspace.subsample(dense90, k, seed=0)
            assert qspace.acceleration_factor(dense90, s) == factor

    def test_identity(self, dense90):
        assert qspace.acceleration_factor(dense90, dense90) == 1.0

    def test_empty_sparse_rejected(self):
        dense = qspace.make_dense_scheme(6, [1000], seed=0)
        empty = GradientScheme(np.zeros((1, 3)), np.zeros(1))
        with pytest.raises(ValueError):
            qspace.acceleration_factor(dense, empty)


class TestSchemeText:
    def test_roundtrip(self, dense90):
        text = dense90.to_text()
        back = GradientScheme.from_text(text)
        np.testing.assert_array_equal(back.directions, dense90.directions)
        np.testing.assert_array_equal(back.bvals, dense90.bvals)

    def test_comments_and_blank_lines_ignored(self):
        text = "# a comment\n\n0 0 0 0\n1 0 0 1000\n"
        s = GradientScheme.from_text(text)
        assert len(s) == 2

    def test_malformed_line_reports_number(self):
        with pytest.raises(ValueError, match="line 2"):
            GradientScheme.from_text("0 0 0 0\n1 0 0\n")

    def test_invalid_directions_rejected(self):
        with pytest.raises(ValueError, match="unit"):
            GradientScheme(np.array([[2.0, 0, 0]]), np.array([1000.0]))
        with pytest.raises(ValueError, match="zero"):
            GradientScheme(np.array([[1.0, 0, 0]]), np.array([0.0]))
