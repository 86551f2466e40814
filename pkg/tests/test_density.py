import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boostvi.density import (
    AtomFamilyConfig,
    MixtureDensity,
    SupportBox,
    TruncatedGaussianAtom,
    atom_pdf,
    family_bounds,
    family_diameter_sq,
    gaussian_sq_norm,
    inner_product,
    make_atom,
    mixture_log_pdf,
    quantize_mean,
    sample_mixture,
    truncation_mass,
)
from boostvi.integrate import QuadratureSpec, integrate_box

from conftest import random_atom, random_mixture

# Frozen from scipy.integrate.quad of the standard normal density over [-1, 1].
MASS_UNIT_INTERVAL = 0.682689492137086
PDF_AT_ZERO = 0.5843685672568166
# Brute-force minimum / maximum of atom pdfs over a 101 x 101 (mean, z) grid,
# box [0, 1], sigma 0.5 (scipy.stats.norm).
GRID_EPS = 0.2262586964500768
GRID_M = 1.6718382009405384


class TestSupportBox:
    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            SupportBox(np.array([1.0]), np.array([0.0]))

    def test_rejects_infinite_bounds(self):
        with pytest.raises(ValueError):
            SupportBox(np.array([-np.inf]), np.array([0.0]))

    def test_geometry(self):
        box = SupportBox(np.array([0.0, -1.0]), np.array([2.0, 3.0]))
        assert box.lebesgue_measure == pytest.approx(8.0)
        assert box.diameter_sq == pytest.approx(20.0)
        np.testing.assert_allclose(box.center, [1.0, 1.0])

    def test_contains_is_closed(self, unit_box):
        assert unit_box.contains(np.array([[-1.0], [1.0], [0.0]])).all()
        assert not unit_box.contains(np.array([[1.0 + 1e-12]])).any()


class TestAtomPdf:
    def test_zero_outside_support(self, unit_box):
        atom = TruncatedGaussianAtom(np.zeros(1), 1.0, unit_box)
        assert atom_pdf(atom, np.array([3.0])) == 0.0
        assert atom.log_pdf(np.array([3.0])) == -np.inf

    def test_value_at_centre(self, unit_box):
        atom = TruncatedGaussianAtom(np.zeros(1), 1.0, unit_box)
        assert atom_pdf(atom, np.array([0.0])) == pytest.approx(PDF_AT_ZERO, rel=1e-12)
        assert atom.trunc_mass == pytest.approx(MASS_UNIT_INTERVAL, rel=1e-12)

    def test_dimension_mismatch(self, unit_box):
        atom = TruncatedGaussianAtom(np.zeros(1), 1.0, unit_box)
        with pytest.raises(ValueError):
            atom.log_pdf(np.zeros((3, 2)))

    @pytest.mark.parametrize("d", [1, 2])
    def test_normalization(self, rng, d):
        box = SupportBox.cube(-2.0, 3.0, d)
        spec = QuadratureSpec(abs_tol=1e-11, rel_tol=1e-11)
        for _ in range(20 if d == 1 else 4):
            atom = random_atom(rng, box)
            assert integrate_box(atom.pdf, box, spec) == pytest.approx(1.0, abs=1e-8)

    def test_never_nan(self, rng, unit_box):
        atom = TruncatedGaussianAtom(np.array([0.9]), 0.05, unit_box)
        z = np.linspace(-3, 3, 1001)[:, None]
        assert not np.isnan(atom.pdf(z)).any()


class TestTruncationMass:
    def test_huge_box_is_total(self):
        box = SupportBox.cube(-1e6, 1e6, 3)
        assert truncation_mass(np.array([1.0, 2.0, -3.0]), 2.0, box) == pytest.approx(1.0, abs=1e-12)

    def test_product_of_marginals(self):
        box = SupportBox(np.array([-1.0, 0.0]), np.array([2.0, 0.5]))
        mean, sigma = np.array([0.3, 0.9]), 0.7
        marginals = []
        for i in range(2):
            b = SupportBox(box.lower[i:i + 1], box.upper[i:i + 1])
            dens = lambda z, m=mean[i]: np.exp(-0.5 * ((z[:, 0] - m) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
            marginals.append(integrate_box(dens, b))
        assert truncation_mass(mean, sigma, box) == pytest.approx(marginals[0] * marginals[1], rel=1e-10)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_corner_half_mass(self, d):
        box = SupportBox.cube(0.0, 1.0, d)
        assert truncation_mass(np.zeros(d), 1e-3, box) == pytest.approx(0.5**d, rel=1e-9)

    def test_rejects_nonpositive_sigma(self, unit_box):
        with pytest.raises(ValueError):
            truncation_mass(np.zeros(1), 0.0, unit_box)


class TestFamilyBounds:
    def test_grid_oracle(self):
        cfg = AtomFamilyConfig(SupportBox.cube(0.0, 1.0, 1), 0.5, 0.5)
        eps, m = family_bounds(cfg)
        assert eps == pytest.approx(GRID_EPS, rel=1e-12)
        assert m == pytest.approx(GRID_M, rel=1e-12)

    def test_bounds_hold_for_random_atoms(self, rng):
        cfg = AtomFamilyConfig(SupportBox.cube(-2.0, 1.0, 1), 0.4, 1.2)
        eps, m = family_bounds(cfg)
        z = np.linspace(-2.0, 1.0, 10_000)[:, None]
        for _ in range(200):
            atom = random_atom(rng, cfg.box, (cfg.sigma_min, cfg.sigma_max))
            vals = atom.pdf(z)
            assert vals.min() >= eps - 1e-12
            assert vals.max() <= m + 1e-12

    def test_centre_peak_when_sigma_fixed(self):
        cfg = AtomFamilyConfig(SupportBox.cube(-1.0, 1.0, 1), 0.6, 0.6)
        atom = make_atom(np.zeros(1), 0.6, cfg)
        z = np.linspace(-1, 1, 2001)[:, None]
        assert np.argmax(atom.pdf(z)) == 1000

    @pytest.mark.parametrize("half_width", [0.5, 1.0, 2.0])
    def test_shrinking_box_never_decreases_eps(self, half_width):
        big = family_bounds(AtomFamilyConfig(SupportBox.cube(-half_width, half_width, 1), 0.5, 1.0))[0]
        small = family_bounds(AtomFamilyConfig(SupportBox.cube(-half_width / 2, half_width / 2, 1), 0.5, 1.0))[0]
        assert small >= big


class TestDiameter:
    def test_untruncated_sq_norm(self):
        assert gaussian_sq_norm(1.0, 1) == pytest.approx(0.28209479177387814, rel=1e-14)

    def test_bound_dominates_pairs(self, rng):
        cfg = AtomFamilyConfig(SupportBox.cube(-2.0, 2.0, 1), 0.5, 1.5)
        bound = family_diameter_sq(cfg)
        for _ in range(100):
            a = random_atom(rng, cfg.box, (cfg.sigma_min, cfg.sigma_max))
            b = random_atom(rng, cfg.box, (cfg.sigma_min, cfg.sigma_max))
            dist = integrate_box(lambda z: (a.pdf(z) - b.pdf(z)) ** 2, cfg.box)
            assert dist <= bound

    def test_identical_atoms_have_zero_distance(self, unit_box):
        a = TruncatedGaussianAtom(np.array([0.2]), 0.5, unit_box)
        dist = inner_product(a, a) - 2 * inner_product(a, a) + inner_product(a, a)
        assert dist == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("d", [1, 2])
    def test_inner_product_closed_form(self, rng, d):
        box = SupportBox.cube(-1.0, 2.0, d)
        a, b = random_atom(rng, box), random_atom(rng, box)
        quad = integrate_box(lambda z: a.pdf(z) * b.pdf(z), box, QuadratureSpec(1e-12, 1e-11))
        assert inner_product(a, b) == pytest.approx(quad, rel=1e-8)


class TestMixture:
    def test_single_atom_matches_atom(self, rng, unit_box):
        atom = random_atom(rng, unit_box)
        z = np.linspace(-1, 1, 11)[:, None]
        np.testing.assert_allclose(mixture_log_pdf(MixtureDensity.single(atom), z), atom.log_pdf(z))

    def test_duplicate_atoms_collapse(self, rng, unit_box):
        atom = random_atom(rng, unit_box)
        z = np.linspace(-1, 1, 11)[:, None]
        q = MixtureDensity([atom, atom], np.array([0.3, 0.7]))
        np.testing.assert_allclose(q.log_pdf(z), atom.log_pdf(z), rtol=1e-14)

    def test_direct_sum_oracle(self, rng):
        box = SupportBox.cube(-3.0, 3.0, 1)
        q = random_mixture(rng, box, k=3)
        z = np.linspace(-3, 3, 50)[:, None]
        direct = sum(w * a.pdf(z) for a, w in zip(q.atoms, q.weights))
        np.testing.assert_allclose(np.exp(q.log_pdf(z)), direct, rtol=1e-10)

    def test_minus_inf_outside(self, rng, unit_box):
        q = random_mixture(rng, unit_box)
        assert q.log_pdf(np.array([1.5])) == -np.inf
        assert np.isfinite(q.log_pdf(np.array([1.0])))

    def test_weights_validated(self, rng, unit_box):
        atom = random_atom(rng, unit_box)
        with pytest.raises(ValueError):
            MixtureDensity([atom], np.array([-0.5]))

    def test_with_atom_merges_and_stays_on_simplex(self, rng, unit_box):
        a, b = random_atom(rng, unit_box), random_atom(rng, unit_box)
        q = MixtureDensity.single(a).with_atom(b, 0.25).with_atom(a, 0.5)
        assert len(q.atoms) == 2
        assert q.weights.sum() == 1.0
        np.testing.assert_allclose(q.weights, [0.875, 0.125])


class TestSampling:
    def test_samples_in_box(self, rng):
        box = SupportBox.cube(-1.0, 0.5, 2)
        q = random_mixture(rng, box)
        z = sample_mixture(q, 5000, 3)
        assert box.contains(z).all()

    def test_symmetric_mean(self, unit_box):
        atom = TruncatedGaussianAtom(np.zeros(1), 1.0, unit_box)
        z = sample_mixture(MixtureDensity.single(atom), 100_000, 7)[:, 0]
        assert abs(z.mean()) <= 3 * z.std(ddof=1) / math.sqrt(z.shape[0])

    def test_empirical_cdf(self, unit_box):
        atom = TruncatedGaussianAtom(np.array([0.3]), 0.7, unit_box)
        z = sample_mixture(MixtureDensity.single(atom), 100_000, 11)[:, 0]
        for x in (-0.8, -0.4, 0.0, 0.4, 0.8):
            quad = integrate_box(atom.pdf, SupportBox(np.array([-1.0]), np.array([x])))
            assert abs(np.mean(z <= x) - quad) < 0.01

    def test_narrow_tail_box(self):
        # far-tail truncation: inverse CDF must stay exact without rejection
        box = SupportBox.cube(8.0, 8.1, 1)
        atom = TruncatedGaussianAtom(np.zeros(1), 1.0, box)
        z = atom.sample(1000, np.random.default_rng(0))
        assert box.contains(z).all()

    def test_determinism(self, rng, unit_box):
        q = random_mixture(rng, unit_box)
        np.testing.assert_array_equal(sample_mixture(q, 100, 5), sample_mixture(q, 100, 5))


class TestQuantize:
    def test_nearest_grid_point(self):
        cfg = AtomFamilyConfig(SupportBox.cube(0.0, 1.0, 1), 0.1, 0.1, 1e-4)
        assert quantize_mean(np.array([0.12346]), cfg)[0] == pytest.approx(0.1235, abs=1e-12)
        assert quantize_mean(np.array([0.12344]), cfg)[0] == pytest.approx(0.1234, abs=1e-12)

    def test_tie_goes_down(self):
        cfg = AtomFamilyConfig(SupportBox.cube(0.0, 1.0, 1), 0.1, 0.1, 0.25)
        assert quantize_mean(np.array([0.375]), cfg)[0] == 0.25

    def test_zero_stride_is_identity(self):
        cfg = AtomFamilyConfig(SupportBox.cube(0.0, 1.0, 1), 0.1, 0.1, 0.0)
        assert quantize_mean(np.array([0.123456789]), cfg)[0] == 0.123456789

    @settings(max_examples=200, deadline=None)
    @given(x=st.floats(-2.0, 3.0), stride=st.sampled_from([1e-4, 0.01, 0.3, 0.7]))
    def test_in_box_on_grid_idempotent(self, x, stride):
        cfg = AtomFamilyConfig(SupportBox.cube(-1.0, 2.0, 1), 0.1, 0.1, stride)
        m = quantize_mean(np.clip([x], -1.0, 2.0), cfg)
        assert -1.0 <= m[0] <= 2.0
        k = (m[0] + 1.0) / stride
        assert abs(k - round(k)) < 1e-6 or m[0] == 2.0
        np.testing.assert_array_equal(quantize_mean(m, cfg), m)
