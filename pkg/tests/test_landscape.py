import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import i0

from torsionmep.errors import ConfigurationError, DomainError, InputError
from torsionmep.landscape import (AngleGrid, AngleSampleSet, ChainLandscape, PropensityLibrary, UniformDensity, View,
                                  VonMisesKDE, bake_grid, bins_for_resolution, boltzmann_energy, build_library,
                                  chain_energy, chain_energy_gradient, grid_lookup, kde_density, kde_gradient,
                                  projection_views_of, read_pair_samples, read_single_samples, reconstruct_gradient,
                                  torus_integral, wrap_angle)
from torsionmep.landscape import ProjectionViewSet

angles = st.floats(-np.pi, np.pi, allow_nan=False)


def one_sample(kappa=1.0):
    return VonMisesKDE(AngleSampleSet("X", [0.0], [0.0]), kappa)


# ---------------------------------------------------------------------------
# density and gradient


def test_single_sample_peak_value():
    expected = np.e ** 2 / (4 * np.pi ** 2 * i0(1.0) ** 2)
    assert kde_density(one_sample(), 0.0, 0.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.11675, abs=1e-4)


def test_density_periodic_at_corners():
    kde = one_sample(3.0)
    assert kde_density(kde, np.pi, np.pi) == pytest.approx(kde_density(kde, -np.pi, -np.pi), rel=1e-14)


def test_symmetric_pair_of_samples():
    a, b = 0.7, -0.4
    kde2 = VonMisesKDE(AngleSampleSet("X", [a, -a], [b, -b]), 2.0)
    kde1 = VonMisesKDE(AngleSampleSet("X", [a], [b]), 2.0)
    # both kernels contribute equally at the origin; the normalizer halves
    assert kde_density(kde2, 0.0, 0.0) == pytest.approx(kde_density(kde1, 0.0, 0.0), rel=1e-13)


def test_gradient_zero_at_kernel_maximum():
    assert np.allclose(kde_gradient(one_sample(), 0.0, 0.0), 0.0, atol=1e-15)


def test_gradient_matches_finite_difference():
    kde = one_sample(1.0)
    h = 1e-6
    fd = (kde_density(kde, 0.5 + h, 0.0) - kde_density(kde, 0.5 - h, 0.0)) / (2 * h)
    g0, g1 = kde_gradient(kde, 0.5, 0.0)
    assert g0 == pytest.approx(-np.sin(0.5) * kde_density(kde, 0.5, 0.0), rel=1e-12)
    assert g0 == pytest.approx(fd, rel=1e-6)
    assert g1 == pytest.approx(0.0, abs=1e-15)


@given(angles, angles, st.floats(0.5, 60))
def test_gradient_periodic(phi, psi, kappa):
    kde = VonMisesKDE(AngleSampleSet("X", [0.3, -1.0], [1.2, 2.0]), kappa)
    g = np.array(kde_gradient(kde, phi, psi))
    g2 = np.array(kde_gradient(kde, phi + 2 * np.pi, psi))
    assert np.allclose(g, g2, rtol=1e-9, atol=1e-14)


def test_density_normalized_on_fine_grid():
    rng = np.random.default_rng(3)
    kde = VonMisesKDE(AngleSampleSet("X", rng.uniform(-np.pi, np.pi, 7), rng.uniform(-np.pi, np.pi, 7)), 20.0)
    _, dens = bake_grid(kde, 360, 1.0)
    assert abs(torus_integral(dens.values) - 1.0) < 1e-3


def test_large_kappa_does_not_overflow():
    kde = VonMisesKDE(AngleSampleSet("X", [0.0], [0.0]), 5000.0)
    val = kde_density(kde, 0.0, 0.0)
    assert np.isfinite(val) and val > 0


def test_invalid_kde_inputs():
    with pytest.raises(DomainError):
        VonMisesKDE(AngleSampleSet("X", [0.0], [0.0]), 0.0)
    with pytest.raises(ValueError):
        AngleSampleSet("X", [], [])
    with pytest.raises(ValueError):
        AngleSampleSet("X", [np.nan], [0.0])


# ---------------------------------------------------------------------------
# Boltzmann inversion and grids


@pytest.mark.parametrize("P, kT, E", [(1.0, 3.7, 0.0), (np.exp(-1), 1.0, 1.0), (np.exp(-2), 0.5, 1.0)])
def test_boltzmann_energy(P, kT, E):
    assert boltzmann_energy(P, kT) == pytest.approx(E, abs=1e-15)


@pytest.mark.parametrize("P", [0.0, -1.0])
def test_boltzmann_rejects_nonpositive(P):
    with pytest.raises(DomainError, match="P"):
        boltzmann_energy(P, 1.0)


def test_two_degree_resolution_bins():
    assert bins_for_resolution(2.0) == 180


def test_bake_rejects_coarse_grid():
    with pytest.raises(DomainError):
        bake_grid(one_sample(), 4, 1.0)


def test_unit_density_gives_zero_energy():
    energy, _ = bake_grid(UniformDensity(1.0), 16, 2.5, floor=None)
    assert np.all(energy.values == 0.0)


def test_argmin_is_nearest_node():
    s = AngleSampleSet("X", [0.33], [-1.71])
    energy, _ = bake_grid(VonMisesKDE(s, 10.0), 90, 1.0)
    i, j = np.unravel_index(np.argmin(energy.values), energy.values.shape)
    nodes = energy.nodes
    d = np.abs(wrap_angle(nodes[:, None] - 0.33)) ** 2 + np.abs(wrap_angle(nodes[None, :] + 1.71)) ** 2
    assert (i, j) == np.unravel_index(np.argmin(d), d.shape)


def test_density_floor_keeps_energy_finite():
    energy, dens = bake_grid(VonMisesKDE(AngleSampleSet("X", [0.0], [0.0]), 400.0), 60, 1.0)
    assert dens.values.min() < 1e-12
    assert np.all(np.isfinite(energy.values))
    assert energy.values.max() == pytest.approx(-np.log(1e-12))


def test_lookup_on_nodes_and_midpoints():
    rng = np.random.default_rng(0)
    grid = AngleGrid.from_values(rng.normal(size=(12, 12)))
    h, nodes = grid.spacing, grid.nodes
    for i, j in [(0, 0), (3, 7), (11, 11)]:
        v, _ = grid_lookup(grid, (nodes[i], nodes[j]))
        assert v == grid.values[i, j]
    v, _ = grid.lookup(nodes[3] + h / 2, nodes[5])
    assert v == pytest.approx(0.5 * (grid.values[3, 5] + grid.values[4, 5]), rel=1e-12)


def test_lookup_wraps_around():
    grid = AngleGrid.from_values(np.random.default_rng(1).normal(size=(10, 10)))
    assert grid.value(-np.pi - 0.01, 0.0) == pytest.approx(grid.value(np.pi - 0.01, 0.0), abs=1e-14)


@given(angles, angles)
def test_lookup_periodic(a, b):
    grid = AngleGrid.from_values(np.random.default_rng(2).normal(size=(16, 16)))
    v, g = grid.lookup(a, b)
    v2, g2 = grid.lookup(a + 2 * np.pi, b - 2 * np.pi)
    assert v == pytest.approx(v2, abs=1e-12)
    assert np.allclose(g, g2, atol=1e-12)


def test_baked_lookup_close_to_kde():
    kde = VonMisesKDE(AngleSampleSet("X", [0.2], [-0.3]), 20.0)
    _, dens = bake_grid(kde, 180, 1.0)
    pts = np.random.default_rng(4).uniform(-np.pi, np.pi, size=(100, 2))
    err = np.abs(dens.value(pts[:, 0], pts[:, 1]) - kde_density(kde, pts[:, 0], pts[:, 1]))
    assert err.max() < 1e-3


def test_baked_energy_gradient_is_central_difference():
    energy, _ = bake_grid(one_sample(5.0), 36, 1.0)
    h = energy.spacing
    i, j = 4, 9
    fd = (energy.values[i + 1, j] - energy.values[i - 1, j]) / (2 * h)
    assert energy.grad_0[i, j] == pytest.approx(fd, rel=1e-14)


# ---------------------------------------------------------------------------
# library and chain energy


def constant_library(c, kinds=("A", "B")):
    view = View(AngleGrid.from_values(np.full((16, 16), c)), AngleGrid.from_values(np.full((16, 16), 1.0)))
    pairs = {(a, b, ax): view for a in kinds for b in kinds
             for ax in ("phi_psi_next", "psi_phi_next", "phi_phi_next")}
    return PropensityLibrary({k: view for k in kinds}, pairs, kT=1.0, kappa=1.0)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_constant_library_counts_terms(n):
    c = 0.75
    seq = ["A", "B"] * n
    seq = seq[:n]
    e = chain_energy(constant_library(c), seq, np.zeros((n, 2)))
    assert e == pytest.approx(c * (n + 1.5 * (n - 1)))


def test_single_residue_energy_is_its_view():
    lib = build_library({"G": AngleSampleSet("G", [0.5], [-1.0])}, bins=36, kappa=4.0)
    theta = np.array([[0.1, 0.2]])
    assert chain_energy(lib, ["G"], theta) == pytest.approx(lib.single("G").energy.value(0.1, 0.2))


def test_two_residue_five_terms():
    rng = np.random.default_rng(5)
    singles = {k: AngleSampleSet(k, rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3)) for k in ("G", "A")}
    pairs = {("G", "A", ax): AngleSampleSet("p", rng.uniform(-3, 3, 3), rng.uniform(-3, 3, 3))
             for ax in ("phi_psi_next", "psi_phi_next", "phi_phi_next")}
    lib = build_library(singles, pairs, bins=36, kappa=3.0)
    (p1, s1), (p2, s2) = th = rng.uniform(-3, 3, (2, 2))
    expected = (lib.single("G").energy.value(p1, s1) + lib.single("A").energy.value(p2, s2)
                + 0.5 * (lib.pair("G", "A", "phi_psi_next").energy.value(p1, s2)
                         + lib.pair("G", "A", "psi_phi_next").energy.value(s1, p2)
                         + lib.pair("G", "A", "phi_phi_next").energy.value(p1, p2)))
    assert chain_energy(lib, ["G", "A"], th) == pytest.approx(expected, rel=1e-13)


def test_chain_gradient_matches_interpolated_gradients():
    # the gradient is assembled from the baked gradient grids, which approximate
    # the derivative of the interpolated energy to grid accuracy
    rng = np.random.default_rng(6)
    singles = {k: AngleSampleSet(k, rng.uniform(-3, 3, 4), rng.uniform(-3, 3, 4)) for k in ("G", "A")}
    pairs = {("G", "A", ax): AngleSampleSet("p", rng.uniform(-3, 3, 4), rng.uniform(-3, 3, 4))
             for ax in ("phi_psi_next", "psi_phi_next", "phi_phi_next")}
    lib = build_library(singles, pairs, bins=180, kappa=2.0)
    land = ChainLandscape(lib, ["G", "A"])
    x = rng.uniform(-3, 3, 4)
    _, g = land.energy_gradient(x)
    h = 1e-3
    fd = np.array([(land.energy(x + h * e) - land.energy(x - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.allclose(g, fd, rtol=2e-2, atol=2e-2)


def test_missing_view_names_it():
    lib = constant_library(0.0, kinds=("A",))
    with pytest.raises(ConfigurationError, match="'B'"):
        chain_energy(lib, ["A", "B"], np.zeros((2, 2)))
    with pytest.raises(ConfigurationError, match="pair"):
        ChainLandscape(PropensityLibrary(lib.single_views, {}, kT=1.0, kappa=1.0), ["A", "A"])


def test_chain_energy_shape_checked():
    with pytest.raises(ValueError):
        chain_energy_gradient(constant_library(0.0), ["A", "B"], np.zeros((3, 2)))


def test_library_round_trip(tmp_path):
    lib = build_library({"G": AngleSampleSet("G", [0.5, 1.0], [-1.0, 2.0])},
                        {("G", "G", "phi_phi_next"): AngleSampleSet("p", [0.0], [1.0])}, bins=24, kappa=6.0)
    path = lib.save(tmp_path / "lib.npz")
    assert (tmp_path / "lib.manifest.txt").read_text().splitlines() == ["single G", "pair G G phi_phi_next"]
    back = PropensityLibrary.load(path)
    assert back.kappa == 6.0 and back.bins == 24
    assert np.array_equal(back.single("G").energy.values, lib.single("G").energy.values)
    assert np.array_equal(back.pair("G", "G", "phi_phi_next").energy.grad_1,
                          lib.pair("G", "G", "phi_phi_next").energy.grad_1)


def test_sample_readers(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("kind,phi_deg,psi_deg\nGLY,90,-90\nGLY,180,0\nALA,0,45\n")
    sets = read_single_samples(f)
    assert sets["GLY"].count == 2
    assert sets["GLY"].phi[1] == pytest.approx(np.pi)
    assert sets["ALA"].psi[0] == pytest.approx(np.pi / 4)
    g = tmp_path / "p.csv"
    g.write_text("kind_a,kind_b,axis,angle1_deg,angle2_deg\nGLY,ALA,phi_phi_next,10,20\n")
    assert ("GLY", "ALA", "phi_phi_next") in read_pair_samples(g)


@pytest.mark.parametrize("body, line", [
    ("kind,phi_deg,psi_deg\nGLY,abc,0\n", 2),
    ("kind,phi_deg,psi_deg\nGLY,1,2\nGLY,1\n", 3),
    ("phi,psi\n1,2\n", 1),
])
def test_sample_reader_errors_carry_line(tmp_path, body, line):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(InputError) as exc:
        read_single_samples(f)
    assert exc.value.line == line


def test_pair_reader_rejects_unknown_axis(tmp_path):
    g = tmp_path / "p.csv"
    g.write_text("kind_a,kind_b,axis,angle1_deg,angle2_deg\nGLY,ALA,psi_psi,10,20\n")
    with pytest.raises(InputError):
        read_pair_samples(g)


# ---------------------------------------------------------------------------
# projection views


def test_identity_view():
    g = np.array([0.3, -1.2])
    views = ProjectionViewSet(2, [((0, 1), lambda th: (g[0], g[1]))])
    assert np.array_equal(reconstruct_gradient(views, np.zeros(2)), g)


def test_three_pair_views_recover_vector():
    v = np.array([1.0, -2.0, 0.5])
    views = projection_views_of(lambda th: v, 3, [(0, 1), (1, 2), (0, 2)])
    assert np.array_equal(views.diagonal, [2, 2, 2])
    assert np.allclose(reconstruct_gradient(views, np.zeros(3)), v, atol=1e-15)


def test_quadratic_reconstruction_four_dims():
    rng = np.random.default_rng(7)
    Q = rng.normal(size=(4, 4))
    Q = Q @ Q.T
    grad = lambda th: Q @ th
    views = projection_views_of(grad, 4, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)])
    th = rng.normal(size=4)
    assert np.allclose(reconstruct_gradient(views, th), grad(th), atol=1e-8)


@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
       st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)).filter(lambda p: p[0] != p[1]), min_size=1,
                max_size=8))
def test_reconstruction_identity(v, pairs):
    v = np.array(v)
    views = projection_views_of(lambda th: v, 4, pairs)
    if np.any(views.diagonal == 0):
        with pytest.raises(ConfigurationError, match="axis"):
            reconstruct_gradient(views, np.zeros(4))
    else:
        assert np.allclose(reconstruct_gradient(views, np.zeros(4)), v, rtol=1e-14, atol=1e-14)
