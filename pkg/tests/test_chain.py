import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from torsionmep.chain import (BandConfig, Conformation, apply_conformation, band_path_energy, build_chain_model,
                              build_replica_band, default_preset, dihedral, measure_dihedrals, parse_sequence,
                              relax_band, reset_reference, write_band_report_csv, write_band_snapshot)
from torsionmep.errors import ConfigurationError
from torsionmep.landscape import AnalyticLandscape, ChainLandscape, wrap_angle
from torsionmep.mep import init_path_convex
from torsionmep.multibody import DIAOptions, constraint_eval, dia_step, joint_angles
from torsionmep.synthetic import separable_endpoints, separable_library

CHIGNOLIN = "GLY-TYR-ASP-PRO-GLU-THR-GLY-THR-GLY"


def flat(dim):
    return AnalyticLandscape(lambda x: 0.0, lambda x: np.zeros(dim), dim, periodic=True)


# ---------------------------------------------------------------------------
# building


@pytest.mark.parametrize("n", range(1, 11))
def test_count_law(n):
    m = build_chain_model(["ALA"] * n)
    assert m.system.n_bodies == 2 * n + 1 and m.system.n_joints == 2 * n


def test_consecutive_bodies_share_one_joint():
    m = build_chain_model(["ALA"] * 4)
    pairs = [(jt.body_i, jt.body_j) for jt in m.joints]
    assert pairs == [(k, k + 1) for k in range(8)]


def test_atomic_preset_counts():
    m = build_chain_model(CHIGNOLIN + "-GLY", layout="atomic")
    assert m.system.n_bodies == 50 and m.system.n_joints == 49


def test_chignolin_sequence_verbatim():
    seq = parse_sequence(CHIGNOLIN)
    assert seq == ["GLY", "TYR", "ASP", "PRO", "GLU", "THR", "GLY", "THR", "GLY"]
    m = build_chain_model(CHIGNOLIN)
    assert m.system.n_bodies == 19 and m.system.n_joints == 18


def test_unknown_residue_rejected():
    with pytest.raises(ConfigurationError, match="XYZ"):
        build_chain_model("GLY-XYZ")


def test_cylindrical_springs_from_table():
    m = build_chain_model(["GLY", "ALA"], "cylindrical")
    phi, psi = m.joints[0], m.joints[1]
    assert (phi.stiffness, phi.rest_length) == (370.0, 1.490)
    assert (psi.stiffness, psi.rest_length) == (320.0, 1.430)
    assert np.allclose(measure_dihedrals(m).lengths, [1.49, 1.43, 1.49, 1.43])


@pytest.mark.parametrize("kind", ["revolute", "cylindrical"])
def test_reference_is_admissible_and_zero(kind):
    m = build_chain_model(["GLY", "ALA", "SER"], kind)
    assert np.max(np.abs(constraint_eval(m.system))) < 1e-12
    assert np.allclose(measure_dihedrals(m).angles, 0.0, atol=1e-12)
    assert np.allclose(joint_angles(m.system), 0.0, atol=1e-12)


def test_preset_bond_lengths_in_reference():
    m = build_chain_model(["GLY", "ALA"])
    L = default_preset().bond_lengths
    assert np.linalg.norm(m.atom("CA", 1) - m.atom("N", 1)) == pytest.approx(L["N_CA"])
    assert np.linalg.norm(m.atom("C", 1) - m.atom("CA", 1)) == pytest.approx(L["CA_C"])
    assert np.linalg.norm(m.atom("N", 2) - m.atom("C", 1)) == pytest.approx(L["C_N"])


def test_reference_peptide_bond_is_trans():
    m = build_chain_model(["GLY", "ALA"])
    omega = dihedral(m.atom("CA", 1), m.atom("C", 1), m.atom("N", 2), m.atom("CA", 2))
    assert abs(omega) == pytest.approx(np.pi)


# ---------------------------------------------------------------------------
# dihedrals


def test_planar_zigzag_is_pi():
    a, b, c, d = np.array([[0, 1, 0], [0, 0, 0], [1, 0, 0], [1, -1, 0]], dtype=float)
    assert dihedral(a, b, c, d) == pytest.approx(np.pi)


def test_dihedral_sign_convention():
    # right-handed about b->c is positive
    a, b, c = np.array([[0, 1, 0], [0, 0, 0], [1, 0, 0]], dtype=float)
    d = np.array([1, 0, 1.0])
    assert dihedral(a, b, c, d) == pytest.approx(np.pi / 2)
    assert dihedral(a, b, c, d * [1, 1, -1]) == pytest.approx(-np.pi / 2)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_round_trip(n):
    rng = np.random.default_rng(n)
    m = build_chain_model(["ALA"] * n)
    for _ in range(100):
        theta = rng.uniform(-np.pi, np.pi, 2 * n)
        apply_conformation(m, theta)
        assert np.max(np.abs(wrap_angle(measure_dihedrals(m).angles - theta))) < 1e-9


@given(st.lists(st.floats(-np.pi, np.pi), min_size=6, max_size=6),
       st.lists(st.floats(1.2, 1.7), min_size=6, max_size=6))
def test_cylindrical_round_trip(angles, lengths):
    m = build_chain_model(["GLY", "ALA", "SER"], "cylindrical")
    apply_conformation(m, Conformation(angles, lengths))
    c = measure_dihedrals(m)
    assert np.max(np.abs(wrap_angle(c.angles - angles))) < 1e-9
    assert np.allclose(c.lengths, lengths, atol=1e-9)
    assert np.max(np.abs(constraint_eval(m.system))) < 1e-10


def test_apply_random_state_admissible():
    m = build_chain_model(["ALA"] * 3)
    apply_conformation(m, np.random.default_rng(2).uniform(-3, 3, 6))
    assert np.max(np.abs(constraint_eval(m.system))) < 1e-10
    assert all(np.all(b.w == 0) and np.all(b.v == 0) for b in m.bodies)


def test_apply_current_conformation_is_identity():
    m = build_chain_model(["ALA"] * 3)
    apply_conformation(m, np.random.default_rng(3).uniform(-3, 3, 6))
    y0 = m.system.state_vector()
    apply_conformation(m, measure_dihedrals(m))
    assert np.allclose(m.system.state_vector(), y0, atol=1e-12)


def test_apply_zero_recovers_reference():
    m = build_chain_model(["ALA"] * 2)
    ref = [r.copy() for r, _ in m.reference]
    apply_conformation(m, np.random.default_rng(4).uniform(-3, 3, 4))
    apply_conformation(m, np.zeros(4))
    assert np.allclose([b.r for b in m.bodies], ref, atol=1e-12)


def test_wrong_dimension_rejected():
    with pytest.raises(ValueError, match="4 joint angles"):
        apply_conformation(build_chain_model(["ALA"] * 2), np.zeros(3))


def test_atomic_round_trip():
    m = build_chain_model(CHIGNOLIN + "-GLY", layout="atomic")
    theta = np.random.default_rng(5).uniform(-np.pi, np.pi, 20)
    apply_conformation(m, theta)
    assert np.max(np.abs(wrap_angle(measure_dihedrals(m).angles - theta))) < 1e-9
    # interior torsions agree with the atom dihedrals
    phi2 = dihedral(m.atom("C", 1), m.atom("N", 2), m.atom("CA", 2), m.atom("C", 2))
    assert phi2 == pytest.approx(theta[2], abs=1e-12)


# ---------------------------------------------------------------------------
# dynamics on the chain


def test_bond_lengths_rigid_under_dynamics():
    m = build_chain_model(["GLY", "ALA"])
    apply_conformation(m, [0.5, -0.4, 1.0, 0.2])

    def bonds():
        names = [("C", 0), ("N", 1), ("CA", 1), ("C", 1), ("N", 2), ("CA", 2), ("C", 2), ("N", 3)]
        pts = [m.atom(*a) for a in names]
        return np.linalg.norm(np.diff(pts, axis=0), axis=1)

    b0 = bonds()
    nu = np.array([1.0, -2.0, 0.5, 3.0])
    drift = 0.0
    for _ in range(1000):
        dia_step(m.system, 1e-3, DIAOptions(), nu=nu)
        drift = max(drift, np.max(np.abs(bonds() / b0 - 1)))
    assert np.max(np.abs(wrap_angle(measure_dihedrals(m).angles - [0.5, -0.4, 1.0, 0.2]))) > 0.1
    assert drift < 1e-9


def test_propensity_hook_drives_toward_minimum():
    seq = ["GLY", "ALA"]
    land = ChainLandscape(separable_library(seq, bins=90), seq)
    m = build_chain_model(seq)
    apply_conformation(m, [0.0, 0.0, 0.5, -0.5])
    m.system.propensity_hook = m.propensity_landscape(land)
    e0 = land.energy(measure_dihedrals(m).angles)
    dia_step(m.system, 0.05)
    assert land.energy(measure_dihedrals(m).angles) < e0


# ---------------------------------------------------------------------------
# replica bands


def test_band_body_counts():
    m = build_chain_model(CHIGNOLIN + "-GLY", layout="atomic")
    band = build_replica_band(m, [np.zeros(20)] * 20, 1.0)
    sys = band.system
    assert (sys.n_bodies, sys.n_joints) == (1000, 980)
    assert band.n_band_springs == 19 * 20


def test_band_needs_three_replicas():
    with pytest.raises(ValueError):
        build_replica_band(build_chain_model(["GLY"]), [np.zeros(2)] * 2, 1.0)


def test_band_rejects_inconsistent_replica():
    with pytest.raises(ValueError, match="replica 1"):
        build_replica_band(build_chain_model(["GLY"]), [np.zeros(2), np.zeros(3), np.ones(2)], 1.0)


def test_straight_band_on_flat_landscape_is_static():
    m = build_chain_model(["GLY"])
    nodes = np.linspace([0.4, -0.7], [1.0, 0.5], 4)
    band = build_replica_band(m, list(nodes), 1.0)
    rep = relax_band(band, flat(2), BandConfig(max_iters=5))
    assert rep.converged and rep.criterion < 1e-12 and rep.iterations == 0
    assert np.allclose(band.angles(), nodes, atol=1e-12)


def test_coincident_band_on_flat_landscape_is_static():
    theta = np.array([0.4, -0.7])
    band = build_replica_band(build_chain_model(["GLY"]), [theta] * 3, 1.0)
    rep = relax_band(band, flat(2), BandConfig(max_iters=5))
    assert rep.converged and rep.criterion == 0.0 and rep.iterations == 0
    assert np.allclose(band.angles(), theta, atol=1e-12)


def test_band_endpoints_pinned():
    seq = ["GLY"]
    land = ChainLandscape(separable_library(seq, bins=90), seq)
    A, B = separable_endpoints(1)
    p0 = init_path_convex(A, B, 5)
    band = build_replica_band(build_chain_model(seq), list(p0.nodes), 1.0)
    ends = [r.system.state_vector() for r in (band.replicas[0], band.replicas[-1])]
    rep = relax_band(band, land, BandConfig(max_iters=10))
    assert rep.iterations == 10
    assert np.array_equal(band.replicas[0].system.state_vector(), ends[0])
    assert np.array_equal(band.replicas[-1].system.state_vector(), ends[1])
    assert rep.max_force[-1] < rep.max_force[0]


def test_band_outputs(tmp_path):
    seq = ["GLY"]
    land = ChainLandscape(separable_library(seq, bins=90), seq)
    A, B = separable_endpoints(1)
    band = build_replica_band(build_chain_model(seq, "cylindrical"), list(init_path_convex(A, B, 4).nodes), 1.0)
    rep = relax_band(band, land, BandConfig(max_iters=3))
    write_band_snapshot(band, tmp_path / "b.csv")
    write_band_report_csv(rep, tmp_path / "r.csv")
    snap = (tmp_path / "b.csv").read_text().splitlines()
    assert snap[0] == "replica,joint,angle_rad,length" and len(snap) == 1 + 4 * 2
    report = (tmp_path / "r.csv").read_text().splitlines()
    assert report[0].startswith("iter,path_energy") and len(report) == 4
    assert band_path_energy(band, land) == pytest.approx(rep.path_energy[-1], rel=0.05)


def test_reset_reference():
    m = build_chain_model(["GLY", "ALA"])
    apply_conformation(m, np.ones(4))
    reset_reference(m)
    assert np.allclose(measure_dihedrals(m).angles, 0.0, atol=1e-12)
