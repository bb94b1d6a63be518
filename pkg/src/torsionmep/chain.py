"""Coarse-grained backbone chains built from rigid bodies, and replica bands.

Layout for n residues (0-based body indices): body 0 is the N-terminal cap
(virtual C_0 and N_1), body 2i-1 carries residue i's C-alpha, body 2i is the
peptide plane linking residue i to i+1 (the C-terminal cap for i = n).
Joint 2i-2 turns phi_i about N_i -> CA_i and joint 2i-1 turns psi_i about
CA_i -> C_i, so the 2n joints run phi_1, psi_1, ..., phi_n, psi_n.

Dihedrals follow the IUPAC convention (trans = pi).  The reference pose,
Theta = 0, is the planar chain with every phi and psi at 0 and the peptide
bonds trans.
"""

from __future__ import annotations

import copy
import csv
import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError
from .landscape import Landscape, wrap_angle
from .mep import NEBConfig, PathState, SolveReport, evaluate, neb_forces
from .multibody import (DIAOptions, Joint, MultibodySystem, RigidBody, axis_angle_quat, dia_step,
                        joint_angles, joint_lengths, quat_multiply, rotation_matrix, spring_energy)

JOINT_KINDS = ("revolute", "cylindrical")


# ---------------------------------------------------------------------------
# presets and sequences


@dataclass(frozen=True)
class Preset:
    name: str
    version: int
    bond_lengths: dict
    bond_angles_deg: dict
    omega_deg: float
    masses: dict
    inertia_floor: float
    springs: dict
    residues: tuple

    @classmethod
    def from_dict(cls, d: dict) -> "Preset":
        try:
            return cls(d["name"], int(d["version"]), dict(d["bond_lengths"]), dict(d["bond_angles_deg"]),
                       float(d["omega_deg"]), dict(d["masses"]), float(d["inertia_floor"]), dict(d["springs"]),
                       tuple(d["residues"]))
        except KeyError as exc:
            raise ConfigurationError(f"preset is missing {exc}") from exc

    @classmethod
    def load(cls, path=None) -> "Preset":
        if path is None:
            text = resources.files("torsionmep.presets").joinpath("backbone.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


def default_preset() -> Preset:
    return Preset.load()


def parse_sequence(text: str, preset: Preset | None = None) -> list[str]:
    """'GLY-TYR-ASP' -> ['GLY', 'TYR', 'ASP'] (validated against the preset)."""
    preset = preset or default_preset()
    seq = [tok.strip().upper() for tok in text.strip().split("-")]
    if not seq or any(not tok for tok in seq):
        raise ConfigurationError(f"empty residue code in sequence {text!r}")
    unknown = [tok for tok in seq if tok not in preset.residues]
    if unknown:
        raise ConfigurationError(f"unknown residue kind(s) {unknown}")
    return seq


# ---------------------------------------------------------------------------
# geometry


def dihedral(a, b, c, d) -> float:
    """Signed IUPAC dihedral a-b-c-d in (-pi, pi]."""
    b0 = a - b
    b1 = c - b
    b2 = d - c
    n1 = np.linalg.norm(b1)
    if n1 < 1e-12:
        raise DomainError("dihedral undefined: central atoms coincide")
    b1 = b1 / n1
    v = b0 - (b0 @ b1) * b1
    w = b2 - (b2 @ b1) * b1
    if np.linalg.norm(v) < 1e-12 or np.linalg.norm(w) < 1e-12:
        raise DomainError("dihedral undefined: collinear atoms")
    return float(wrap_angle(np.arctan2(np.cross(b1, v) @ w, v @ w)))


def place_atom(a, b, c, length, angle, torsion):
    """Position of d with |cd| = length, angle(b, c, d) = angle and dihedral(a, b, c, d) = torsion."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    local = length * np.array([-np.cos(angle), np.sin(angle) * np.cos(torsion), np.sin(angle) * np.sin(torsion)])
    return c + local[0] * bc + local[1] * m + local[2] * n


def backbone_coordinates(n: int, preset: Preset, phi=None, psi=None) -> dict:
    """Atom positions keyed by (name, residue) for C_0, N_1, CA_1, C_1, ..., C_n, N_{n+1}."""
    L = preset.bond_lengths
    ang = {k: np.deg2rad(v) for k, v in preset.bond_angles_deg.items()}
    omega = np.deg2rad(preset.omega_deg)
    phi = np.zeros(n) if phi is None else np.asarray(phi, dtype=float)
    psi = np.zeros(n) if psi is None else np.asarray(psi, dtype=float)
    X = {("N", 1): np.zeros(3), ("CA", 1): np.array([L["N_CA"], 0.0, 0.0])}
    a = ang["C_N_CA"]
    X[("C", 0)] = L["C_N"] * np.array([np.cos(a), -np.sin(a), 0.0])
    for i in range(1, n + 1):
        X[("C", i)] = place_atom(X[("C", i - 1)], X[("N", i)], X[("CA", i)], L["CA_C"], ang["N_CA_C"], phi[i - 1])
        X[("N", i + 1)] = place_atom(X[("N", i)], X[("CA", i)], X[("C", i)], L["C_N"], ang["CA_C_N"], psi[i - 1])
        if i < n:
            X[("CA", i + 1)] = place_atom(X[("CA", i)], X[("C", i)], X[("N", i + 1)], L["N_CA"], ang["C_N_CA"], omega)
    for i in range(1, n):
        # carbonyl O and amide H in the peptide plane, opposite the bisector of their two bonds
        c, nn = X[("C", i)], X[("N", i + 1)]
        u = _unit(X[("CA", i)] - c) + _unit(nn - c)
        X[("O", i)] = c - L["C_O"] * _unit(u)
        u = _unit(c - nn) + _unit(X[("CA", i + 1)] - nn)
        X[("H", i + 1)] = nn - L["N_H"] * _unit(u)
    u = _unit(X[("C", 0)] - X[("N", 1)]) + _unit(X[("CA", 1)] - X[("N", 1)])
    X[("H", 1)] = X[("N", 1)] - L["N_H"] * _unit(u)
    if n >= 1:
        u = _unit(X[("CA", n)] - X[("C", n)]) + _unit(X[("N", n + 1)] - X[("C", n)])
        X[("O", n)] = X[("C", n)] - L["C_O"] * _unit(u)
    return X


def _unit(v):
    return v / np.linalg.norm(v)


def _rigid_body(points: dict, mass: float, floor: float, name: str) -> RigidBody:
    P = np.array(list(points.values()))
    centre = P.mean(axis=0)
    S = P - centre
    m = mass / len(P)
    J = m * (np.sum(S * S) * np.eye(3) - S.T @ S) + floor * np.eye(3)
    return RigidBody(mass=mass, inertia=J, r=centre, points={k: v - centre for k, v in points.items()}, name=name)


# ---------------------------------------------------------------------------
# models


@dataclass
class Conformation:
    """Joint parameters: 2n angles (phi_1, psi_1, ...) and, for cylindrical chains, 2n lengths."""

    angles: np.ndarray
    lengths: np.ndarray | None = None

    def __post_init__(self):
        self.angles = wrap_angle(np.asarray(self.angles, dtype=float))
        if self.lengths is not None:
            self.lengths = np.asarray(self.lengths, dtype=float)
            if self.lengths.shape != self.angles.shape:
                raise ValueError("lengths and angles must have the same shape")
            if np.any(self.lengths <= 0):
                raise ValueError("joint lengths must be positive")

    @property
    def vector(self) -> np.ndarray:
        """Revolute: the angles; cylindrical: interleaved (d, theta) pairs."""
        if self.lengths is None:
            return self.angles.copy()
        return np.column_stack([self.lengths, self.angles]).ravel()

    @classmethod
    def from_vector(cls, theta, joint_kind: str = "revolute") -> "Conformation":
        theta = np.asarray(theta, dtype=float)
        if joint_kind == "cylindrical":
            pairs = theta.reshape(-1, 2)
            return cls(pairs[:, 1], pairs[:, 0])
        return cls(theta)


@dataclass
class ChainModel:
    sequence: list
    system: MultibodySystem
    joint_kind: str
    preset: Preset
    layout: str = "backbone"  # backbone (2n+1 bodies) or atomic (one body per atom)
    reference: list = field(default_factory=list)  # (r, p) per body at Theta = 0
    atom_owner: dict = field(default_factory=dict)  # (name, residue) -> (body, point)
    torsion_joints: list = field(default_factory=list)  # joint carrying phi_1, psi_1, phi_2, ...

    @property
    def n(self) -> int:
        return len(self.sequence)

    @property
    def bodies(self):
        return self.system.bodies

    @property
    def joints(self):
        return self.system.joints

    def atom(self, name, residue) -> np.ndarray:
        b, pt = self.atom_owner[(name, residue)]
        return self.system.bodies[b].point(pt)

    def propensity_landscape(self, landscape: Landscape):
        """Hook mapping joint angles to the chain landscape (joint angle 0 is dihedral 0)."""
        from .multibody import JointAngleLandscape

        return JointAngleLandscape(landscape, self.system.n_joints, self.torsion_joints)

    def joint_vector(self, per_torsion) -> np.ndarray:
        """Scatter 2n per-torsion values onto all joints (zero elsewhere)."""
        out = np.zeros(self.system.n_joints)
        out[self.torsion_joints] = per_torsion
        return out


def build_chain_model(sequence, joint_kind: str = "revolute", preset: Preset | None = None,
                      layout: str = "backbone") -> ChainModel:
    preset = preset or default_preset()
    if isinstance(sequence, str):
        sequence = parse_sequence(sequence, preset)
    sequence = list(sequence)
    if len(sequence) < 1:
        raise ConfigurationError("a chain needs at least one residue")
    unknown = [s for s in sequence if s not in preset.residues]
    if unknown:
        raise ConfigurationError(f"unknown residue kind(s) {unknown}")
    if joint_kind not in JOINT_KINDS:
        raise ConfigurationError(f"joint kind must be one of {JOINT_KINDS}")
    if layout == "atomic":
        return _build_atomic(sequence, joint_kind, preset)
    if layout != "backbone":
        raise ConfigurationError(f"unknown layout {layout!r}")
    n = len(sequence)
    X = backbone_coordinates(n, preset)
    floor = preset.inertia_floor
    bodies = [_rigid_body({"C": X[("C", 0)], "N": X[("N", 1)], "CA_next": X[("CA", 1)]},
                          preset.masses["peptide"], floor, "cap_N")]
    owner = {("C", 0): (0, "C"), ("N", 1): (0, "N")}
    for i in range(1, n + 1):
        bodies.append(_rigid_body({"N": X[("N", i)], "CA": X[("CA", i)], "C": X[("C", i)]},
                                  preset.masses["calpha"], floor, f"CA{i}"))
        pts = {"CA_prev": X[("CA", i)], "C": X[("C", i)], "O": X[("O", i)], "N": X[("N", i + 1)]}
        if i < n:
            pts.update({"H": X[("H", i + 1)], "CA_next": X[("CA", i + 1)]})
        bodies.append(_rigid_body(pts, preset.masses["peptide"], floor, f"pep{i}" if i < n else "cap_C"))
        owner[("CA", i)] = (2 * i - 1, "CA")
        owner[("C", i)] = (2 * i, "C")
        owner[("N", i + 1)] = (2 * i, "N")
    joints = []
    for i in range(1, n + 1):
        for kind, (a, b), bi, key in (("phi", ("N", "CA"), 2 * i - 2, "N_CA"), ("psi", ("CA", "C"), 2 * i - 1, "CA_C")):
            bj = bi + 1
            pa, pb = X[(a, i)], X[(b, i)]
            axis = _unit(pb - pa)
            Bi, Bj = bodies[bi], bodies[bj]
            anchor_i = pa - Bi.r
            if joint_kind == "revolute":
                joints.append(Joint("revolute", bi, bj, axis, axis, anchor_i, pa - Bj.r, name=f"{kind}{i}"))
            else:
                sp = preset.springs[key]
                joints.append(Joint("cylindrical", bi, bj, axis, axis, anchor_i, pb - Bj.r,
                                    stiffness=float(sp["k"]), rest_length=float(sp["rest_length"]),
                                    name=f"{kind}{i}"))
    system = MultibodySystem(bodies, joints)
    ref = [(b.r.copy(), b.p.copy()) for b in bodies]
    return ChainModel(sequence, system, joint_kind, preset, "backbone", ref, owner, list(range(2 * n)))


def _build_atomic(sequence, joint_kind, preset) -> ChainModel:
    # one body per backbone atom (N, H, CA, C, O), joints along the covalent bonds: a tree
    n = len(sequence)
    X = backbone_coordinates(n, preset)
    names = ("N", "H", "CA", "C", "O")
    index = {}
    bodies = []
    floor = preset.inertia_floor
    for i in range(1, n + 1):
        for a in names:
            index[(a, i)] = len(bodies)
            bodies.append(RigidBody(mass=preset.masses["atom"], inertia=np.eye(3) * max(floor, 1e-3),
                                    r=X[(a, i)], points={"atom": np.zeros(3)}, name=f"{a}{i}"))
    bonds = []
    for i in range(1, n + 1):
        bonds += [(("N", i), ("H", i)), (("N", i), ("CA", i)), (("CA", i), ("C", i)), (("C", i), ("O", i))]
        if i < n:
            bonds.append((("C", i), ("N", i + 1)))
    joints = []
    torsions = []
    for a, b in bonds:
        if (a[0], b[0]) in (("N", "CA"), ("CA", "C")):
            torsions.append(len(joints))
        d = X[b] - X[a]
        u = _unit(d)
        if joint_kind == "revolute":
            joints.append(Joint("revolute", index[a], index[b], u, u, d, np.zeros(3), name=f"{a[0]}{a[1]}-{b[0]}{b[1]}"))
        else:
            joints.append(Joint("cylindrical", index[a], index[b], u, u, np.zeros(3), np.zeros(3),
                                stiffness=1.0, rest_length=float(np.linalg.norm(d)),
                                name=f"{a[0]}{a[1]}-{b[0]}{b[1]}"))
    system = MultibodySystem(bodies, joints, open_chain=False)
    ref = [(b.r.copy(), b.p.copy()) for b in bodies]
    owner = {key: (idx, "atom") for key, idx in index.items()}
    return ChainModel(sequence, system, joint_kind, preset, "atomic", ref, owner, torsions)


def measure_dihedrals(model: ChainModel) -> Conformation:
    lengths = joint_lengths(model.system)[model.torsion_joints] if model.joint_kind == "cylindrical" else None
    if model.layout == "atomic":
        # no cap atoms to define phi_1 / psi_n: the torsion joint angles are the dihedrals
        return Conformation(joint_angles(model.system)[model.torsion_joints], lengths)
    angles = np.zeros(2 * model.n)
    for i in range(1, model.n + 1):
        c0, n1, ca, c1, n2 = (model.atom("C", i - 1), model.atom("N", i), model.atom("CA", i),
                              model.atom("C", i), model.atom("N", i + 1))
        try:
            angles[2 * i - 2] = dihedral(c0, n1, ca, c1)
            angles[2 * i - 1] = dihedral(n1, ca, c1, n2)
        except DomainError as exc:
            raise DomainError(f"body {2 * i - 1} ({model.bodies[2 * i - 1].name}): {exc}") from exc
    return Conformation(angles, lengths)


def _downstream(model: ChainModel, k: int) -> list[int]:
    jt = model.joints[k]
    if model.layout == "backbone":
        return list(range(jt.body_j, model.system.n_bodies))
    adj = {}
    for m, other in enumerate(model.joints):
        if m != k:
            adj.setdefault(other.body_i, []).append(other.body_j)
            adj.setdefault(other.body_j, []).append(other.body_i)
    seen = {jt.body_j}
    todo = deque([jt.body_j])
    while todo:
        b = todo.popleft()
        for c in adj.get(b, []):
            if c not in seen:
                seen.add(c)
                todo.append(c)
    return sorted(seen)


def _move(body: RigidBody, q, centre, shift):
    R = rotation_matrix(q)
    body.r = centre + R @ (body.r - centre) + shift
    body.p = quat_multiply(q, body.p)
    body.p /= np.linalg.norm(body.p)


def apply_conformation(model: ChainModel, theta) -> ChainModel:
    """Pose the chain so its measured joint parameters equal theta; velocities zeroed.

    The chain is rebuilt from the reference pose (which satisfies every
    constraint exactly) by rotating, and for cylindrical joints sliding, the
    sub-chain downstream of each joint; the result is then placed so body 0
    keeps its current position and orientation.
    """
    conf = as_conformation(theta, model)
    sys = model.system
    b0 = sys.bodies[0]
    keep_r, keep_p = b0.r.copy(), b0.p.copy()
    for body, (r, p) in zip(sys.bodies, model.reference):
        body.r, body.p = r.copy(), p.copy()
    # torsions are set in chain order; each move leaves upstream dihedrals untouched
    for m, k in enumerate(model.torsion_joints):
        jt = sys.joints[k]
        Bi = sys.bodies[jt.body_i]
        u = Bi.A @ jt.axis_i
        centre = Bi.r + Bi.A @ jt.anchor_i
        delta = float(conf.angles[m])  # reference dihedrals are all zero
        shift = np.zeros(3)
        if conf.lengths is not None:
            shift = (conf.lengths[m] - jt.rest_length) * u
        q = axis_angle_quat(u, delta)
        for b in _downstream(model, k):
            _move(sys.bodies[b], q, centre, shift)
    # carry the whole chain onto the kept pose of body 0
    q_fix = quat_multiply(keep_p, _conj(sys.bodies[0].p))
    R = rotation_matrix(q_fix)
    origin = sys.bodies[0].r.copy()
    for body in sys.bodies:
        body.r = keep_r + R @ (body.r - origin)
        body.p = quat_multiply(q_fix, body.p)
        body.p /= np.linalg.norm(body.p)
    sys.zero_velocities()
    return model


def as_conformation(theta, model: ChainModel) -> Conformation:
    """Accept a Conformation, 2n angles, or (cylindrical) 2n interleaved (d, theta) pairs."""
    if isinstance(theta, Conformation):
        conf = theta
    else:
        theta = np.asarray(theta, dtype=float).ravel()
        if model.joint_kind == "cylindrical" and theta.size == 4 * model.n:
            conf = Conformation.from_vector(theta, "cylindrical")
        else:
            conf = Conformation(theta)
    if conf.angles.shape != (2 * model.n,):
        raise ValueError(f"expected {2 * model.n} joint angles, got {conf.angles.size}")
    if conf.lengths is not None and model.joint_kind != "cylindrical":
        raise ValueError("joint lengths given for a revolute chain")
    return conf


def _conj(p):
    return np.array([p[0], -p[1], -p[2], -p[3]])


def reset_reference(model: ChainModel) -> ChainModel:
    for body, (r, p) in zip(model.bodies, model.reference):
        body.r, body.p = r.copy(), p.copy()
    model.system.zero_velocities()
    return model


# ---------------------------------------------------------------------------
# replica bands


class ReplicaBand:
    """r copies of a chain whose matching joint angles are coupled by NEB springs.

    Replicas are independent rigid-body systems apart from the band forces,
    so the combined saddle system is block diagonal and each block is
    stepped on its own.
    """

    def __init__(self, base: ChainModel, conformations, k: float):
        if len(conformations) < 3:
            raise ValueError(f"a band needs at least 3 replicas, got {len(conformations)}")
        if not k > 0:
            raise ValueError("band stiffness must be positive")
        self.base = base
        self.k = float(k)
        self.replicas = []
        for idx, c in enumerate(conformations):
            try:
                conf = as_conformation(c, base)
            except ValueError as exc:
                raise ValueError(f"replica {idx}: {exc}") from None
            model = copy.deepcopy(base)
            apply_conformation(model, conf)
            self.replicas.append(model)

    @property
    def r(self) -> int:
        return len(self.replicas)

    @property
    def n_band_springs(self) -> int:
        return (self.r - 1) * 2 * self.base.n

    def conformations(self) -> list[Conformation]:
        return [measure_dihedrals(m) for m in self.replicas]

    def angles(self) -> np.ndarray:
        return np.array([c.angles for c in self.conformations()])

    @property
    def system(self) -> MultibodySystem:
        """All replicas merged into one (block-diagonal) system."""
        bodies, joints = [], []
        for m in self.replicas:
            offset = len(bodies)
            bodies += [copy.deepcopy(b) for b in m.bodies]
            for jt in m.joints:
                j2 = copy.deepcopy(jt)
                j2.body_i += offset
                j2.body_j += offset
                joints.append(j2)
        return MultibodySystem(bodies, joints, open_chain=self.base.layout == "backbone", check_rank=False)


def build_replica_band(model: ChainModel, conformations, k: float) -> ReplicaBand:
    return ReplicaBand(model, conformations, k)


@dataclass
class BandConfig:
    dt: float = 0.15  # pseudo-time of the single rest-start DIA step; ~0.3 and up diverges
    tol: float = 1e-4
    max_iters: int = 20_000
    options: DIAOptions = field(default_factory=DIAOptions)

    def __post_init__(self):
        if not (self.dt > 0 and self.tol > 0 and self.max_iters >= 0):
            raise ValueError("band config needs dt > 0, tol > 0, max_iters >= 0")


@dataclass
class BandReport(SolveReport):
    max_tangent_force: list = field(default_factory=list)
    spring_energy: list = field(default_factory=list)


def relax_band(band: ReplicaBand, landscape: Landscape, cfg: BandConfig | None = None):
    """Steady-state relaxation of a replica band.

    Each iteration measures the replica angles, evaluates NEB forces in angle
    space, applies them to every interior replica as pure joint moments and
    advances that replica by one DIA step from rest.  Endpoint replicas are
    never moved.  Returns the BandReport; the band is relaxed in place.
    """
    cfg = cfg or BandConfig()
    if landscape.dim != 2 * band.base.n:
        raise ValueError(f"landscape dimension {landscape.dim} != {2 * band.base.n} chain angles")
    neb = NEBConfig(k=band.k)
    report = BandReport(method="band")
    report.step_size = cfg.dt
    for it in range(cfg.max_iters + 1):
        path = PathState(band.angles(), periodic=True)
        E, G = evaluate(path, landscape, iteration=it)
        F, Fperp, Fpar = neb_forces(path, E, G, neb)
        crit = float(np.max(np.linalg.norm(F, axis=1)))
        report.criterion = crit
        if crit <= cfg.tol:
            report.converged = True
            break
        if it == cfg.max_iters:
            break
        report.record(E.sum(), np.max(np.linalg.norm(G, axis=1)), np.max(np.linalg.norm(Fperp, axis=1)), crit)
        report.max_tangent_force.append(float(np.max(np.linalg.norm(Fpar, axis=1))))
        report.spring_energy.append(float(sum(spring_energy(m.system) for m in band.replicas)))
        for j in range(1, band.r - 1):
            model = band.replicas[j]
            model.system.zero_velocities()
            dia_step(model.system, cfg.dt, cfg.options, nu=model.joint_vector(-F[j]))
            # re-seat on the constraint manifold at the reached joint parameters
            apply_conformation(model, measure_dihedrals(model))
    return report


def band_path_energy(band: ReplicaBand, landscape: Landscape) -> float:
    E, _ = evaluate(PathState(band.angles(), periodic=True), landscape)
    return float(E.sum())


def write_band_snapshot(band: ReplicaBand, filename):
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        cyl = band.base.joint_kind == "cylindrical"
        w.writerow(["replica", "joint", "angle_rad"] + (["length"] if cyl else []))
        for j, conf in enumerate(band.conformations()):
            for k, a in enumerate(conf.angles):
                row = [j + 1, k + 1, repr(float(a))]
                if cyl:
                    row.append(repr(float(conf.lengths[k])))
                w.writerow(row)
    return Path(filename)


def write_band_report_csv(report: BandReport, filename):
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "path_energy", "max_grad_norm", "max_perp_force", "max_tangent_force",
                    "max_force", "spring_energy"])
        for i in range(report.iterations):
            w.writerow([i, repr(report.path_energy[i]), repr(report.max_grad_norm[i]),
                        repr(report.max_perp_force[i]), repr(report.max_tangent_force[i]),
                        repr(report.max_force[i]), repr(report.spring_energy[i])])
    return Path(filename)
