"""Open-chain rigid-body systems with revolute and cylindrical joints.

Coordinates: each body carries a global position r, Euler parameters p
(scalar first), a linear velocity v and a global angular velocity w.  The
generalized velocity of body b is [v_b, w_b], so the system has 6 DOF per
body and accelerations are solved from the saddle-point system

    [M  Phi_q^T] [qdd]   [g    ]
    [Phi_q   0 ] [lam] = [gamma]

Body index -1 denotes the fixed ground frame.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import lu_factor, lu_solve, qr

from .errors import (ConfigurationError, ConstraintViolationError, ConvergenceError, InputError,
                     NonFiniteError, SingularSystemError)

GROUND = -1
JOINT_KINDS = ("revolute", "cylindrical")
_I3 = np.eye(3)
_Z3 = np.zeros(3)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _normalized_quat(p, tol=1e-9):
    p = np.asarray(p, dtype=float)
    n = np.linalg.norm(p)
    if n == 0 or not np.isfinite(n):
        raise ValueError(f"invalid Euler parameters {p}")
    if abs(n - 1.0) > tol:
        warnings.warn(f"Euler parameters with norm {n:.3g} renormalized", RuntimeWarning, stacklevel=3)
    return p / n


def rotation_matrix(p) -> np.ndarray:
    """A(p) for Euler parameters p = (e0, e1, e2, e3); global s = A s'."""
    e0, *e = _normalized_quat(p)
    e = np.array(e)
    return (2 * e0 * e0 - 1) * _I3 + 2 * (np.outer(e, e) + e0 * skew(e))


def _rotation_matrices(P):
    # vectorized A(p) for unit rows of P, shape (nb, 3, 3)
    e0, e1, e2, e3 = P.T
    A = np.empty((P.shape[0], 3, 3))
    A[:, 0, 0] = 2 * (e0 * e0 + e1 * e1) - 1
    A[:, 0, 1] = 2 * (e1 * e2 - e0 * e3)
    A[:, 0, 2] = 2 * (e1 * e3 + e0 * e2)
    A[:, 1, 0] = 2 * (e1 * e2 + e0 * e3)
    A[:, 1, 1] = 2 * (e0 * e0 + e2 * e2) - 1
    A[:, 1, 2] = 2 * (e2 * e3 - e0 * e1)
    A[:, 2, 0] = 2 * (e1 * e3 - e0 * e2)
    A[:, 2, 1] = 2 * (e2 * e3 + e0 * e1)
    A[:, 2, 2] = 2 * (e0 * e0 + e3 * e3) - 1
    return A


def g_matrix(p) -> np.ndarray:
    """3x4 matrix G(p) with pdot = 1/2 G^T w for a global angular velocity w."""
    e0, *e = np.asarray(p, dtype=float)
    e = np.array(e)
    return np.hstack([-e[:, None], e0 * _I3 + skew(e)])


def _pdot(P, W):
    # 1/2 G^T w row-wise: [-e.w, e0 w - e x w]
    e0 = P[:, :1]
    e = P[:, 1:]
    return 0.5 * np.hstack([-np.sum(e * W, axis=1, keepdims=True), e0 * W - np.cross(e, W)])


def quat_multiply(a, b) -> np.ndarray:
    a0, av = a[0], np.asarray(a[1:])
    b0, bv = b[0], np.asarray(b[1:])
    return np.concatenate([[a0 * b0 - av @ bv], a0 * bv + b0 * av + np.cross(av, bv)])


def axis_angle_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if angle == 0 or not n > 0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def _cx(a, b):
    # 3-vector cross product; np.cross is slow for single vectors
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _perpendicular_pair(u):
    # two unit vectors completing u to a right-handed orthonormal frame (h1, h2, u)
    trial = _I3[np.argmin(np.abs(u))]
    h1 = np.cross(u, trial)
    h1 /= np.linalg.norm(h1)
    return h1, np.cross(u, h1)


# ---------------------------------------------------------------------------
# model types


@dataclass
class RigidBody:
    mass: float = 1.0
    inertia: np.ndarray = field(default_factory=lambda: np.eye(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    p: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    points: dict = field(default_factory=dict)  # name -> local coordinates
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))  # constant global force
    name: str = ""

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"body {self.name!r}: mass must be positive")
        J = np.array(self.inertia, dtype=float)
        if J.shape == (3,):
            J = np.diag(J)
        if J.shape != (3, 3) or not np.allclose(J, J.T, atol=1e-12):
            raise ValueError(f"body {self.name!r}: inertia must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(J)) <= 0:
            raise ValueError(f"body {self.name!r}: inertia must be positive definite")
        self.inertia = J
        self.r = np.array(self.r, dtype=float)
        self.p = _normalized_quat(self.p)
        self.v = np.array(self.v, dtype=float)
        self.w = np.array(self.w, dtype=float)
        self.force = np.array(self.force, dtype=float)
        self.points = {k: np.array(v, dtype=float) for k, v in self.points.items()}

    @property
    def A(self) -> np.ndarray:
        return rotation_matrix(self.p)

    def point(self, name) -> np.ndarray:
        return self.r + self.A @ self.points[name]


@dataclass
class Joint:
    """Revolute (5 scalar constraints) or cylindrical (4) joint between two bodies.

    axis_i/axis_j are the joint axis in each body's frame, anchor_i/anchor_j
    the joint points.  Cylindrical joints may carry a linear spring between
    the anchors.  ``redundant`` switches to the 3-row cross-product form of
    the parallelism conditions (rank deficient; use the pinv solver).
    """

    kind: str
    body_i: int
    body_j: int
    axis_i: np.ndarray
    axis_j: np.ndarray
    anchor_i: np.ndarray = field(default_factory=lambda: np.zeros(3))
    anchor_j: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stiffness: float | None = None
    rest_length: float | None = None
    redundant: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind not in JOINT_KINDS:
            raise ValueError(f"joint kind must be one of {JOINT_KINDS}, got {self.kind!r}")
        for label in ("axis_i", "axis_j"):
            u = np.array(getattr(self, label), dtype=float)
            n = np.linalg.norm(u)
            if not n > 0:
                raise ConfigurationError(f"joint {self.name or ''}: {label} is a zero vector")
            setattr(self, label, u / n)
        self.anchor_i = np.array(self.anchor_i, dtype=float)
        self.anchor_j = np.array(self.anchor_j, dtype=float)
        if self.stiffness is not None:
            if self.kind != "cylindrical":
                raise ConfigurationError("joint springs are only defined for cylindrical joints")
            if self.stiffness < 0 or self.rest_length is None or self.rest_length < 0:
                raise ConfigurationError("spring needs stiffness >= 0 and a rest length >= 0")
        self.perp_i = np.array(_perpendicular_pair(self.axis_i))
        self.ref_j = self.perp_i[0].copy()  # reset by the system on assembly

    @property
    def n_constraints(self) -> int:
        if self.redundant:
            return 6
        return 5 if self.kind == "revolute" else 4

    @property
    def has_spring(self) -> bool:
        return self.stiffness is not None


@dataclass
class LangevinConfig:
    rho: float
    beta_thermo: float
    seed: int

    def __post_init__(self):
        if self.rho < 0 or not self.beta_thermo > 0:
            raise ValueError("langevin needs rho >= 0 and beta_thermo > 0")


class _Snapshot:
    """Arrays of the kinematic state with rotation matrices precomputed."""

    __slots__ = ("r", "p", "v", "w", "A")

    def __init__(self, r, p, v, w):
        self.r, self.v, self.w = r, v, w
        self.p = p / np.linalg.norm(p, axis=1)[:, None]
        self.A = _rotation_matrices(self.p)

    def frame(self, b):
        if b == GROUND:
            return _Z3, _I3, _Z3, _Z3
        return self.r[b], self.A[b], self.v[b], self.w[b]


class MultibodySystem:
    def __init__(self, bodies, joints, *, propensity_hook=None, langevin: LangevinConfig | None = None,
                 t: float = 0.0, open_chain: bool = True, check_rank: bool = True):
        self.bodies = list(bodies)
        self.joints = list(joints)
        self.propensity_hook = propensity_hook
        self.langevin = langevin
        self.t = float(t)
        self.rng = np.random.default_rng(langevin.seed if langevin else 0)
        self.diagnostics: dict = {}
        self._check_topology(open_chain)
        snap = self.snapshot()
        for jt in self.joints:
            # body-j vector that coincides with perp_i[0] in the assembled pose: joint angle 0
            _, Ai, _, _ = snap.frame(jt.body_i)
            _, Aj, _, _ = snap.frame(jt.body_j)
            jt.ref_j = Aj.T @ (Ai @ jt.perp_i[0])
        if check_rank and self.joints and not any(jt.redundant for jt in self.joints):
            dependent = rank_diagnostic(constraint_jacobian(self))
            if dependent:
                raise SingularSystemError(f"constraint Jacobian is rank deficient; dependent rows {dependent}")

    def _check_topology(self, open_chain):
        nb = len(self.bodies)
        parent = list(range(nb + 1))  # slot nb is the ground

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        degree = np.zeros(nb, dtype=int)
        for k, jt in enumerate(self.joints):
            for b in (jt.body_i, jt.body_j):
                if not (b == GROUND or 0 <= b < nb):
                    raise ConfigurationError(f"joint {k} references unknown body {b}")
                if b != GROUND:
                    degree[b] += 1
            if jt.body_i == jt.body_j:
                raise ConfigurationError(f"joint {k} connects body {jt.body_i} to itself")
            a = find(nb if jt.body_i == GROUND else jt.body_i)
            c = find(nb if jt.body_j == GROUND else jt.body_j)
            if a == c:
                raise ConfigurationError(f"joint {k} closes a kinematic loop")
            parent[a] = c
        if open_chain and np.any(degree > 2):
            raise ConfigurationError(f"bodies {np.flatnonzero(degree > 2).tolist()} sit in more than two joints")

    @property
    def n_bodies(self) -> int:
        return len(self.bodies)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def dof(self) -> int:
        return 6 * self.n_bodies

    @property
    def n_constraints(self) -> int:
        return sum(jt.n_constraints for jt in self.joints)

    def snapshot(self) -> _Snapshot:
        b = self.bodies
        return _Snapshot(np.array([x.r for x in b]).reshape(-1, 3), np.array([x.p for x in b]).reshape(-1, 4),
                         np.array([x.v for x in b]).reshape(-1, 3), np.array([x.w for x in b]).reshape(-1, 3))

    def state_vector(self) -> np.ndarray:
        s = self.snapshot()
        return np.concatenate([s.r.ravel(), s.p.ravel(), s.v.ravel(), s.w.ravel()])

    def set_state_vector(self, y):
        r, p, v, w = _split_state(y, self.n_bodies)
        p = p / np.linalg.norm(p, axis=1)[:, None]
        for k, body in enumerate(self.bodies):
            body.r, body.p, body.v, body.w = r[k].copy(), p[k].copy(), v[k].copy(), w[k].copy()

    def qdot(self) -> np.ndarray:
        return np.concatenate([np.concatenate([b.v, b.w]) for b in self.bodies]) if self.bodies else np.zeros(0)

    def zero_velocities(self):
        for b in self.bodies:
            b.v = np.zeros(3)
            b.w = np.zeros(3)


def _split_state(y, nb):
    r = y[: 3 * nb].reshape(nb, 3)
    p = y[3 * nb: 7 * nb].reshape(nb, 4)
    v = y[7 * nb: 10 * nb].reshape(nb, 3)
    w = y[10 * nb: 13 * nb].reshape(nb, 3)
    return r, p, v, w


# ---------------------------------------------------------------------------
# constraint primitives: each returns (phi, Ji, Jj, gamma) with J blocks (k, 6)
# over [v, w] of bodies i and j


def _dot1(a, b, wi, wj):
    Ji = np.zeros((1, 6))
    Jj = np.zeros((1, 6))
    Ji[0, 3:] = _cx(a, b)
    Jj[0, 3:] = _cx(b, a)
    wa = _cx(wi, a)
    wb = _cx(wj, b)
    gam = -(_cx(wi, wa) @ b + 2 * wa @ wb + a @ _cx(wj, wb))
    return np.array([a @ b]), Ji, Jj, np.array([gam])


def _dot2(a, d, si, sj, vi, wi, vj, wj):
    Ji = np.zeros((1, 6))
    Jj = np.zeros((1, 6))
    Ji[0, :3] = -a
    Ji[0, 3:] = _cx(a, d + si)
    Jj[0, :3] = a
    Jj[0, 3:] = _cx(sj, a)
    wa = _cx(wi, a)
    ddot = vj + _cx(wj, sj) - vi - _cx(wi, si)
    dacc = _cx(wj, _cx(wj, sj)) - _cx(wi, _cx(wi, si))
    gam = -(_cx(wi, wa) @ d + 2 * wa @ ddot + a @ dacc)
    return np.array([a @ d]), Ji, Jj, np.array([gam])


def _sph(pi, pj, si, sj, wi, wj):
    Ji = np.hstack([_I3, -skew(si)])
    Jj = np.hstack([-_I3, skew(sj)])
    gam = -(_cx(wi, _cx(wi, si)) - _cx(wj, _cx(wj, sj)))
    return pi - pj, Ji, Jj, gam


def _cross(a, b, wi, wj):
    Ji = np.zeros((3, 6))
    Jj = np.zeros((3, 6))
    Ji[:, 3:] = skew(b) @ skew(a)
    Jj[:, 3:] = -skew(a) @ skew(b)
    wa = _cx(wi, a)
    wb = _cx(wj, b)
    gam = -(_cx(_cx(wi, wa), b) + 2 * _cx(wa, wb) + _cx(a, _cx(wj, wb)))
    return _cx(a, b), Ji, Jj, gam


def _cross_d(a, d, si, sj, vi, wi, vj, wj):
    A = skew(a)
    Ji = np.hstack([-A, skew(d) @ A + A @ skew(si)])
    Jj = np.hstack([A, -A @ skew(sj)])
    wa = _cx(wi, a)
    ddot = vj + _cx(wj, sj) - vi - _cx(wi, si)
    dacc = _cx(wj, _cx(wj, sj)) - _cx(wi, _cx(wi, si))
    gam = -(_cx(_cx(wi, wa), d) + 2 * _cx(wa, ddot) + _cx(a, dacc))
    return _cx(a, d), Ji, Jj, gam


def _joint_terms(jt: Joint, snap: _Snapshot):
    ri, Ai, vi, wi = snap.frame(jt.body_i)
    rj, Aj, vj, wj = snap.frame(jt.body_j)
    ui = Ai @ jt.axis_i
    uj = Aj @ jt.axis_j
    si = Ai @ jt.anchor_i
    sj = Aj @ jt.anchor_j
    parts = []
    if jt.redundant:
        parts.append(_cross(ui, uj, wi, wj))
    else:
        h1, h2 = Ai @ jt.perp_i[0], Ai @ jt.perp_i[1]
        parts.append(_dot1(h1, uj, wi, wj))
        parts.append(_dot1(h2, uj, wi, wj))
    if jt.kind == "revolute":
        parts.append(_sph(ri + si, rj + sj, si, sj, wi, wj))
    else:
        d = rj + sj - ri - si
        if jt.redundant:
            parts.append(_cross_d(ui, d, si, sj, vi, wi, vj, wj))
        else:
            parts.append(_dot2(h1, d, si, sj, vi, wi, vj, wj))
            parts.append(_dot2(h2, d, si, sj, vi, wi, vj, wj))
    phi = np.concatenate([p[0] for p in parts])
    Ji = np.vstack([p[1] for p in parts])
    Jj = np.vstack([p[2] for p in parts])
    gam = np.concatenate([p[3] for p in parts])
    return phi, Ji, Jj, gam


def _constraints(sys: MultibodySystem, snap: _Snapshot):
    m = sys.n_constraints
    phi = np.zeros(m)
    Jq = np.zeros((m, sys.dof))
    gam = np.zeros(m)
    row = 0
    for jt in sys.joints:
        p, Ji, Jj, g = _joint_terms(jt, snap)
        k = p.size
        phi[row:row + k] = p
        gam[row:row + k] = g
        if jt.body_i != GROUND:
            Jq[row:row + k, 6 * jt.body_i:6 * jt.body_i + 6] += Ji
        if jt.body_j != GROUND:
            Jq[row:row + k, 6 * jt.body_j:6 * jt.body_j + 6] += Jj
        row += k
    return phi, Jq, gam


def constraint_eval(sys: MultibodySystem) -> np.ndarray:
    return _constraints(sys, sys.snapshot())[0]


def constraint_jacobian(sys: MultibodySystem) -> np.ndarray:
    """Phi_q with respect to the velocity coordinates [v_b, w_b] of every body."""
    return _constraints(sys, sys.snapshot())[1]


def gamma_rhs(sys: MultibodySystem) -> np.ndarray:
    """gamma such that Phi_q qdd = gamma (quadratic velocity terms, sign flipped)."""
    return _constraints(sys, sys.snapshot())[2]


def constraint_velocity(sys: MultibodySystem) -> np.ndarray:
    return constraint_jacobian(sys) @ sys.qdot()


def rank_diagnostic(Jq, rel_tol: float = 1e-8) -> list[int]:
    """Indices of rows that are linearly dependent on earlier rows (empty if full rank)."""
    if Jq.size == 0:
        return []
    s = np.linalg.svd(Jq, compute_uv=False)
    rank = int(np.sum(s > rel_tol * s[0])) if s[0] > 0 else 0
    if rank == Jq.shape[0]:
        return []
    _, _, piv = qr(Jq.T, pivoting=True, mode="economic")
    return sorted(int(i) for i in piv[rank:])


def perturb(sys: MultibodySystem, dq) -> None:
    """Displace positions by a velocity-coordinate increment dq (rotation vectors for w slots)."""
    dq = np.asarray(dq, dtype=float).reshape(-1, 6)
    for body, d in zip(sys.bodies, dq):
        body.r = body.r + d[:3]
        angle = np.linalg.norm(d[3:])
        if angle > 0:
            body.p = quat_multiply(axis_angle_quat(d[3:], angle), body.p)


# ---------------------------------------------------------------------------
# joint coordinates


def _joint_angle(jt: Joint, snap: _Snapshot) -> float:
    _, Ai, _, _ = snap.frame(jt.body_i)
    _, Aj, _, _ = snap.frame(jt.body_j)
    u = Ai @ jt.axis_i
    a = Ai @ jt.perp_i[0]
    b = Aj @ jt.ref_j
    return float(np.arctan2(_cx(a, b) @ u, a @ b))


def joint_angles(sys: MultibodySystem) -> np.ndarray:
    """Rotation of body j relative to body i about the joint axis, zero at assembly."""
    snap = sys.snapshot()
    return np.array([_joint_angle(jt, snap) for jt in sys.joints])


def joint_lengths(sys: MultibodySystem) -> np.ndarray:
    """Anchor separation measured along the joint axis (cylindrical slide coordinate)."""
    snap = sys.snapshot()
    out = np.zeros(sys.n_joints)
    for k, jt in enumerate(sys.joints):
        ri, Ai, _, _ = snap.frame(jt.body_i)
        rj, Aj, _, _ = snap.frame(jt.body_j)
        out[k] = (rj + Aj @ jt.anchor_j - ri - Ai @ jt.anchor_i) @ (Ai @ jt.axis_i)
    return out


# ---------------------------------------------------------------------------
# generalized forces, 6 entries per body: [force, moment] in the global frame


def mass_matrix(sys: MultibodySystem, snap: _Snapshot | None = None) -> np.ndarray:
    snap = snap or sys.snapshot()
    M = np.zeros((sys.dof, sys.dof))
    for k, body in enumerate(sys.bodies):
        A = snap.A[k]
        M[6 * k:6 * k + 3, 6 * k:6 * k + 3] = body.mass * _I3
        M[6 * k + 3:6 * k + 6, 6 * k + 3:6 * k + 6] = A @ body.inertia @ A.T
    return M


def _propensity(sys, snap, nu):
    g = np.zeros(sys.dof)
    for k, body in enumerate(sys.bodies):
        Jg = snap.A[k] @ body.inertia @ snap.A[k].T
        w = snap.w[k]
        g[6 * k + 3:6 * k + 6] = -_cx(w, Jg @ w)
    if nu is None:
        return g
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (sys.n_joints,):
        raise ValueError(f"expected {sys.n_joints} joint gradients, got shape {nu.shape}")
    for jt, n in zip(sys.joints, nu):
        if n == 0:
            continue
        _, Ai, _, _ = snap.frame(jt.body_i)
        l = Ai @ jt.axis_i
        if jt.body_i != GROUND:
            g[6 * jt.body_i + 3:6 * jt.body_i + 6] += n * l
        if jt.body_j != GROUND:
            g[6 * jt.body_j + 3:6 * jt.body_j + 6] -= n * l
    return g


def propensity_moments(sys: MultibodySystem, grad_E=None) -> np.ndarray:
    """g^(p): pure joint-axis moments -dE/dtheta on body j (and the reaction on i), plus -w x J w."""
    return _propensity(sys, sys.snapshot(), grad_E)


def _springs(sys, snap):
    g = np.zeros(sys.dof)
    energy = 0.0
    for k, jt in enumerate(sys.joints):
        if not jt.has_spring:
            continue
        ri, Ai, _, _ = snap.frame(jt.body_i)
        rj, Aj, _, _ = snap.frame(jt.body_j)
        si = Ai @ jt.anchor_i
        sj = Aj @ jt.anchor_j
        d = rj + sj - ri - si
        length = np.linalg.norm(d)
        if length < 1e-12:
            raise ConfigurationError(f"joint {k}: spring anchors coincide, force direction undefined")
        stretch = length - jt.rest_length
        energy += 0.5 * jt.stiffness * stretch ** 2
        f = jt.stiffness * stretch * d / length  # pulls i toward j when stretched
        if jt.body_i != GROUND:
            g[6 * jt.body_i:6 * jt.body_i + 3] += f
            g[6 * jt.body_i + 3:6 * jt.body_i + 6] += _cx(si, f)
        if jt.body_j != GROUND:
            g[6 * jt.body_j:6 * jt.body_j + 3] -= f
            g[6 * jt.body_j + 3:6 * jt.body_j + 6] -= _cx(sj, f)
    return g, energy


def joint_spring_forces(sys: MultibodySystem) -> np.ndarray:
    return _springs(sys, sys.snapshot())[0]


def spring_energy(sys: MultibodySystem) -> float:
    return _springs(sys, sys.snapshot())[1]


def langevin_force(sys: MultibodySystem, dt: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Discrete white noise sqrt(2 rho / beta / dt) * N(0, 1) on every DOF."""
    rng = sys.rng if rng is None else rng
    if sys.langevin is None or sys.langevin.rho == 0:
        return np.zeros(sys.dof)
    scale = np.sqrt(2 * sys.langevin.rho / sys.langevin.beta_thermo / dt)
    return scale * rng.standard_normal(sys.dof)


def _external(sys):
    g = np.zeros(sys.dof)
    for k, body in enumerate(sys.bodies):
        g[6 * k:6 * k + 3] = body.force
    return g


# ---------------------------------------------------------------------------
# accelerations


@dataclass
class AssembledSaddleSystem:
    M: np.ndarray
    Phi_q: np.ndarray
    rhs_top: np.ndarray
    rhs_bottom: np.ndarray
    phi: np.ndarray | None = None
    phi_dot: np.ndarray | None = None
    lam: np.ndarray | None = None
    residual: float | None = None

    def __post_init__(self):
        n = self.M.shape[0]
        if self.M.shape != (n, n) or self.rhs_top.shape != (n,):
            raise ValueError("mass matrix and force vector sizes disagree")
        if self.Phi_q.shape != (self.rhs_bottom.size, n):
            raise ValueError(f"Phi_q shape {self.Phi_q.shape} inconsistent with {self.rhs_bottom.size} constraints")

    def matrix(self) -> np.ndarray:
        m = self.Phi_q.shape[0]
        return np.block([[self.M, self.Phi_q.T], [self.Phi_q, np.zeros((m, m))]])


@dataclass
class Baumgarte:
    alpha: float = 5.0
    beta: float = 5.0


@dataclass
class AugmentedLagrangian:
    alpha: float = 1e7
    beta: float = 1.0
    omega: float = 10.0
    epsilon: float = 1e-9
    max_inner: int = 100


def _applied(sys, snap, nu, W):
    if nu is None and sys.propensity_hook is not None:
        angles = np.array([_joint_angle(jt, snap) for jt in sys.joints])
        _, nu = sys.propensity_hook(angles)
    g = _propensity(sys, snap, nu) + _springs(sys, snap)[0] + _external(sys)
    qd = np.concatenate([snap.v, snap.w], axis=1).ravel()
    if sys.langevin is not None and sys.langevin.rho > 0:
        g -= sys.langevin.rho * qd
    if W is not None:
        g += W
    return g, qd


def assemble(sys: MultibodySystem, *, nu=None, W=None, snap: _Snapshot | None = None) -> AssembledSaddleSystem:
    snap = snap or sys.snapshot()
    phi, Jq, gam = _constraints(sys, snap)
    g, qd = _applied(sys, snap, nu, W)
    return AssembledSaddleSystem(mass_matrix(sys, snap), Jq, g, gam, phi=phi, phi_dot=Jq @ qd)


def solve_accelerations(asm: AssembledSaddleSystem, solver: str = "lu", stabilizer: Baumgarte | None = None):
    """Solve the saddle system for (qdd, lam); ``stabilizer`` swaps gamma for its Baumgarte form."""
    gam = asm.rhs_bottom
    if stabilizer is not None and gam.size:
        gam = gam - 2 * stabilizer.alpha * asm.phi_dot - stabilizer.beta ** 2 * asm.phi
    K = asm.matrix()
    rhs = np.concatenate([asm.rhs_top, gam])
    n = asm.M.shape[0]
    if solver == "lu":
        lu, piv = lu_factor(K, check_finite=False)
        d = np.abs(np.diag(lu))
        if d.size and (not np.all(np.isfinite(d)) or d.min() <= 1e-13 * d.max()):
            raise SingularSystemError("saddle matrix is singular; use the pinv solver")
        x = lu_solve((lu, piv), rhs, check_finite=False)
    elif solver in ("pinv", "pseudoinverse"):
        x = np.linalg.lstsq(K, rhs, rcond=None)[0]
    else:
        raise ValueError(f"unknown solver {solver!r}")
    asm.lam = x[n:]
    asm.residual = float(np.linalg.norm(K @ x - rhs) / max(np.linalg.norm(rhs), 1e-300))
    return x[:n], x[n:]


def augmented_lagrangian_accels(asm: AssembledSaddleSystem, cfg: AugmentedLagrangian | None = None):
    """Penalty iteration (M + a Pq^T Pq) qdd_{i+1} = M qdd_i + a Pq^T (gamma - 2 w b Phidot - w^2 Phi).

    Starts from M qdd_0 = g.  Returns (qdd, inner_iterations).
    """
    cfg = cfg or AugmentedLagrangian()
    if not cfg.alpha > 0:
        raise ValueError("penalty alpha must be positive")
    M, Pq = asm.M, asm.Phi_q
    qdd = np.linalg.solve(M, asm.rhs_top)
    if Pq.shape[0] == 0:
        return qdd, 1
    target = asm.rhs_bottom - 2 * cfg.omega * cfg.beta * asm.phi_dot - cfg.omega ** 2 * asm.phi
    Mbar = lu_factor(M + cfg.alpha * Pq.T @ Pq, check_finite=False)
    delta = np.inf
    for it in range(1, cfg.max_inner + 1):
        # same iteration written as an increment; avoids cancelling large terms
        step = lu_solve(Mbar, cfg.alpha * Pq.T @ (target - Pq @ qdd), check_finite=False)
        qdd = qdd + step
        delta = np.linalg.norm(step)
        if delta < cfg.epsilon:
            return qdd, it
    raise ConvergenceError(f"augmented Lagrangian did not converge in {cfg.max_inner} iterations "
                           f"(last update {delta:.3g})", residual=delta, iterations=cfg.max_inner)


# ---------------------------------------------------------------------------
# direct integration


@dataclass
class DIAOptions:
    stabilizer: str = "baumgarte"  # none | baumgarte | auglag
    solver: str = "lu"
    baumgarte: Baumgarte = field(default_factory=Baumgarte)
    auglag: AugmentedLagrangian = field(default_factory=AugmentedLagrangian)
    rtol: float = 1e-6
    atol: float = 1e-6
    violation_ceiling: float = 1e-2

    def __post_init__(self):
        if self.stabilizer not in ("none", "baumgarte", "auglag"):
            raise ValueError(f"unknown stabilizer {self.stabilizer!r}")
        if self.solver not in ("lu", "pinv"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if not (self.rtol > 0 and self.atol > 0 and self.violation_ceiling > 0):
            raise ValueError("tolerances must be positive")


def accelerations(sys: MultibodySystem, options: DIAOptions, *, nu=None, W=None, snap=None):
    asm = assemble(sys, nu=nu, W=W, snap=snap)
    if options.stabilizer == "auglag":
        qdd, inner = augmented_lagrangian_accels(asm, options.auglag)
        return qdd, inner
    stab = options.baumgarte if options.stabilizer == "baumgarte" else None
    qdd, _ = solve_accelerations(asm, options.solver, stab)
    return qdd, 0


def dia_step(sys: MultibodySystem, dt: float, options: DIAOptions | None = None, *, nu=None):
    """Advance the system by dt with an adaptive embedded RK 2(3) integration.

    ``nu`` optionally fixes the per-joint energy gradient for the whole step
    (otherwise the propensity hook is evaluated at every stage).  Langevin
    noise is drawn once per step.  Mutates and returns ``sys``.
    """
    options = options or DIAOptions()
    if not dt > 0:
        raise ValueError("dt must be positive")
    nb = sys.n_bodies
    W = langevin_force(sys, dt) if sys.langevin is not None else None
    inner_max = 0

    def rhs(_t, y):
        nonlocal inner_max
        r, p, v, w = _split_state(y, nb)
        snap = _Snapshot(r, p, v, w)
        qdd, inner = accelerations(sys, options, nu=nu, W=W, snap=snap)
        inner_max = max(inner_max, inner)
        qdd = qdd.reshape(nb, 6)
        return np.concatenate([v.ravel(), _pdot(snap.p, w).ravel(), qdd[:, :3].ravel(), qdd[:, 3:].ravel()])

    y0 = sys.state_vector()
    sol = solve_ivp(rhs, (0.0, dt), y0, method="RK23", rtol=options.rtol, atol=options.atol)
    y1 = sol.y[:, -1]
    if not sol.success or not np.all(np.isfinite(y1)):
        raise NonFiniteError(f"integration failed at t={sys.t:.6g}: {sol.message}")
    sys.set_state_vector(y1)
    sys.t += dt
    viol = float(np.max(np.abs(constraint_eval(sys)))) if sys.joints else 0.0
    sys.diagnostics = {"rhs_evals": int(sol.nfev), "inner_iterations": inner_max, "violation": viol}
    if viol > options.violation_ceiling:
        raise ConstraintViolationError(f"constraint violation {viol:.3g} exceeds {options.violation_ceiling:g}"
                                       f" at t={sys.t:.6g}", violation=viol, time=sys.t)
    return sys


def kinetic_energy(sys: MultibodySystem) -> float:
    e = 0.0
    for b in sys.bodies:
        A = b.A
        e += 0.5 * b.mass * b.v @ b.v + 0.5 * b.w @ (A @ b.inertia @ A.T) @ b.w
    return float(e)


def system_energy(sys: MultibodySystem) -> float:
    """Kinetic + spring + propensity energy (constant external forces excluded)."""
    e = kinetic_energy(sys) + spring_energy(sys)
    if sys.propensity_hook is not None:
        e += float(sys.propensity_hook(joint_angles(sys))[0])
    return e


@dataclass
class TrajectoryRow:
    t: float
    angles: np.ndarray
    lengths: np.ndarray
    energy: float
    phi_inf: float
    phidot_inf: float


def sample_row(sys: MultibodySystem) -> TrajectoryRow:
    snap = sys.snapshot()
    phi, Jq, _ = _constraints(sys, snap)
    qd = sys.qdot()
    cyl = [k for k, jt in enumerate(sys.joints) if jt.kind == "cylindrical"]
    lengths = joint_lengths(sys)[cyl] if cyl else np.zeros(0)
    return TrajectoryRow(sys.t, joint_angles(sys), lengths, system_energy(sys),
                         float(np.max(np.abs(phi))) if phi.size else 0.0,
                         float(np.max(np.abs(Jq @ qd))) if phi.size else 0.0)


def run_dynamics(sys: MultibodySystem, T: float, dt: float, options: DIAOptions | None = None,
                 on_step: Callable | None = None):
    """Integrate to time T; returns (rows, summary) with row 0 the initial state."""
    options = options or DIAOptions()
    steps = int(round(T / dt))
    rows = [sample_row(sys)]
    inner = []
    for _ in range(steps):
        try:
            dia_step(sys, dt, options)
        except (ConstraintViolationError, NonFiniteError, ConvergenceError, SingularSystemError) as exc:
            exc.rows = rows  # partial trajectory for the caller
            raise
        inner.append(sys.diagnostics["inner_iterations"])
        rows.append(sample_row(sys))
        if on_step is not None:
            on_step(sys)
    summary = {"steps": steps, "max_phi_inf": max(r.phi_inf for r in rows),
               "max_phidot_inf": max(r.phidot_inf for r in rows)}
    if options.stabilizer == "auglag":
        summary["inner_iterations"] = inner
    return rows, summary


def write_trajectory_csv(rows, sys: MultibodySystem, filename):
    cyl = [k for k, jt in enumerate(sys.joints) if jt.kind == "cylindrical"]
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"angle_{k + 1}_rad" for k in range(sys.n_joints)]
                   + [f"length_{k + 1}" for k in cyl] + ["energy", "phi_inf", "phidot_inf"])
        for row in rows:
            w.writerow([repr(float(row.t))] + [repr(float(a)) for a in row.angles]
                       + [repr(float(x)) for x in row.lengths]
                       + [repr(float(row.energy)), repr(row.phi_inf), repr(row.phidot_inf)])
    return Path(filename)


# ---------------------------------------------------------------------------
# system description files (JSON)


class JointAngleLandscape:
    """Adapts an angle-space landscape to a system's joint angles.

    ``joints[k]`` is the system joint feeding landscape coordinate k, and
    ``offsets[k]`` converts the joint angle into that coordinate.
    """

    def __init__(self, landscape, n_joints: int, joints=None, offsets=None):
        self.landscape = landscape
        self.n_joints = n_joints
        self.joints = np.arange(landscape.dim) if joints is None else np.asarray(joints, dtype=int)
        self.offsets = np.zeros(self.joints.size) if offsets is None else np.asarray(offsets, dtype=float)
        if self.joints.size != landscape.dim or self.offsets.size != landscape.dim:
            raise ConfigurationError(f"view mapping needs {landscape.dim} joints and offsets")
        if np.any(self.joints < 0) or np.any(self.joints >= n_joints):
            raise ConfigurationError("view mapping references a joint outside the system")

    def __call__(self, angles):
        e, g = self.landscape.energy_gradient(np.asarray(angles)[self.joints] + self.offsets)
        out = np.zeros(self.n_joints)
        np.add.at(out, self.joints, g)
        return e, out


def _vec(entry, key, n, default=None, where=""):
    if key not in entry:
        if default is None:
            raise InputError(f"{where}missing field {key!r}")
        return np.array(default, dtype=float)
    arr = np.array(entry[key], dtype=float)
    if arr.shape != (n,):
        raise InputError(f"{where}{key} must have {n} entries")
    return arr


def system_from_dict(data: dict, base_dir: Path | None = None) -> MultibodySystem:
    from .landscape import ChainLandscape, PropensityLibrary

    try:
        bodies = []
        for k, b in enumerate(data["bodies"]):
            where = f"body {k}: "
            bodies.append(RigidBody(
                mass=float(b.get("mass", 1.0)), inertia=np.array(b.get("inertia", [1, 1, 1]), dtype=float),
                r=_vec(b, "r", 3, [0, 0, 0], where), p=_vec(b, "p", 4, [1, 0, 0, 0], where),
                v=_vec(b, "v", 3, [0, 0, 0], where), w=_vec(b, "w", 3, [0, 0, 0], where),
                force=_vec(b, "force", 3, [0, 0, 0], where),
                points={n: np.array(x, dtype=float) for n, x in b.get("points", {}).items()},
                name=str(b.get("name", f"b{k}"))))
        joints = []
        for k, j in enumerate(data.get("joints", [])):
            where = f"joint {k}: "
            spring = j.get("spring")
            joints.append(Joint(
                kind=j["kind"], body_i=int(j["body_i"]), body_j=int(j["body_j"]),
                axis_i=_vec(j, "axis_i", 3, where=where), axis_j=_vec(j, "axis_j", 3, where=where),
                anchor_i=_vec(j, "anchor_i", 3, [0, 0, 0], where), anchor_j=_vec(j, "anchor_j", 3, [0, 0, 0], where),
                stiffness=None if spring is None else float(spring["k"]),
                rest_length=None if spring is None else float(spring["rest_length"]),
                redundant=bool(j.get("redundant", False)), name=str(j.get("name", f"j{k}"))))
        lang = data.get("langevin")
        langevin = None if lang is None else LangevinConfig(float(lang["rho"]), float(lang["beta_thermo"]),
                                                              int(lang["seed"]))
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed system description: {exc}") from exc
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not bodies:
        raise InputError("system description has no bodies")
    hook = None
    prop = data.get("propensity")
    if prop is not None:
        lib_path = Path(prop["library"])
        if base_dir is not None and not lib_path.is_absolute():
            lib_path = base_dir / lib_path
        seq = prop["sequence"]
        seq = seq.split("-") if isinstance(seq, str) else list(seq)
        land = ChainLandscape(PropensityLibrary.load(lib_path), seq)
        hook = JointAngleLandscape(land, len(joints), prop.get("joints"), prop.get("offsets"))
    return MultibodySystem(bodies, joints, propensity_hook=hook, langevin=langevin)


def load_system(path) -> MultibodySystem:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})", line=exc.lineno) from exc
    return system_from_dict(data, base_dir=path.parent)


def _inertia_out(J):
    return np.diag(J).tolist() if np.count_nonzero(J - np.diag(np.diag(J))) == 0 else J.tolist()


def system_to_dict(sys: MultibodySystem) -> dict:
    bodies = [{"name": b.name, "mass": b.mass, "inertia": _inertia_out(b.inertia), "r": b.r.tolist(),
               "p": b.p.tolist(), "v": b.v.tolist(), "w": b.w.tolist(), "force": b.force.tolist(),
               "points": {k: v.tolist() for k, v in b.points.items()}} for b in sys.bodies]
    joints = []
    for j in sys.joints:
        d = {"name": j.name, "kind": j.kind, "body_i": j.body_i, "body_j": j.body_j, "axis_i": j.axis_i.tolist(),
             "axis_j": j.axis_j.tolist(), "anchor_i": j.anchor_i.tolist(), "anchor_j": j.anchor_j.tolist()}
        if j.has_spring:
            d["spring"] = {"k": j.stiffness, "rest_length": j.rest_length}
        if j.redundant:
            d["redundant"] = True
        joints.append(d)
    out = {"format_version": 1, "bodies": bodies, "joints": joints}
    if sys.langevin is not None:
        out["langevin"] = {"rho": sys.langevin.rho, "beta_thermo": sys.langevin.beta_thermo,
                           "seed": sys.langevin.seed}
    return out


def save_system(sys: MultibodySystem, path):
    Path(path).write_text(json.dumps(system_to_dict(sys), indent=2))
    return Path(path)
