"""Small synthetic landscapes and libraries used by tests, scripts and demos."""

from __future__ import annotations

import numpy as np

from .landscape import (PAIR_AXES, AngleSampleSet, PropensityLibrary, UniformDensity, View, VonMisesKDE,
                        bake_grid)

# two von Mises wells: the minima the string and band experiments connect
TWO_WELL_CENTRES = ((-1.2, -0.8), (1.0, 1.1))
TWO_WELL_KAPPA = 3.0


def two_well_samples(kind: str = "GLY") -> AngleSampleSet:
    (a0, b0), (a1, b1) = TWO_WELL_CENTRES
    return AngleSampleSet(kind, [a0, a1], [b0, b1])


def single_well_samples(kind: str = "ALA", centre=(0.5, -0.5)) -> AngleSampleSet:
    return AngleSampleSet(kind, [centre[0]], [centre[1]])


def kde_view(samples: AngleSampleSet, kappa: float, bins: int = 180, kT: float = 1.0) -> View:
    return View(*bake_grid(VonMisesKDE(samples, kappa), bins, kT))


def flat_view(bins: int = 180, kT: float = 1.0) -> View:
    return View(*bake_grid(UniformDensity(), bins, kT))


def separable_library(sequence=("GLY", "ALA"), bins: int = 180, kT: float = 1.0) -> PropensityLibrary:
    """First residue a two-well map, the rest single wells; flat pair views."""
    singles = {}
    for i, kind in enumerate(sequence):
        if kind in singles:
            continue
        samples = two_well_samples(kind) if i == 0 else single_well_samples(kind)
        singles[kind] = kde_view(samples, TWO_WELL_KAPPA if i == 0 else 2.0, bins, kT)
    flat = flat_view(bins, kT)
    pairs = {(a, b, axis): flat for a, b in zip(sequence, sequence[1:]) for axis in PAIR_AXES}
    return PropensityLibrary(singles, pairs, kT=kT, kappa=TWO_WELL_KAPPA)


def separable_endpoints(n: int):
    """Band endpoints: residue 1 moves between its wells, the others sit at their minimum."""
    (a0, b0), (a1, b1) = TWO_WELL_CENTRES
    rest = np.tile([0.5, -0.5], n - 1)
    return np.concatenate([[a0, b0], rest]), np.concatenate([[a1, b1], rest])


def ring_landscape(a: float = 20.0, b: float = 1.0, tilt: float = 0.5):
    """E = a (r - 1)^2 + b sin^2(t) (1 - tilt sin t) on the plane, t the polar angle.

    The angular term does not depend on r, so minimum energy paths between
    (1, 0) and (-1, 0) follow the unit circle; tilt > 0 makes the upper arc
    the lower-barrier one.
    """
    from .landscape import AnalyticLandscape

    def energy(x):
        r = np.hypot(x[0], x[1])
        s = x[1] / r if r > 0 else 0.0
        return a * (r - 1) ** 2 + b * s * s * (1 - tilt * s)

    def grad(x):
        r = np.hypot(x[0], x[1])
        th = np.arctan2(x[1], x[0])
        s, c = np.sin(th), np.cos(th)
        dr = 2 * a * (r - 1)
        dth = b * (2 * s * c * (1 - tilt * s) - tilt * s * s * c)
        return dr * np.array([c, s]) + dth / r * np.array([-s, c])

    return AnalyticLandscape(energy, grad, 2, periodic=False)


def pendulum_chain(kind: str = "revolute", n: int = 3, *, tilt: bool = True, stiffness: float = 10.0):
    """n unit rods hanging off the ground along +x under a constant -y force.

    Joint axes are tilted out of the z axis so the motion is fully 3D.
    Cylindrical joints get a spring of the given stiffness with zero rest length.
    """
    from .multibody import GROUND, Joint, MultibodySystem, RigidBody

    axis = [0.0, 0.3, 1.0] if tilt else [0.0, 0.0, 1.0]
    spring = dict(stiffness=stiffness, rest_length=0.0) if kind == "cylindrical" else {}
    bodies, joints = [], []
    for k in range(n):
        bodies.append(RigidBody(mass=1.0, inertia=[0.1, 0.2, 0.3], r=[k + 0.5, 0.0, 0.0], force=[0.0, -1.0, 0.0]))
        joints.append(Joint(kind, k - 1 if k else GROUND, k, axis, axis,
                            anchor_i=[0.5, 0.0, 0.0] if k else [0.0, 0.0, 0.0], anchor_j=[-0.5, 0.0, 0.0], **spring))
    return MultibodySystem(bodies, joints)
