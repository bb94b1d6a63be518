"""Periodic propensity landscapes on dihedral angles.

Von Mises kernel density estimates of (phi, psi) samples are converted to
energies by Boltzmann inversion and baked onto periodic grids, together with
central-difference gradients.  Grids are looked up by periodic bilinear
interpolation.  All angles are radians wrapped to (-pi, pi].
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import i0e

from .errors import ConfigurationError, DomainError, InputError

TWO_PI = 2.0 * np.pi
PAIR_AXES = ("phi_psi_next", "psi_phi_next", "phi_phi_next")
DENSITY_FLOOR = 1e-12
DEFAULT_KAPPA = 50.0
FORMAT_VERSION = 1


def wrap_angle(x):
    """Wrap angles to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    return np.pi - np.mod(np.pi - x, TWO_PI)


def angle_diff(a, b):
    """Shortest signed angular difference a - b, in (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


# ---------------------------------------------------------------------------
# samples and kernel density


@dataclass(frozen=True)
class AngleSampleSet:
    residue_kind: str
    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        psi = np.atleast_1d(np.asarray(self.psi, dtype=float))
        if phi.shape != psi.shape or phi.ndim != 1:
            raise ValueError("phi and psi must be 1-d arrays of equal length")
        if phi.size < 1:
            raise ValueError(f"sample set {self.residue_kind!r} is empty")
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(psi))):
            raise ValueError(f"sample set {self.residue_kind!r} has non-finite angles")
        object.__setattr__(self, "phi", wrap_angle(phi))
        object.__setattr__(self, "psi", wrap_angle(psi))

    @property
    def count(self) -> int:
        return int(self.phi.size)

    @classmethod
    def from_degrees(cls, kind, phi_deg, psi_deg):
        return cls(kind, np.radians(phi_deg), np.radians(psi_deg))


@dataclass(frozen=True)
class VonMisesKDE:
    """Product von Mises kernel density on the torus.

    P(phi, psi) = 1/(4 pi^2 N I0(k)^2) * sum_i exp(k cos(phi-phi_i) + k cos(psi-psi_i))
    """

    samples: AngleSampleSet
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        if not self.kappa > 0:
            raise DomainError(f"kappa must be positive, got {self.kappa}")

    @property
    def normalizer(self) -> float:
        # I0 via the exponentially scaled Bessel function; the exp(2k) factor is
        # folded into the kernel so large kappa does not overflow.
        return 1.0 / (4.0 * np.pi**2 * self.samples.count * i0e(self.kappa) ** 2)

    def _kernels(self, phi, psi):
        k = self.kappa
        dphi = np.subtract.outer(np.asarray(phi, float), self.samples.phi)
        dpsi = np.subtract.outer(np.asarray(psi, float), self.samples.psi)
        kern = np.exp(k * (np.cos(dphi) - 1.0) + k * (np.cos(dpsi) - 1.0))
        return dphi, dpsi, kern

    def density(self, phi, psi):
        _, _, kern = self._kernels(phi, psi)
        return self.normalizer * kern.sum(axis=-1)

    def gradient(self, phi, psi):
        dphi, dpsi, kern = self._kernels(phi, psi)
        c = -self.kappa * self.normalizer
        return c * (np.sin(dphi) * kern).sum(axis=-1), c * (np.sin(dpsi) * kern).sum(axis=-1)

    def density_on_grid(self, nodes):
        """Density on the tensor grid nodes x nodes (separable evaluation)."""
        k = self.kappa
        kphi = np.exp(k * (np.cos(np.subtract.outer(nodes, self.samples.phi)) - 1.0))
        kpsi = np.exp(k * (np.cos(np.subtract.outer(nodes, self.samples.psi)) - 1.0))
        return self.normalizer * (kphi @ kpsi.T)


def kde_density(kde: VonMisesKDE, phi, psi):
    return kde.density(phi, psi)


def kde_gradient(kde: VonMisesKDE, phi, psi):
    return kde.gradient(phi, psi)


def boltzmann_energy(P, kT):
    """-kT log P.  Raises DomainError for non-positive probabilities."""
    P = np.asarray(P, dtype=float)
    if not kT > 0:
        raise DomainError(f"kT must be positive, got {kT}")
    if np.any(~(P > 0)):
        bad = P[~(P > 0)].ravel()[0]
        raise DomainError(f"Boltzmann inversion needs P > 0, got P = {bad!r}")
    out = -kT * np.log(P)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class AngleGrid:
    """Periodic bins x bins grid.  Axis 0 is the first angle, axis 1 the second.

    Node (i, j) sits at (-pi + i*h, -pi + j*h) with h = 2 pi / bins.
    """

    values: np.ndarray
    grad_0: np.ndarray
    grad_1: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"grid must be square, got shape {v.shape}")
        for name in ("grad_0", "grad_1"):
            if np.shape(getattr(self, name)) != v.shape:
                raise ValueError(f"{name} shape does not match values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "grad_0", np.asarray(self.grad_0, dtype=float))
        object.__setattr__(self, "grad_1", np.asarray(self.grad_1, dtype=float))

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return TWO_PI / self.bins

    @property
    def nodes(self) -> np.ndarray:
        return -np.pi + self.spacing * np.arange(self.bins)

    @classmethod
    def from_values(cls, values):
        """Grid whose gradients are periodic central differences of values."""
        values = np.asarray(values, dtype=float)
        g0, g1 = periodic_central_difference(values, TWO_PI / values.shape[0])
        return cls(values, g0, g1)

    def _weights(self, a, b):
        h = self.spacing
        # Offsets from the -pi origin, reduced mod 2pi so a and a + 2pi agree exactly.
        u = np.mod(np.asarray(a, float) + np.pi, TWO_PI) / h
        v = np.mod(np.asarray(b, float) + np.pi, TWO_PI) / h
        i0 = np.floor(u).astype(int)
        j0 = np.floor(v).astype(int)
        tu = u - i0
        tv = v - j0
        n = self.bins
        i0 %= n
        j0 %= n
        return i0, (i0 + 1) % n, j0, (j0 + 1) % n, tu, tv

    def _interp(self, arr, w):
        i0, i1, j0, j1, tu, tv = w
        return ((1 - tu) * (1 - tv) * arr[i0, j0] + tu * (1 - tv) * arr[i1, j0]
                + (1 - tu) * tv * arr[i0, j1] + tu * tv * arr[i1, j1])

    def lookup(self, a, b):
        w = self._weights(a, b)
        return self._interp(self.values, w), (self._interp(self.grad_0, w), self._interp(self.grad_1, w))

    def value(self, a, b):
        return self._interp(self.values, self._weights(a, b))


def periodic_central_difference(values, h):
    values = np.asarray(values, dtype=float)
    g0 = (np.roll(values, -1, axis=0) - np.roll(values, 1, axis=0)) / (2 * h)
    g1 = (np.roll(values, -1, axis=1) - np.roll(values, 1, axis=1)) / (2 * h)
    return g0, g1


def grid_lookup(grid: AngleGrid, query):
    a, b = query
    return grid.lookup(a, b)


def bins_for_resolution(degrees: float) -> int:
    bins = 360.0 / degrees
    if abs(bins - round(bins)) > 1e-9:
        raise ValueError(f"{degrees} degrees does not divide the circle")
    return int(round(bins))


def bake_grid(density_source, bins: int, kT: float, floor: float | None = DENSITY_FLOOR):
    """Bake a density source onto a periodic grid.

    Returns (energy_grid, density_grid).  ``density_source`` needs a
    ``density(phi, psi)`` method (vectorized); a VonMisesKDE is evaluated
    separably.  With ``floor=None`` the density is used as is.
    """
    if int(bins) != bins or bins < 8:
        raise DomainError(f"bins must be an integer >= 8, got {bins}")
    if not kT > 0:
        raise DomainError(f"kT must be positive, got {kT}")
    bins = int(bins)
    nodes = -np.pi + (TWO_PI / bins) * np.arange(bins)
    if isinstance(density_source, VonMisesKDE):
        dens = density_source.density_on_grid(nodes)
    else:
        A, B = np.meshgrid(nodes, nodes, indexing="ij")
        dens = np.asarray(density_source.density(A, B), dtype=float)
    clipped = dens if floor is None else np.maximum(dens, floor)
    energy = boltzmann_energy(clipped, kT)
    return AngleGrid.from_values(energy), AngleGrid.from_values(dens)


@dataclass(frozen=True)
class UniformDensity:
    """Constant density source, mostly for tests and flat landscapes."""

    level: float = 1.0 / (4 * np.pi**2)

    def density(self, phi, psi):
        return np.full(np.broadcast(np.asarray(phi), np.asarray(psi)).shape, self.level)


# ---------------------------------------------------------------------------
# library


@dataclass(frozen=True)
class View:
    energy: AngleGrid
    density: AngleGrid


@dataclass
class PropensityLibrary:
    single_views: dict = field(default_factory=dict)  # kind -> View
    pair_views: dict = field(default_factory=dict)  # (kind_a, kind_b, axis) -> View
    kT: float = 1.0
    kappa: float = DEFAULT_KAPPA

    def __post_init__(self):
        bins = {v.energy.bins for v in self.views()}
        if len(bins) > 1:
            raise ConfigurationError(f"library grids disagree on bins: {sorted(bins)}")
        for key in self.pair_views:
            if len(key) != 3 or key[2] not in PAIR_AXES:
                raise ConfigurationError(f"bad pair view key {key!r}")

    def views(self):
        yield from self.single_views.values()
        yield from self.pair_views.values()

    @property
    def bins(self) -> int | None:
        for v in self.views():
            return v.energy.bins
        return None

    def single(self, kind) -> View:
        try:
            return self.single_views[kind]
        except KeyError:
            raise ConfigurationError(f"library has no single view for ({kind!r}, phi_psi)") from None

    def pair(self, kind_a, kind_b, axis) -> View:
        try:
            return self.pair_views[(kind_a, kind_b, axis)]
        except KeyError:
            raise ConfigurationError(
                f"library has no pair view for ({kind_a!r}-{kind_b!r}, {axis})") from None

    def manifest(self) -> list[str]:
        lines = [f"single {k}" for k in self.single_views]
        lines += [f"pair {a} {b} {ax}" for (a, b, ax) in self.pair_views]
        return lines

    # -- persistence ------------------------------------------------------

    def save(self, path) -> Path:
        """Write ``path`` (.npz, little-endian float64) plus a text manifest."""
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        arrays = {}
        names = []
        for kind, view in self.single_views.items():
            names.append(("single", kind))
            _put_view(arrays, f"single/{kind}", view)
        for (a, b, ax), view in self.pair_views.items():
            names.append(("pair", f"{a}|{b}|{ax}"))
            _put_view(arrays, f"pair/{a}|{b}|{ax}", view)
        header = {
            "format_version": FORMAT_VERSION,
            "bins": self.bins,
            "kappa": float(self.kappa),
            "kT": float(self.kT),
            "grid_count": 4 * len(names),
            "views": names,
        }
        arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        path.with_suffix(".manifest.txt").write_text("\n".join(self.manifest()) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PropensityLibrary":
        with np.load(Path(path)) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            if header.get("format_version") != FORMAT_VERSION:
                raise InputError(f"unsupported library format {header.get('format_version')}")
            singles, pairs = {}, {}
            for kind, name in header["views"]:
                view = _get_view(data, f"{kind}/{name}")
                if kind == "single":
                    singles[name] = view
                else:
                    a, b, ax = name.split("|")
                    pairs[(a, b, ax)] = view
        return cls(singles, pairs, kT=header["kT"], kappa=header["kappa"])


def _put_view(arrays, prefix, view: View):
    arrays[f"{prefix}/density"] = view.density.values.astype("<f8")
    arrays[f"{prefix}/energy"] = view.energy.values.astype("<f8")
    arrays[f"{prefix}/grad_phi"] = view.energy.grad_0.astype("<f8")
    arrays[f"{prefix}/grad_psi"] = view.energy.grad_1.astype("<f8")


def _get_view(data, prefix) -> View:
    energy = AngleGrid(data[f"{prefix}/energy"], data[f"{prefix}/grad_phi"], data[f"{prefix}/grad_psi"])
    return View(energy=energy, density=AngleGrid.from_values(data[f"{prefix}/density"]))


def build_library(singles: Mapping[str, AngleSampleSet], pairs: Mapping | None = None, *,
                  bins: int = 180, kappa: float = DEFAULT_KAPPA, kT: float = 1.0,
                  floor: float | None = DENSITY_FLOOR) -> PropensityLibrary:
    def bake(samples):
        energy, density = bake_grid(VonMisesKDE(samples, kappa), bins, kT, floor)
        return View(energy, density)

    single_views = {kind: bake(s) for kind, s in singles.items()}
    pair_views = {key: bake(s) for key, s in (pairs or {}).items()}
    return PropensityLibrary(single_views, pair_views, kT=kT, kappa=kappa)


def torus_integral(grid_values) -> float:
    """Trapezoidal (= rectangle, periodic) quadrature over [-pi, pi]^2."""
    n = np.shape(grid_values)[0]
    return float(np.sum(grid_values) * (TWO_PI / n) ** 2)


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path, expected):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file", line=1) from None
        if header != list(expected):
            raise InputError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise InputError(f"{path}: expected {len(expected)} fields, got {len(row)}", line=lineno)
            yield lineno, [c.strip() for c in row]


def _angle(text, lineno, path):
    try:
        val = float(text)
    except ValueError:
        raise InputError(f"{path}: not a number: {text!r}", line=lineno) from None
    if not np.isfinite(val):
        raise InputError(f"{path}: non-finite angle {text!r}", line=lineno)
    return val


def read_single_samples(path) -> dict[str, AngleSampleSet]:
    """CSV with header ``kind,phi_deg,psi_deg``."""
    acc: dict[str, list] = {}
    for lineno, (kind, phi, psi) in _read_rows(path, ("kind", "phi_deg", "psi_deg")):
        if not kind:
            raise InputError(f"{path}: empty residue kind", line=lineno)
        acc.setdefault(kind, []).append((_angle(phi, lineno, path), _angle(psi, lineno, path)))
    if not acc:
        raise InputError(f"{path}: no samples")
    return {k: AngleSampleSet.from_degrees(k, *np.array(v).T) for k, v in acc.items()}


def read_pair_samples(path) -> dict[tuple, AngleSampleSet]:
    """CSV with header ``kind_a,kind_b,axis,angle1_deg,angle2_deg``."""
    acc: dict[tuple, list] = {}
    cols = ("kind_a", "kind_b", "axis", "angle1_deg", "angle2_deg")
    for lineno, (a, b, axis, x, y) in _read_rows(path, cols):
        if axis not in PAIR_AXES:
            raise InputError(f"{path}: unknown axis {axis!r}", line=lineno)
        if not a or not b:
            raise InputError(f"{path}: empty residue kind", line=lineno)
        acc.setdefault((a, b, axis), []).append((_angle(x, lineno, path), _angle(y, lineno, path)))
    return {k: AngleSampleSet.from_degrees(f"{k[0]}-{k[1]}:{k[2]}", *np.array(v).T) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# chain potential


def _pair_angles(theta, i, axis):
    phi_i, psi_i = theta[i]
    phi_j, psi_j = theta[i + 1]
    if axis == "phi_psi_next":
        return phi_i, psi_j, (i, 0), (i + 1, 1)
    if axis == "psi_phi_next":
        return psi_i, phi_j, (i, 1), (i + 1, 0)
    return phi_i, phi_j, (i, 0), (i + 1, 0)


def chain_energy_gradient(library: PropensityLibrary, sequence: Sequence[str], theta):
    """Energy and gradient of the dihedral statistical potential of a chain.

    ``theta`` has shape (n, 2) holding (phi_i, psi_i).  Single-residue views
    enter with weight 1, the three adjacent-pair views with weight 1/2.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1, 2)
    n = len(sequence)
    if n < 1 or theta.shape[0] != n:
        raise ValueError(f"need one (phi, psi) pair per residue: {n} residues, {theta.shape[0]} pairs")
    energy = 0.0
    grad = np.zeros_like(theta)
    for i, kind in enumerate(sequence):
        e, (g0, g1) = library.single(kind).energy.lookup(theta[i, 0], theta[i, 1])
        energy += float(e)
        grad[i] += (g0, g1)
    for i in range(n - 1):
        for axis in PAIR_AXES:
            view = library.pair(sequence[i], sequence[i + 1], axis)
            a, b, ia, ib = _pair_angles(theta, i, axis)
            e, (g0, g1) = view.energy.lookup(a, b)
            energy += 0.5 * float(e)
            grad[ia] += 0.5 * g0
            grad[ib] += 0.5 * g1
    return energy, grad


def chain_energy(library: PropensityLibrary, sequence: Sequence[str], theta) -> float:
    return chain_energy_gradient(library, sequence, theta)[0]


# ---------------------------------------------------------------------------
# landscape handles consumed by the path solvers


class Landscape:
    """Energy handle: ``energy_gradient(x) -> (E, dE/dx)`` on a flat vector."""

    dim: int
    periodic: bool = True

    def energy_gradient(self, x):
        raise NotImplementedError

    def energy(self, x) -> float:
        return self.energy_gradient(x)[0]

    def gradient(self, x):
        return self.energy_gradient(x)[1]


class GridLandscape(Landscape):
    """Single 2D view (e.g. one residue's Ramachandran energy)."""

    dim = 2

    def __init__(self, grid: AngleGrid):
        self.grid = grid

    def energy_gradient(self, x):
        e, (g0, g1) = self.grid.lookup(x[0], x[1])
        return float(e), np.array([g0, g1], dtype=float)


class ChainLandscape(Landscape):
    """Chain potential over [phi_1, psi_1, ..., phi_n, psi_n]."""

    def __init__(self, library: PropensityLibrary, sequence: Sequence[str]):
        self.library = library
        self.sequence = list(sequence)
        self.dim = 2 * len(self.sequence)
        for kind in self.sequence:
            library.single(kind)
        for a, b in zip(self.sequence, self.sequence[1:]):
            for axis in PAIR_AXES:
                library.pair(a, b, axis)

    def energy_gradient(self, x):
        e, g = chain_energy_gradient(self.library, self.sequence, np.reshape(x, (-1, 2)))
        return e, g.ravel()


class AnalyticLandscape(Landscape):
    def __init__(self, energy_fn: Callable, grad_fn: Callable, dim: int, periodic: bool = False):
        self._e = energy_fn
        self._g = grad_fn
        self.dim = dim
        self.periodic = periodic

    def energy_gradient(self, x):
        x = np.asarray(x, dtype=float)
        return float(self._e(x)), np.asarray(self._g(x), dtype=float)


class SeparableLandscape(Landscape):
    """Sum of 1D periodic terms; handy for synthetic multi-angle tests."""

    def __init__(self, terms: Sequence[tuple[Callable, Callable]]):
        self.terms = list(terms)
        self.dim = len(self.terms)
        self.periodic = True

    def energy_gradient(self, x):
        x = np.asarray(x, dtype=float)
        e = sum(float(f(v)) for (f, _), v in zip(self.terms, x))
        g = np.array([float(df(v)) for (_, df), v in zip(self.terms, x)])
        return e, g


# ---------------------------------------------------------------------------
# projection views


@dataclass
class ProjectionViewSet:
    """Orthogonal coordinate-pair projections T_i with view functions f_i.

    Each view is ``((a, b), f)`` where ``f(theta)`` returns the two gradient
    components on axes a and b.
    """

    n: int
    views: list = field(default_factory=list)

    def __post_init__(self):
        for (a, b), _ in self.views:
            if not (0 <= a < self.n and 0 <= b < self.n) or a == b:
                raise ConfigurationError(f"view axes ({a}, {b}) invalid for dimension {self.n}")

    @property
    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n)
        for (a, b), _ in self.views:
            d[a] += 1
            d[b] += 1
        return d

    def check_regular(self):
        d = self.diagonal
        missing = np.flatnonzero(d == 0)
        if missing.size:
            raise ConfigurationError(f"view set is not regular: axis {int(missing[0])} is not covered")
        return d


def reconstruct_gradient(views: ProjectionViewSet, theta) -> np.ndarray:
    """M^-1 * sum_i f_i(theta) with M the (diagonal) sum of projections."""
    d = views.check_regular()
    acc = np.zeros(views.n)
    for (a, b), f in views.views:
        ga, gb = f(theta)
        acc[a] += ga
        acc[b] += gb
    return acc / d


def projection_views_of(gradient_fn: Callable, n: int, pairs: Iterable[tuple[int, int]]) -> ProjectionViewSet:
    """Views that are exact coordinate-pair projections of ``gradient_fn``."""
    views = []
    for a, b in pairs:
        views.append(((a, b), lambda th, a=a, b=b: (gradient_fn(th)[a], gradient_fn(th)[b])))
    return ProjectionViewSet(n, views)
