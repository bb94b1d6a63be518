"""Minimum-energy paths by the string method and the nudged elastic band.

Paths live in the joint-angle space of a landscape.  When the landscape is
periodic, node separations use wrapped per-coordinate differences so paths
may cross the +-pi seam without tearing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DegeneratePathError, NonFiniteError
from .landscape import Landscape, angle_diff, wrap_angle

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


@dataclass
class PathState:
    nodes: np.ndarray  # (r, dim)
    endpoints_pinned: bool = True
    periodic: bool = True
    degenerate: tuple = ()

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=float)
        if self.nodes.ndim != 2:
            raise ValueError("nodes must be a (r, dim) array")
        if self.nodes.shape[0] < 3:
            raise ValueError(f"a path needs at least 3 nodes, got {self.nodes.shape[0]}")

    @property
    def r(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    def with_nodes(self, nodes, degenerate=()):
        return replace(self, nodes=nodes, degenerate=tuple(degenerate))

    def diff(self, a, b):
        return angle_diff(a, b) if self.periodic else np.asarray(a) - np.asarray(b)

    def segments(self) -> np.ndarray:
        """Differences node[j+1] - node[j], shape (r-1, dim)."""
        return self.diff(self.nodes[1:], self.nodes[:-1])

    def unwrapped(self) -> np.ndarray:
        if not self.periodic:
            return self.nodes.copy()
        return np.vstack([self.nodes[:1], self.nodes[:1] + np.cumsum(self.segments(), axis=0)])

    def wrap(self, x):
        return wrap_angle(x) if self.periodic else x


@dataclass
class NEBConfig:
    k: float = 1.0
    step_size: float | None = None
    tol: float = 3e-4
    max_iters: int = 100_000

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"spring stiffness k must be positive, got {self.k}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if int(self.max_iters) < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class FinalMetrics:
    energy: np.ndarray
    grad_norm: np.ndarray
    grad_dot_tangent: np.ndarray
    perp_norm: np.ndarray

    @property
    def max_perp(self) -> float:
        return float(np.max(self.perp_norm[1:-1])) if self.perp_norm.size > 2 else 0.0

    @property
    def max_grad(self) -> float:
        return float(np.max(self.grad_norm[1:-1])) if self.grad_norm.size > 2 else 0.0


@dataclass
class SolveReport:
    method: str
    path_energy: list = field(default_factory=list)
    max_grad_norm: list = field(default_factory=list)
    max_perp_force: list = field(default_factory=list)
    max_force: list = field(default_factory=list)
    converged: bool = False
    criterion: float = np.inf
    step_size: float = 0.0
    degenerate_nodes: set = field(default_factory=set)
    final: FinalMetrics | None = None

    @property
    def iterations(self) -> int:
        return len(self.path_energy)

    def record(self, energy, max_grad, max_perp, max_force):
        self.path_energy.append(float(energy))
        self.max_grad_norm.append(float(max_grad))
        self.max_perp_force.append(float(max_perp))
        self.max_force.append(float(max_force))


# ---------------------------------------------------------------------------
# construction


def init_path_convex(A, B, r: int, *, periodic: bool = True, endpoints_pinned: bool = True) -> PathState:
    """Convex-combination initial path with r nodes, node 1 = A and node r = B.

    For periodic spaces each coordinate follows the shorter arc; a separation
    of exactly pi is taken in the positive direction.
    """
    if int(r) != r or r < 3:
        raise ValueError(f"need r >= 3 nodes, got {r}")
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 1:
        raise ValueError("endpoints must be vectors of equal dimension")
    delta = angle_diff(B, A) if periodic else B - A
    if np.all(delta == 0):
        raise DegeneratePathError("endpoints coincide; path would be degenerate")
    t = np.linspace(0.0, 1.0, int(r))[:, None]
    nodes = A + t * delta
    if periodic:
        nodes = wrap_angle(nodes)
        nodes[0] = wrap_angle(A)
        nodes[-1] = wrap_angle(B)
    else:
        nodes[0], nodes[-1] = A, B
    return PathState(nodes, endpoints_pinned=endpoints_pinned, periodic=periodic)


# ---------------------------------------------------------------------------
# evaluation helpers


def evaluate(path: PathState, landscape: Landscape, iteration=None):
    E = np.empty(path.r)
    G = np.empty_like(path.nodes)
    for j, x in enumerate(path.nodes):
        e, g = landscape.energy_gradient(x)
        if not (np.isfinite(e) and np.all(np.isfinite(g))):
            raise NonFiniteError(f"non-finite energy/gradient at node {j} (iteration {iteration})",
                                 iteration=iteration, node=j)
        E[j] = e
        G[j] = g
    return E, G


def central_tangents(path: PathState):
    """Unit tangents from neighbour differences; one-sided at the ends.

    Returns (tangents, degenerate_indices).  Degenerate nodes get a zero tangent.
    """
    seg = path.segments()
    r = path.r
    raw = np.empty_like(path.nodes)
    raw[0] = seg[0]
    raw[-1] = seg[-1]
    raw[1:-1] = seg[1:] + seg[:-1]
    out = np.zeros_like(raw)
    bad = []
    for j in range(r):
        cands = [raw[j]]
        if 0 < j < r - 1:
            cands += [seg[j], seg[j - 1]]
        for c in cands:
            nrm = np.linalg.norm(c)
            if nrm > 0:
                out[j] = c / nrm
                break
        else:
            bad.append(j)
    return out, bad


def _perp(g, t):
    return g - np.sum(g * t, axis=-1, keepdims=True) * t


# ---------------------------------------------------------------------------
# string method


def string_step(path: PathState, landscape: Landscape, dt: float, *, _eval=None) -> PathState:
    """One explicit Euler step of the perpendicular gradient flow.

    Interior nodes move by -dt * (grad E)_perp; unpinned endpoints by -dt * grad E.
    Nodes without a usable tangent stay put and are listed in ``degenerate``.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    E, G = _eval if _eval is not None else evaluate(path, landscape)
    tang, bad = central_tangents(path)
    move = _perp(G, tang)
    if path.endpoints_pinned:
        move[0] = 0.0
        move[-1] = 0.0
    else:
        move[0] = G[0]
        move[-1] = G[-1]
    bad_interior = [j for j in bad if 0 < j < path.r - 1]
    move[bad_interior] = 0.0
    nodes = path.nodes - dt * move
    if path.periodic:
        nodes = wrap_angle(nodes)
    if path.endpoints_pinned:
        nodes[0] = path.nodes[0]
        nodes[-1] = path.nodes[-1]
    return path.with_nodes(nodes, bad_interior)


def _spline_arc(spline, dspline, ta, tb):
    """Arc length of the spline between ta and tb (arrays), Gauss-Legendre."""
    ta = np.asarray(ta, float)
    tb = np.asarray(tb, float)
    half = 0.5 * (tb - ta)
    pts = (ta + tb)[..., None] * 0.5 + half[..., None] * _GL_X
    speed = np.linalg.norm(dspline(pts), axis=-1)
    return half * (speed @ _GL_W)


def _reparam_once(X, exact_first, exact_last):
    seg = np.linalg.norm(np.diff(X, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-14])
    keep[-1] = True
    Xk = X[keep]
    if Xk.shape[0] < 2:
        raise DegeneratePathError("path has fewer than two distinct nodes")
    t = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(Xk, axis=0), axis=1))])
    if np.any(np.diff(t) <= 0):
        # duplicate final node collapsed into its predecessor
        Xk = np.vstack([Xk[:-2], Xk[-1:]]) if Xk.shape[0] > 2 else Xk
        t = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(Xk, axis=0), axis=1))])
    if Xk.shape[0] == 2:
        bc = "not-a-knot"  # two points: straight segment
    else:
        bc = "natural"
    spline = CubicSpline(t, Xk, bc_type=bc, axis=0)
    dspline = spline.derivative()
    seg_arc = _spline_arc(spline, dspline, t[:-1], t[1:])
    cum = np.concatenate([[0.0], np.cumsum(seg_arc)])
    total = cum[-1]
    r = X.shape[0]
    targets = total * np.arange(1, r - 1) / (r - 1)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(seg_arc) - 1)
    ta = t[idx]
    # Initial guess: linear in arc within the segment, then Newton on arc(t) = target.
    frac = (targets - cum[idx]) / np.where(seg_arc[idx] > 0, seg_arc[idx], 1.0)
    tt = ta + frac * (t[idx + 1] - ta)
    for _ in range(30):
        resid = cum[idx] + _spline_arc(spline, dspline, ta, tt) - targets
        speed = np.linalg.norm(dspline(tt), axis=-1)
        step = resid / np.where(speed > 0, speed, 1.0)
        tt = np.clip(tt - step, t[0], t[-1])
        if np.max(np.abs(step), initial=0.0) < 1e-15 * max(t[-1], 1.0):
            break
    out = np.empty_like(X)
    out[0] = exact_first
    out[-1] = exact_last
    out[1:-1] = spline(tt)
    return out


def reparametrize(path: PathState, *, max_passes: int = 25, tol: float = 1e-13) -> PathState:
    """Redistribute nodes to equal arc length along a natural cubic spline.

    The spline is refit through the redistributed nodes and the redistribution
    repeated until nodes stop moving, so the result is a fixed point of the
    operation.  Endpoints are preserved exactly.
    """
    X = path.unwrapped()
    total = float(np.sum(np.linalg.norm(np.diff(X, axis=0), axis=1)))
    if total < 1e-12:
        raise DegeneratePathError(f"path length {total:.3g} is too small to reparametrize")
    first, last = X[0].copy(), X[-1].copy()
    for _ in range(max_passes):
        Y = _reparam_once(X, first, last)
        moved = float(np.max(np.abs(Y - X)))
        X = Y
        if moved <= tol * max(1.0, total):
            break
    nodes = path.wrap(X)
    nodes[0] = path.nodes[0]
    nodes[-1] = path.nodes[-1]
    return path.with_nodes(nodes, path.degenerate)


# ---------------------------------------------------------------------------
# nudged elastic band


def neb_tangent(band: PathState, energies, j: int) -> np.ndarray:
    """Upwind tangent at interior node j, energy-weighted at extrema."""
    r = band.r
    if not 0 < j < r - 1:
        raise IndexError(f"tangent only defined for interior nodes, got j={j}")
    E = np.asarray(energies, dtype=float)
    gp = band.diff(band.nodes[j + 1], band.nodes[j])
    gm = band.diff(band.nodes[j], band.nodes[j - 1])
    ep, e0, em = E[j + 1], E[j], E[j - 1]
    if ep > e0 > em:
        g = gp
    elif ep < e0 < em:
        g = gm
    else:
        dmax = max(abs(ep - e0), abs(e0 - em))
        dmin = min(abs(ep - e0), abs(e0 - em))
        if ep > em:
            g = gp * dmax + gm * dmin
        elif ep < em:
            g = gp * dmin + gm * dmax
        else:
            g = (gp + gm) * dmax
    nrm = np.linalg.norm(g)
    if nrm == 0:
        g = gp + gm
        nrm = np.linalg.norm(g)
        if nrm == 0:
            raise DegeneratePathError(f"node {j} has no usable tangent (coincident neighbours)")
    return g / nrm


def neb_force_from(band: PathState, E, G, cfg: NEBConfig, j: int):
    """NEB force at interior node j given per-node energies and gradients.

    Returns (force, perpendicular true force, parallel spring force, tangent).
    A node collapsed onto both neighbours has no tangent and no spring force.
    """
    gp = band.diff(band.nodes[j + 1], band.nodes[j])
    gm = band.diff(band.nodes[j], band.nodes[j - 1])
    if not (np.any(gp) or np.any(gm)):
        return -G[j], -G[j], np.zeros_like(gp), np.zeros_like(gp)
    tau = neb_tangent(band, E, j)
    true_perp = -(G[j] - np.dot(G[j], tau) * tau)
    spring_par = cfg.k * (np.linalg.norm(gp) - np.linalg.norm(gm)) * tau
    return true_perp + spring_par, true_perp, spring_par, tau


def neb_force(band: PathState, landscape: Landscape, cfg: NEBConfig, j: int) -> np.ndarray:
    E, G = evaluate(band, landscape)
    return neb_force_from(band, E, G, cfg, j)[0]


def neb_forces(band: PathState, E, G, cfg: NEBConfig):
    """Forces on all nodes (zero rows at the endpoints), plus the perp/parallel parts."""
    F = np.zeros_like(band.nodes)
    Fperp = np.zeros_like(band.nodes)
    Fpar = np.zeros_like(band.nodes)
    for j in range(1, band.r - 1):
        F[j], Fperp[j], Fpar[j], _ = neb_force_from(band, E, G, cfg, j)
    return F, Fperp, Fpar


def neb_step(band: PathState, F, dt: float) -> PathState:
    nodes = band.nodes + dt * F
    nodes = band.wrap(nodes)
    nodes[0] = band.nodes[0]
    nodes[-1] = band.nodes[-1]
    return band.with_nodes(nodes)


# ---------------------------------------------------------------------------
# driver


def convergence_metrics(path: PathState, landscape: Landscape) -> FinalMetrics:
    E, G = evaluate(path, landscape)
    tang, _ = central_tangents(path)
    inner = np.sum(G * tang, axis=1)
    perp = np.linalg.norm(_perp(G, tang), axis=1)
    return FinalMetrics(E, np.linalg.norm(G, axis=1), inner, perp)


def default_step_size(path: PathState, G, k: float | None = None) -> float:
    spacing = float(np.mean(np.linalg.norm(path.segments(), axis=1)))
    gmax = float(np.max(np.linalg.norm(G, axis=1)))
    dt = 1e-2 * spacing / gmax if gmax > 0 else 1e-2
    if k is not None:
        dt = min(dt, 0.1 / k)
    return dt


def string_criterion(path: PathState, G):
    tang, _ = central_tangents(path)
    perp = np.linalg.norm(_perp(G, tang), axis=1)
    crit = float(np.max(perp[1:-1]))
    if not path.endpoints_pinned:
        crit = max(crit, float(np.linalg.norm(G[0])), float(np.linalg.norm(G[-1])))
    return crit, float(np.max(perp[1:-1]))


def relax(band: PathState, landscape: Landscape, cfg: NEBConfig | None = None, method: str = "string"):
    """Relax a path until the node criterion drops to ``cfg.tol``.

    string: criterion is the max perpendicular gradient over interior nodes
    (plus the full gradient at unpinned endpoints); each Euler step is followed
    by reparametrization.  neb: criterion is the max NEB force norm.
    Returns (path, SolveReport).
    """
    cfg = cfg or NEBConfig()
    if method not in ("string", "neb"):
        raise ValueError(f"unknown method {method!r}")
    if band.dim != landscape.dim:
        raise ValueError(f"path dimension {band.dim} != landscape dimension {landscape.dim}")
    if method == "neb" and not band.endpoints_pinned:
        raise ValueError("free-end NEB is not supported; pin the endpoints")
    report = SolveReport(method=method)
    path = band
    dt = cfg.step_size
    for it in range(int(cfg.max_iters) + 1):
        E, G = evaluate(path, landscape, iteration=it)
        gnorm = float(np.max(np.linalg.norm(G, axis=1)))
        if method == "string":
            crit, max_perp = string_criterion(path, G)
            max_f = crit
        else:
            F, Fperp, _ = neb_forces(path, E, G, cfg)
            max_perp = float(np.max(np.linalg.norm(Fperp, axis=1)))
            crit = max_f = float(np.max(np.linalg.norm(F, axis=1)))
        report.criterion = crit
        if crit <= cfg.tol:
            report.converged = True
            break
        if it == cfg.max_iters:
            break
        if dt is None:
            dt = default_step_size(path, G, cfg.k if method == "neb" else None)
        report.record(E.sum(), gnorm, max_perp, max_f)
        if method == "string":
            path = string_step(path, landscape, dt, _eval=(E, G))
            report.degenerate_nodes.update(path.degenerate)
            path = reparametrize(path)
        else:
            path = neb_step(path, F, dt)
    report.step_size = float(dt or 0.0)
    report.final = convergence_metrics(path, landscape)
    return path, report


# ---------------------------------------------------------------------------
# CSV I/O


def _fmt(x) -> str:
    return repr(float(x))


def write_path_csv(path: PathState, energies, filename):
    filename = Path(filename)
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index"] + [f"theta_{i + 1}_rad" for i in range(path.dim)] + ["energy"])
        for j, (x, e) in enumerate(zip(path.nodes, energies)):
            w.writerow([j + 1] + [_fmt(v) for v in x] + [_fmt(e)])
    return filename


def read_path_csv(filename, *, periodic=True, endpoints_pinned=True):
    with open(filename, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in row[1:-1]] for row in rows[1:]])
    energies = np.array([float(row[-1]) for row in rows[1:]])
    return PathState(data, endpoints_pinned=endpoints_pinned, periodic=periodic), energies


def write_report_csv(report: SolveReport, filename):
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "path_energy", "max_grad_norm", "max_perp_force"])
        for i, (e, g, p) in enumerate(zip(report.path_energy, report.max_grad_norm, report.max_perp_force)):
            w.writerow([i, _fmt(e), _fmt(g), _fmt(p)])
    return Path(filename)


def write_final_metrics_csv(metrics: FinalMetrics, filename):
    with open(filename, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_index", "energy", "grad_norm", "grad_dot_tangent", "perp_grad_norm"])
        for j in range(metrics.energy.size):
            w.writerow([j + 1, _fmt(metrics.energy[j]), _fmt(metrics.grad_norm[j]),
                        _fmt(metrics.grad_dot_tangent[j]), _fmt(metrics.perp_norm[j])])
    return Path(filename)
