"""NEB on the two-well map for several spring constants; prints node differences.

    python3 scripts/neb_stiffness.py --k 1 10 100
"""

import argparse
from pathlib import Path

import numpy as np

from torsionmep.landscape import GridLandscape, VonMisesKDE, bake_grid, wrap_angle
from torsionmep.mep import NEBConfig, evaluate, init_path_convex, relax, write_path_csv
from torsionmep.synthetic import TWO_WELL_CENTRES, TWO_WELL_KAPPA, two_well_samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=float, nargs="+", default=[1.0, 10.0])
    ap.add_argument("--replicas", type=int, default=20)
    ap.add_argument("--tol", type=float, default=1e-6)
    ap.add_argument("--out", type=Path, default=Path("runs/neb"))
    args = ap.parse_args()

    energy, _ = bake_grid(VonMisesKDE(two_well_samples(), TWO_WELL_KAPPA), 180, 1.0)
    land = GridLandscape(energy)
    A, B = (np.array(c) for c in TWO_WELL_CENTRES)
    p0 = init_path_convex(A, B, args.replicas)
    args.out.mkdir(parents=True, exist_ok=True)
    nodes = {}
    for k in args.k:
        # explicit Euler on springs of stiffness k needs dt below ~1/k
        path, rep = relax(p0, land, NEBConfig(k=k, step_size=min(0.02, 0.1 / k), tol=args.tol), "neb")
        E, _ = evaluate(path, land)
        write_path_csv(path, E, args.out / f"path_k{k:g}.csv")
        nodes[k] = path.nodes
        print(f"k={k:g}: converged={rep.converged} iterations={rep.iterations} criterion={rep.criterion:.2e}")
    ref = args.k[0]
    for k in args.k[1:]:
        print(f"max |nodes(k={k:g}) - nodes(k={ref:g})| = {np.abs(wrap_angle(nodes[k] - nodes[ref])).max():.2e}")


if __name__ == "__main__":
    main()
