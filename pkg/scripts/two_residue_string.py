"""String method between the two wells of a baked two-well map.

    python3 scripts/two_residue_string.py --replicas 50 --out runs/string
"""

import argparse
from pathlib import Path

import numpy as np

from torsionmep.landscape import GridLandscape, VonMisesKDE, bake_grid
from torsionmep.mep import NEBConfig, evaluate, init_path_convex, relax, write_path_csv, write_report_csv
from torsionmep.synthetic import TWO_WELL_CENTRES, TWO_WELL_KAPPA, two_well_samples


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicas", type=int, default=20)
    ap.add_argument("--bins", type=int, default=180)
    ap.add_argument("--dt", type=float, default=None)
    ap.add_argument("--tol", type=float, default=3e-4)
    ap.add_argument("--out", type=Path, default=Path("runs/string"))
    args = ap.parse_args()

    energy, _ = bake_grid(VonMisesKDE(two_well_samples(), TWO_WELL_KAPPA), args.bins, 1.0)
    land = GridLandscape(energy)
    A, B = (np.array(c) for c in TWO_WELL_CENTRES)
    path, rep = relax(init_path_convex(A, B, args.replicas), land, NEBConfig(step_size=args.dt, tol=args.tol))
    args.out.mkdir(parents=True, exist_ok=True)
    E, _ = evaluate(path, land)
    write_path_csv(path, E, args.out / "path.csv")
    write_report_csv(rep, args.out / "report.csv")
    print(f"converged={rep.converged} iterations={rep.iterations} criterion={rep.criterion:.3e} "
          f"barrier={E.max() - E[0]:.4f}")


if __name__ == "__main__":
    main()
