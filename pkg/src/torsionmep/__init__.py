"""Minimum-energy paths on torsion-angle propensity landscapes, with rigid-body chain models."""

__version__ = "0.1.0"

from .chain import (BandConfig, ChainModel, Conformation, ReplicaBand, apply_conformation, build_chain_model,
                    build_replica_band, measure_dihedrals, parse_sequence, relax_band)
from .landscape import (AngleGrid, AngleSampleSet, ChainLandscape, GridLandscape, PropensityLibrary,
                        VonMisesKDE, bake_grid, build_library)
from .mep import NEBConfig, PathState, init_path_convex, relax, reparametrize
from .multibody import DIAOptions, Joint, MultibodySystem, RigidBody, dia_step

__all__ = [
    "AngleGrid", "AngleSampleSet", "BandConfig", "ChainLandscape", "ChainModel", "Conformation", "DIAOptions",
    "GridLandscape", "Joint", "MultibodySystem", "NEBConfig", "PathState", "PropensityLibrary", "ReplicaBand",
    "RigidBody", "VonMisesKDE", "apply_conformation", "bake_grid", "build_chain_model", "build_library",
    "build_replica_band", "dia_step", "init_path_convex", "measure_dihedrals", "parse_sequence", "relax",
    "relax_band", "reparametrize",
]
