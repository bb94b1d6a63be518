import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def two_well():
    from torsionmep.landscape import GridLandscape, VonMisesKDE, bake_grid
    from torsionmep.synthetic import TWO_WELL_KAPPA, two_well_samples

    energy, _ = bake_grid(VonMisesKDE(two_well_samples(), TWO_WELL_KAPPA), 180, 1.0)
    return GridLandscape(energy)
