import numpy as np
import pytest

from agrisim import fieldgen


@pytest.fixture(scope="session")
def small_field():
    spec = fieldgen.FieldSpec(
        extent=(6.0, 4.0),
        row_orientation=0.0,
        row_spacing=0.5,
        crop_lattice=0.15,
        weed_density=0.4,
        lattice_jitter_sigma=0.005,
        seed=7,
    )
    return fieldgen.generate(spec)


@pytest.fixture(scope="session")
def small_grid(small_field):
    return fieldgen.render_grid(small_field, cell_size=0.04, seed=3)


@pytest.fixture(scope="session")
def flat_dem():
    return fieldgen.Dem((0.0, 0.0), 1.0, np.zeros((4, 4)))
