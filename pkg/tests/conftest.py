import numpy as np
import pytest

from amvpred.grid import FieldStack, Grid
from amvpred.synth import SynthConfig


@pytest.fixture
def small_grid():
    return Grid(np.linspace(0.0, 60.0, 4), np.linspace(-80.0, -10.0, 6))


@pytest.fixture
def small_synth():
    return SynthConfig(n_members=4, n_years=40, n_lat=12, n_lon=14, seed=3)


def make_stack(values, grid, member="000", start=2000, mask=None, variables=("SST", "SSS", "SLP")):
    values = np.asarray(values)
    if not np.issubdtype(values.dtype, np.floating):
        values = values.astype(float)
    if mask is None:
        mask = np.ones((len(variables),) + grid.shape, dtype=bool)
    return FieldStack(
        variables=variables,
        years=np.arange(start, start + values.shape[1]),
        member=member,
        data=values,
        grid=grid,
        mask=mask,
    )
