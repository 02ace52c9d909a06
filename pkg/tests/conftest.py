import numpy as np
import pytest

from api.models import ComplexImage, GridSpec, SequenceParams, TissueMap, TrainingPair
from api.phantom_api import PhantomAPI


def gaussian_blob(grid: GridSpec, sigma_px: float, t2_ms: float = 100.0) -> TissueMap:
    """Smooth, nearly periodic test object: Gaussian proton density, constant T2"""
    x = np.arange(grid.cols) - grid.cols // 2
    y = np.arange(grid.rows) - grid.rows // 2
    pd = np.exp(-(x[None, :] ** 2 + y[:, None] ** 2) / (2 * sigma_px ** 2))
    return TissueMap(grid=grid, t2_ms=np.full(grid.shape, t2_ms), pd=pd)


@pytest.fixture
def make_blob():
    return gaussian_blob


@pytest.fixture
def grid64():
    return GridSpec(rows=64, cols=64)


@pytest.fixture
def grid128():
    return GridSpec(rows=128, cols=128)


@pytest.fixture
def params64(grid64):
    return SequenceParams.for_grid(grid64)


@pytest.fixture
def params128(grid128):
    return SequenceParams.for_grid(grid128)


@pytest.fixture(scope="session")
def brain128():
    return PhantomAPI().make_brain_phantom(GridSpec(rows=128, cols=128))


@pytest.fixture
def tiny_pairs():
    """Two 16x16 training pairs with a smooth complex input and a T2 target"""
    grid = GridSpec(rows=16, cols=16)
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(2):
        data = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        t2 = rng.uniform(40.0, 200.0, grid.shape)
        pairs.append(TrainingPair(oled=ComplexImage(grid=grid, data=data), t2_ms=t2))
    return pairs
