import numpy as np
import pytest
import torch

from weakloc.frames import ScanParameters


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_params(rng) -> ScanParameters:
    return ScanParameters(
        depth_of_scan=rng.uniform(60, 180),
        voxel_size=rng.uniform(0.3, 0.9),
        sector_width=rng.uniform(0.3, 2.5),
        zoom_level=rng.uniform(1.0, 1.6),
        apex_offset=rng.uniform(0.0, 30.0),
    )
