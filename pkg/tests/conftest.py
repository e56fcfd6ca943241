import numpy as np
import pytest

from homokin.deformation import DeformationMatrix
from homokin.models import CollisionKernel
from homokin.storage import RunStorage


@pytest.fixture
def shear():
    return DeformationMatrix.simple_shear(1.0)


@pytest.fixture
def expansion():
    return DeformationMatrix.dilation(1.0)


@pytest.fixture
def at_rest():
    return DeformationMatrix(np.zeros((3, 3)))


@pytest.fixture
def maxwell_kernel():
    return CollisionKernel(kind="maxwell", b0=1.0, knudsen=1.0)


@pytest.fixture
def storage(tmp_path):
    return RunStorage(str(tmp_path / "runs"))
