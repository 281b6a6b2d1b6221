import numpy as np
import pytest

from voxelstrip import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request, monkeypatch):
    """Run the test once per available kernel backend."""
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def oblique_affine(spacing=(1.2, 0.9, 2.0), angle=0.3, origin=(-40.0, 12.5, 7.25)):
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    A = np.eye(4)
    A[:3, :3] = R * np.asarray(spacing)
    A[:3, 3] = origin
    return A
