import numpy as np
import pytest
import torch

from rgbd_refine.autodiff import set_deterministic
from rgbd_refine.scene import Intrinsics, Pose, Texture, TriMesh


@pytest.fixture(autouse=True, scope="session")
def _deterministic():
    set_deterministic(True, threads=1)


def quad_mesh(z=2.0, half=0.5):
    """Two triangles forming a square facing the camera at depth ``z``."""
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    uv = np.array([[[0.1, 0.1], [0.9, 0.1], [0.9, 0.9]], [[0.1, 0.1], [0.9, 0.9], [0.1, 0.9]]])
    return TriMesh(v, f, uv)


def random_texture(size=8, seed=0):
    return Texture(np.random.default_rng(seed).uniform(0.1, 0.9, size=(size, size, 3)))


@pytest.fixture
def quad():
    return quad_mesh()


@pytest.fixture
def small_intr():
    return Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8)


@pytest.fixture
def identity_pose():
    return Pose.identity()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def to_t(x):
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
