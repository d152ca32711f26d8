import numpy as np
import pytest

from texalign.geometry import Intrinsics, Keyframe, Mesh, Pose
from texalign.synth import SceneSpec, generate_scene, two_fragment_spec


def plane_grid(nx, ny, size=(1.0, 1.0), z=0.0):
    """Regular grid of 2*nx*ny triangles on the plane z = const."""
    xs = np.linspace(-size[0] / 2, size[0] / 2, nx + 1)
    ys = np.linspace(-size[1] / 2, size[1] / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    V = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], 1)
    F = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            F += [[a, b, d], [a, d, c]]
    return Mesh(V, np.array(F))


def look_down(x=0.0, y=0.0, h=1.0):
    # camera above the plane looking along -z; image rows follow -y
    R_cw = np.diag([1.0, -1.0, -1.0])
    return Pose.from_camera_to_world(R_cw, [x, y, h])


def blank_keyframe(pose, K, kid=0):
    return Keyframe(kid, np.zeros((K.height, K.width, 3), np.uint8), pose, K)


@pytest.fixture(scope="session")
def default_scene():
    return generate_scene(SceneSpec())


@pytest.fixture(scope="session")
def two_frag_scene():
    return generate_scene(two_fragment_spec())


@pytest.fixture
def K100():
    return Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
