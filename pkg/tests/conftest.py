import numpy as np
import pytest

from sceneflow_gt.dataset import render_dataset
from sceneflow_gt.geometry import RigidTransform
from sceneflow_gt.scene import CameraIntrinsics, Mesh, Scene, StereoRig

SMALL = CameraIntrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)


def quad(mesh_id, half, z, poses, material="grey", static=False, deformation=None):
    """Fronto-parallel square of half-size ``half`` at depth ``z`` facing -z."""
    verts = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]], float)
    tris = np.array([[0, 2, 1], [0, 3, 2]])
    return Mesh(mesh_id, verts, tris, material, poses, deformation=deformation, static=static)


def make_scene(meshes, camera_poses, intr=SMALL, baseline=0.5, light=(0.0, 0.0, -1.0), ambient=0.2):
    materials = {m.material: (0.8, 0.8, 0.8) for m in meshes} or {"grey": (0.8, 0.8, 0.8)}
    return Scene(len(camera_poses), meshes, StereoRig(intr, baseline, camera_poses),
                 light=light, ambient=ambient, materials=materials)


def translating_plane_scene(frames=3, dx=0.2, z=5.0):
    """Static camera, large plane at depth ``z`` sliding ``dx`` per frame along x.

    Every channel is spatially constant: flow (100*dx/z, 0) px, disparity 10 px.
    """
    poses = [RigidTransform.from_translation(dx * f, 0.0, 0.0) for f in range(frames)]
    plane = quad(0, 50.0, z, poses)
    return make_scene([plane], [RigidTransform.identity()] * frames)


@pytest.fixture
def plane_scene():
    return translating_plane_scene()


@pytest.fixture
def plane_dataset(tmp_path, plane_scene):
    root = tmp_path / "plane"
    render_dataset(plane_scene, root)
    return root


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail=""):
    """Collect one PASS/FAIL line for the end-of-run acceptance summary."""
    line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
