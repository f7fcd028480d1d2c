import math

import numpy as np
import pytest

from conftest import make_scene, quad, translating_plane_scene
from sceneflow_gt.geometry import RigidTransform
from sceneflow_gt.render import (
    FLAG_BEHIND,
    FLAG_OUT_OF_IMAGE,
    SKY_COLOR,
    FrameGeometry,
    SurfaceAnchor,
    ego_motion_of,
    primary_hit,
    render_bundle,
    scene_flow_at,
    shade,
    track_anchor,
)
from sceneflow_gt.scene import Mesh, StereoRig, project, world_to_camera
from sceneflow_gt.scenegen import GenParams, build_scene

I = RigidTransform.identity()


def static_scene(camera_poses, z=5.0):
    return make_scene([quad(0, 50.0, z, [I] * len(camera_poses), static=True)], camera_poses)


def test_primary_hit_plane_and_sky():
    scene = make_scene([quad(0, 1.0, 5.0, [I, I], static=True)], [I, I])
    hit = primary_hit(scene, "left", 0, (31.5, 23.5))
    assert hit.point[2] == pytest.approx(5.0, abs=1e-12)
    assert primary_hit(scene, "left", 0, (0, 0)) is None


def test_primary_hit_nearest_plane():
    scene = make_scene([quad(0, 3.0, 7.0, [I, I]), quad(1, 3.0, 5.0, [I, I])], [I, I])
    hit = primary_hit(scene, "left", 0, (31.5, 23.5))
    assert hit.mesh_id == 1 and hit.point[2] == pytest.approx(5.0)


def test_track_anchor_translation():
    scene = make_scene([quad(0, 3.0, 5.0, [I, RigidTransform.from_translation(1, 0, 0)])], [I, I])
    anchor = primary_hit(scene, "left", 0, (40.0, 20.0))
    np.testing.assert_allclose(track_anchor(anchor, scene, 1), anchor.point + [1, 0, 0], atol=1e-12)


def test_track_anchor_rotation():
    verts = [[1, -1, 0], [1, 1, 0], [2, 0, 0]]
    rot = RigidTransform.from_axis_angle((0, 0, 1), math.pi / 2)
    mesh = Mesh(0, verts, [[0, 1, 2]], "grey", [I, rot])
    scene = make_scene([mesh], [I, I])
    anchor = SurfaceAnchor(0, 0, np.array([0.5, 0.5, 0.0]), np.array([1.0, 0, 0]), 0)
    np.testing.assert_allclose(track_anchor(anchor, scene, 1), [0, 1, 0], atol=1e-12)


def test_track_anchor_deformation():
    verts = np.array([[0.0, 0, 5], [1.0, 0, 5], [0.0, 1, 5]])
    moved = verts.copy()
    moved[0] += (0, 0, 4)
    mesh = Mesh(0, verts, [[0, 1, 2]], "grey", [I, I], deformation=[verts, moved])
    scene = make_scene([mesh], [I, I])
    bary = np.array([0.5, 0.25, 0.25])
    p0 = bary @ verts
    anchor = SurfaceAnchor(0, 0, bary, p0, 0)
    np.testing.assert_allclose(track_anchor(anchor, scene, 1) - p0, [0, 0, 2], atol=1e-12)


def test_scene_flow_static_everything():
    s = scene_flow_at(static_scene([I, I]), "left", 0, (10, 10))
    assert s.valid_hit and np.all(s.motion == 0)


def test_scene_flow_pure_ego_motion():
    scene = static_scene([I, RigidTransform.from_translation(0, 0, 1)])
    s = scene_flow_at(scene, "left", 0, (31.5, 23.5))
    np.testing.assert_allclose(s.q_t, [0, 0, 5], atol=1e-12)
    np.testing.assert_allclose(s.q_t1, [0, 0, 4], atol=1e-12)
    np.testing.assert_allclose(s.motion, [0, 0, -1], atol=1e-12)


def test_scene_flow_pure_object_motion():
    scene = make_scene([quad(0, 50.0, 5.0, [I, RigidTransform.from_translation(0, 0, -1)])], [I, I])
    s = scene_flow_at(scene, "left", 0, (20, 30))
    np.testing.assert_allclose(s.motion, [0, 0, -1], atol=1e-12)


def test_scene_flow_sky_invalid():
    scene = make_scene([quad(0, 0.1, 5.0, [I, I])], [I, I])
    s = scene_flow_at(scene, "left", 0, (0, 0))
    assert not s.valid_hit and np.all(np.isnan(s.motion))


def test_target_behind_camera_flagged():
    # the plane passes behind the camera between the frames
    scene = make_scene([quad(0, 50.0, 1.0, [I, RigidTransform.from_translation(0, 0, -3)])], [I, I])
    b = render_bundle(scene, "left", 0)
    assert np.all(b.flags[b.valid] & FLAG_BEHIND)
    assert np.all(np.isnan(b.optical_flow[b.valid]))
    assert np.all(np.isfinite(b.scene_flow[b.valid]))


def test_target_out_of_image_still_has_flow():
    scene = translating_plane_scene(frames=2, dx=1.0)  # 20 px to the right
    b = render_bundle(scene, "left", 0)
    out = (b.flags & FLAG_OUT_OF_IMAGE) != 0
    assert out[:, -1].all() and not out[:, 0].any()
    assert np.all(np.isfinite(b.optical_flow[out]))


def test_shade_examples():
    scene = make_scene([quad(0, 1.0, 5.0, [I, I])], [I, I], light=(0, 0, -1), ambient=0.0)
    anchor = primary_hit(scene, "left", 0, (31.5, 23.5))
    np.testing.assert_allclose(shade(anchor, scene), [0.8, 0.8, 0.8])
    side = make_scene([quad(0, 1.0, 5.0, [I, I])], [I, I], light=(1, 0, 0), ambient=0.2)
    np.testing.assert_allclose(shade(primary_hit(side, "left", 0, (31.5, 23.5)), side), 0.2 * 0.8)
    np.testing.assert_array_equal(shade(None, scene), SKY_COLOR)


def test_box_normals_face_outward():
    from sceneflow_gt.scenegen import box_mesh

    verts, tris = box_mesh((2.0, 1.0, 3.0))
    center = np.array([0.0, -0.5, 0.0])
    for t in tris:
        a, b, c = verts[t]
        n = np.cross(b - a, c - a)
        assert n @ ((a + b + c) / 3 - center) > 0


def test_ego_motion_examples():
    intr = translating_plane_scene().rig.intrinsics
    assert ego_motion_of(StereoRig(intr, 0.5, [I, I]), "left", 0) == I
    e = ego_motion_of(StereoRig(intr, 0.5, [I, RigidTransform.from_translation(0, 0, 1)]), "right", 0)
    np.testing.assert_allclose(e.translation, [0, 0, -1], atol=1e-15)
    np.testing.assert_allclose(e.rotation, np.eye(3), atol=1e-15)


def test_static_scene_zero_flow_exact():
    b = render_bundle(static_scene([I, I]), "left", 0)
    assert b.valid.all()
    assert np.all(b.optical_flow == 0) and np.all(b.scene_flow == 0)
    # analytic depth of the z = 5 plane
    np.testing.assert_allclose(b.depth, 5.0, atol=1e-12)


def test_disparity_depth_coupling_and_stereo():
    scene = build_scene(GenParams(preset="random-boxes", seed=2, frames=2,
                                  intrinsics=translating_plane_scene().rig.intrinsics))
    fx, base = scene.rig.intrinsics.fx, scene.rig.baseline
    left = render_bundle(scene, "left", 0)
    v = left.valid
    np.testing.assert_allclose(left.disparity[v] * left.depth[v], fx * base, rtol=0, atol=1e-6)
    # left pixel shifted by -disparity lands on the right projection of the same point
    w2c_r = world_to_camera(scene.rig, "right", 0)
    for r, c in zip(*np.nonzero(v)):
        if (r + c) % 37:
            continue
        s = scene_flow_at(scene, "left", 0, (c, r))
        (u, vv), _ = project(scene.rig.intrinsics, w2c_r.apply(s.anchor.point))
        assert abs(u - (c - left.disparity[r, c])) < 1e-6 and abs(vv - r) < 1e-6


@pytest.mark.parametrize("preset,direction", [("road", "forward"), ("orbit", "backward"), ("random-boxes", "forward")])
def test_kernel_matches_reference_path(preset, direction):
    small = translating_plane_scene().rig.intrinsics
    scene = build_scene(GenParams(preset=preset, seed=3, frames=2, intrinsics=small))
    frame = 0 if direction == "forward" else 1
    b = render_bundle(scene, "right", frame, direction)
    geo = FrameGeometry(scene, frame)
    rng = np.random.default_rng(0)
    for r, c in zip(rng.integers(0, small.height, 150), rng.integers(0, small.width, 150)):
        s = scene_flow_at(scene, "right", frame, (c, r), direction, geometry=geo)
        assert s.valid_hit == bool(b.valid[r, c])
        if not s.valid_hit:
            assert np.isnan(b.depth[r, c]) and tuple(b.anchors[r, c]) == (-1, -1)
            continue
        assert tuple(b.anchors[r, c]) == (s.anchor.mesh_id, s.anchor.triangle_id)
        np.testing.assert_allclose(b.depth[r, c], s.q_t[2], atol=1e-9)
        np.testing.assert_allclose(b.scene_flow[r, c], s.motion, atol=1e-9)
        if not s.target_behind_camera:
            (u, v), _ = project(small, s.q_t1)
            np.testing.assert_allclose(b.optical_flow[r, c], [u - c, v - r], atol=1e-7)
        np.testing.assert_allclose(b.image[r, c], shade(s.anchor, scene), atol=1e-12)


def test_anchor_and_ego_factorization():
    scene = build_scene(GenParams(preset="orbit", seed=1, frames=2,
                                  intrinsics=translating_plane_scene().rig.intrinsics))
    b = render_bundle(scene, "left", 0)
    sel = b.valid & b.static_mask
    v, u = np.mgrid[0:b.shape[0], 0:b.shape[1]]
    i = scene.rig.intrinsics
    q = np.stack([(u - i.cx) / i.fx * b.depth, (v - i.cy) / i.fy * b.depth, b.depth], -1)[sel]
    err = np.linalg.norm(q + b.scene_flow[sel] - b.ego_motion.apply(q), axis=-1)
    assert err.max() < 1e-9


def test_thread_count_does_not_change_bytes():
    scene = build_scene(GenParams(preset="road", seed=4, frames=2,
                                  intrinsics=translating_plane_scene().rig.intrinsics))
    ref = render_bundle(scene, "left", 0, threads=1)
    for n in (2, 3, 8):
        b = render_bundle(scene, "left", 0, threads=n)
        for name in ("depth", "disparity", "scene_flow", "optical_flow", "flags", "anchors", "image"):
            assert getattr(b, name).tobytes() == getattr(ref, name).tobytes(), name


def test_backward_motion_inverts_forward():
    scene = translating_plane_scene(frames=2)
    fwd = render_bundle(scene, "left", 0, "forward")
    bwd = render_bundle(scene, "left", 1, "backward")
    np.testing.assert_allclose(fwd.scene_flow[fwd.valid], np.broadcast_to([0.2, 0, 0], (fwd.valid.sum(), 3)), atol=1e-12)
    np.testing.assert_allclose(bwd.scene_flow[bwd.valid], np.broadcast_to([-0.2, 0, 0], (bwd.valid.sum(), 3)), atol=1e-12)
    np.testing.assert_allclose(fwd.optical_flow[fwd.valid], np.broadcast_to([4.0, 0.0], (fwd.valid.sum(), 2)), atol=1e-9)


def test_bad_frame_pair():
    scene = translating_plane_scene(frames=2)
    with pytest.raises(IndexError):
        render_bundle(scene, "left", 1, "forward")
    with pytest.raises(IndexError):
        render_bundle(scene, "left", 0, "backward")
