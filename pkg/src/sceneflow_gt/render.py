"""Dense scene flow rendering by ray casting and surface anchoring.

Every pixel casts one primary ray at the reference frame. The hit is stored
as an anchor (mesh, triangle, barycentric weights); re-evaluating the same
weights on the triangle's vertices at the target frame gives the tracked
surface point under rigid motion and deformation. Both points are then
expressed in the same physical camera at its respective frame, so the
motion vector contains the apparent motion due to the camera's own motion.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .bvh import Bvh, build_bvh, bvh_intersect, traverse
from .geometry import RigidTransform, barycentric_point, face_normal
from .scene import (
    CameraIntrinsics,
    Scene,
    StereoRig,
    camera_ray,
    mesh_vertices_at,
    project,
    world_to_camera,
)

SKY_COLOR = (0.4, 0.6, 0.9)
DIRECTIONS = ("forward", "backward")

FLAG_VALID = 1
FLAG_BEHIND = 2
FLAG_OUT_OF_IMAGE = 4


def target_frame(frame: int, direction: str) -> int:
    if direction == "forward":
        return frame + 1
    if direction == "backward":
        return frame - 1
    raise ValueError(f"unknown direction {direction!r}")


def _check_pair(scene: Scene, frame: int, direction: str) -> int:
    tgt = target_frame(frame, direction)
    if not (0 <= frame < scene.frames and 0 <= tgt < scene.frames):
        raise IndexError(f"no {direction} frame pair at frame {frame} in a {scene.frames}-frame scene")
    return tgt


@dataclass(frozen=True)
class SurfaceAnchor:
    mesh_id: int
    triangle_id: int
    bary: np.ndarray
    point: np.ndarray
    frame: int


@dataclass(frozen=True)
class SceneFlowSample:
    q_t: np.ndarray
    q_t1: np.ndarray
    motion: np.ndarray
    valid_hit: bool
    target_behind_camera: bool = False
    target_out_of_image: bool = False
    anchor: Optional[SurfaceAnchor] = None

    @classmethod
    def invalid(cls) -> SceneFlowSample:
        nan = np.full(3, np.nan)
        return cls(nan, nan.copy(), nan.copy(), False)


@dataclass(frozen=True, eq=False)
class GroundTruthBundle:
    """All dense ground-truth channels of one camera for one frame pair.

    Invalid (sky) pixels hold NaN in every float channel and -1 anchors.
    ``ego_motion`` maps reference camera coordinates at ``frame`` to the
    same camera's coordinates at ``target_frame``.
    """

    depth: np.ndarray
    disparity: np.ndarray
    scene_flow: np.ndarray
    optical_flow: np.ndarray
    flags: np.ndarray
    anchors: np.ndarray
    static_mask: np.ndarray
    image: np.ndarray
    ego_motion: RigidTransform
    side: str
    direction: str
    frame: int
    target_frame: int
    intrinsics: CameraIntrinsics
    baseline: float

    @property
    def valid(self) -> np.ndarray:
        return (self.flags & FLAG_VALID) != 0

    @property
    def shape(self):
        return self.depth.shape


class FrameGeometry:
    """World-space triangle soup of one frame plus its BVH.

    Rows are ordered by (mesh id, triangle id), matching the BVH tie-break.
    """

    def __init__(self, scene: Scene, frame: int, leaf_size: int = 4):
        self.frame = frame
        self.vertices = {m.id: mesh_vertices_at(m, frame) for m in scene.meshes}
        v0, v1, v2, mids, tids, static, albedo = [], [], [], [], [], [], []
        for m in scene.meshes:
            wv = self.vertices[m.id]
            t = m.triangles
            v0.append(wv[t[:, 0]])
            v1.append(wv[t[:, 1]])
            v2.append(wv[t[:, 2]])
            mids.append(np.full(len(t), m.id, np.int64))
            tids.append(np.arange(len(t), dtype=np.int64))
            static.append(np.full(len(t), m.static, np.bool_))
            albedo.append(np.tile(scene.albedo(m), (len(t), 1)))

        def cat(parts, shape, dtype):
            return np.concatenate(parts).astype(dtype) if parts else np.zeros(shape, dtype)

        self.v0 = cat(v0, (0, 3), np.float64)
        self.v1 = cat(v1, (0, 3), np.float64)
        self.v2 = cat(v2, (0, 3), np.float64)
        self.mesh_ids = cat(mids, (0,), np.int64)
        self.tri_ids = cat(tids, (0,), np.int64)
        self.static = cat(static, (0,), np.bool_)
        self.albedo = cat(albedo, (0, 3), np.float64)
        self.bvh: Bvh = build_bvh(self.v0, self.v1, self.v2, self.mesh_ids, self.tri_ids, leaf_size)


class GeometryCache(dict):
    """Lazily built :class:`FrameGeometry` per frame of one scene."""

    def __init__(self, scene: Scene):
        super().__init__()
        self.scene = scene

    def __missing__(self, frame):
        geo = FrameGeometry(self.scene, frame)
        self[frame] = geo
        return geo


def _geometry(scene, frame, geometry):
    if geometry is None:
        return FrameGeometry(scene, frame)
    if isinstance(geometry, FrameGeometry):
        if geometry.frame != frame:
            raise ValueError("geometry was built for another frame")
        return geometry
    return geometry[frame]


# -- per-pixel reference path --------------------------------------------------

def primary_hit(scene: Scene, side: str, frame: int, pixel, geometry=None) -> Optional[SurfaceAnchor]:
    """Nearest surface hit through ``pixel`` at ``frame``, or ``None`` for sky."""
    geo = _geometry(scene, frame, geometry)
    ray = camera_ray(scene.rig, side, frame, pixel)
    hit = bvh_intersect(geo.bvh, ray)
    if hit is None:
        return None
    mesh_id, tri_id, _, bary = hit
    tri = scene.mesh(mesh_id).triangles[tri_id]
    wv = geo.vertices[mesh_id]
    point = barycentric_point(wv[tri[0]], wv[tri[1]], wv[tri[2]], bary)
    return SurfaceAnchor(mesh_id, tri_id, bary, point, frame)


def track_anchor(anchor: SurfaceAnchor, scene: Scene, frame: int) -> np.ndarray:
    """World position of the anchored surface point at another frame."""
    mesh = scene.mesh(anchor.mesh_id)
    wv = mesh_vertices_at(mesh, frame)
    tri = mesh.triangles[anchor.triangle_id]
    return barycentric_point(wv[tri[0]], wv[tri[1]], wv[tri[2]], anchor.bary)


def ego_motion_of(rig: StereoRig, side: str, frame: int, direction: str = "forward") -> RigidTransform:
    tgt = target_frame(frame, direction)
    return world_to_camera(rig, side, tgt).compose(rig.camera_to_world(side, frame))


def scene_flow_at(scene: Scene, side: str, frame: int, pixel, direction: str = "forward",
                  geometry=None) -> SceneFlowSample:
    tgt = _check_pair(scene, frame, direction)
    anchor = primary_hit(scene, side, frame, pixel, geometry)
    if anchor is None:
        return SceneFlowSample.invalid()
    q_t = world_to_camera(scene.rig, side, frame).apply(anchor.point)
    q_t1 = world_to_camera(scene.rig, side, tgt).apply(track_anchor(anchor, scene, tgt))
    behind = not q_t1[2] > 0
    outside = False
    if not behind:
        (u, v), _ = project(scene.rig.intrinsics, q_t1)
        intr = scene.rig.intrinsics
        outside = not (0 <= math.floor(u + 0.5) < intr.width and 0 <= math.floor(v + 0.5) < intr.height)
    return SceneFlowSample(q_t, q_t1, q_t1 - q_t, True, behind, outside, anchor)


def shade(anchor: Optional[SurfaceAnchor], scene: Scene) -> np.ndarray:
    """Lambertian flat shading with the winding-order face normal."""
    if anchor is None:
        return np.array(SKY_COLOR)
    mesh = scene.mesh(anchor.mesh_id)
    wv = mesh_vertices_at(mesh, anchor.frame)
    tri = mesh.triangles[anchor.triangle_id]
    n = face_normal(wv[tri[0]], wv[tri[1]], wv[tri[2]])
    lit = max(0.0, float(n @ scene.light_direction))
    return scene.albedo(mesh) * (scene.ambient + (1.0 - scene.ambient) * lit)


# -- dense kernel ----------------------------------------------------------------

@njit(nogil=True, cache=True)
def _render_rows(r0, r1, width, height, fx, fy, cx, cy, baseline,
                 c2w_r, c2w_t, ref_r, ref_t, tgt_r, tgt_t,
                 v0, v1, v2, node_lo, node_hi, node_child, node_start, node_count, prims,
                 w0, w1, w2, tri_mesh, tri_local, tri_static, tri_albedo,
                 light, ambient, sky,
                 depth, disp, sflow, oflow, flags, anchors, static, image):
    nan = np.nan
    for r in range(r0, r1):
        for c in range(width):
            # Camera-space direction through the pixel center, then to world.
            x = (c - cx) / fx
            y = (r - cy) / fy
            z = 1.0
            n = math.sqrt(x * x + y * y + z * z)
            x /= n
            y /= n
            z /= n
            dx = c2w_r[0, 0] * x + c2w_r[0, 1] * y + c2w_r[0, 2] * z
            dy = c2w_r[1, 0] * x + c2w_r[1, 1] * y + c2w_r[1, 2] * z
            dz = c2w_r[2, 0] * x + c2w_r[2, 1] * y + c2w_r[2, 2] * z
            n = math.sqrt(dx * dx + dy * dy + dz * dz)
            dx /= n
            dy /= n
            dz /= n
            i, t, b0, b1, b2 = traverse(c2w_t[0], c2w_t[1], c2w_t[2], dx, dy, dz, v0, v1, v2,
                                        node_lo, node_hi, node_child, node_start, node_count, prims)
            if i < 0:
                depth[r, c] = nan
                disp[r, c] = nan
                for k in range(3):
                    sflow[r, c, k] = nan
                    image[r, c, k] = sky[k]
                oflow[r, c, 0] = nan
                oflow[r, c, 1] = nan
                flags[r, c] = 0
                anchors[r, c, 0] = -1
                anchors[r, c, 1] = -1
                static[r, c] = False
                continue

            px = b0 * v0[i, 0] + b1 * v1[i, 0] + b2 * v2[i, 0]
            py = b0 * v0[i, 1] + b1 * v1[i, 1] + b2 * v2[i, 1]
            pz = b0 * v0[i, 2] + b1 * v1[i, 2] + b2 * v2[i, 2]
            qx = ref_r[0, 0] * px + ref_r[0, 1] * py + ref_r[0, 2] * pz + ref_t[0]
            qy = ref_r[1, 0] * px + ref_r[1, 1] * py + ref_r[1, 2] * pz + ref_t[1]
            qz = ref_r[2, 0] * px + ref_r[2, 1] * py + ref_r[2, 2] * pz + ref_t[2]

            sx = b0 * w0[i, 0] + b1 * w1[i, 0] + b2 * w2[i, 0]
            sy = b0 * w0[i, 1] + b1 * w1[i, 1] + b2 * w2[i, 1]
            sz = b0 * w0[i, 2] + b1 * w1[i, 2] + b2 * w2[i, 2]
            ux = tgt_r[0, 0] * sx + tgt_r[0, 1] * sy + tgt_r[0, 2] * sz + tgt_t[0]
            uy = tgt_r[1, 0] * sx + tgt_r[1, 1] * sy + tgt_r[1, 2] * sz + tgt_t[1]
            uz = tgt_r[2, 0] * sx + tgt_r[2, 1] * sy + tgt_r[2, 2] * sz + tgt_t[2]

            depth[r, c] = qz
            disp[r, c] = fx * baseline / qz
            sflow[r, c, 0] = ux - qx
            sflow[r, c, 1] = uy - qy
            sflow[r, c, 2] = uz - qz
            f = FLAG_VALID
            if uz > 0.0:
                tu = fx * ux / uz + cx
                tv = fy * uy / uz + cy
                # Source pixel re-projected with the same formula, so an
                # unmoved point yields exactly zero flow.
                oflow[r, c, 0] = tu - (fx * qx / qz + cx)
                oflow[r, c, 1] = tv - (fy * qy / qz + cy)
                iu = math.floor(tu + 0.5)
                iv = math.floor(tv + 0.5)
                if iu < 0 or iu >= width or iv < 0 or iv >= height:
                    f |= FLAG_OUT_OF_IMAGE
            else:
                oflow[r, c, 0] = nan
                oflow[r, c, 1] = nan
                f |= FLAG_BEHIND
            flags[r, c] = f
            anchors[r, c, 0] = tri_mesh[i]
            anchors[r, c, 1] = tri_local[i]
            static[r, c] = tri_static[i]

            e1x = v1[i, 0] - v0[i, 0]
            e1y = v1[i, 1] - v0[i, 1]
            e1z = v1[i, 2] - v0[i, 2]
            e2x = v2[i, 0] - v0[i, 0]
            e2y = v2[i, 1] - v0[i, 1]
            e2z = v2[i, 2] - v0[i, 2]
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            lit = (nx * light[0] + ny * light[1] + nz * light[2]) / nn
            if lit < 0.0:
                lit = 0.0
            s = ambient + (1.0 - ambient) * lit
            for k in range(3):
                image[r, c, k] = tri_albedo[i, k] * s


def _row_chunks(height: int, threads: int):
    size = max(1, math.ceil(height / (threads * 4)))
    return [(r, min(height, r + size)) for r in range(0, height, size)]


def render_bundle(scene: Scene, side: str, frame: int, direction: str = "forward",
                  threads: int = 1, geometry=None) -> GroundTruthBundle:
    """Render every ground-truth channel of one camera for one frame pair.

    ``geometry`` may be a :class:`GeometryCache` shared across calls. The
    result does not depend on ``threads``: rows are split into chunks that
    write disjoint slices of pre-allocated arrays.
    """
    if threads < 1:
        raise ValueError("threads must be >= 1")
    tgt = _check_pair(scene, frame, direction)
    ref_geo = _geometry(scene, frame, geometry)
    if geometry is None or isinstance(geometry, FrameGeometry):
        tgt_geo = FrameGeometry(scene, tgt)
    else:
        tgt_geo = geometry[tgt]
    rig = scene.rig
    intr = rig.intrinsics
    h, w = intr.height, intr.width
    c2w = rig.camera_to_world(side, frame)
    ref = c2w.inverse()
    tgt_w2c = world_to_camera(rig, side, tgt)

    depth = np.empty((h, w))
    disp = np.empty((h, w))
    sflow = np.empty((h, w, 3))
    oflow = np.empty((h, w, 2))
    flags = np.empty((h, w), np.uint8)
    anchors = np.empty((h, w, 2), np.int32)
    static = np.empty((h, w), np.bool_)
    image = np.empty((h, w, 3))

    b = ref_geo.bvh
    args = (
        w, h, float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy), float(rig.baseline),
        c2w.rotation, c2w.translation, ref.rotation, ref.translation, tgt_w2c.rotation, tgt_w2c.translation,
        b.v0, b.v1, b.v2, b.node_lo, b.node_hi, b.node_child, b.node_start, b.node_count, b.prims,
        tgt_geo.v0, tgt_geo.v1, tgt_geo.v2, ref_geo.mesh_ids, ref_geo.tri_ids, ref_geo.static, ref_geo.albedo,
        np.asarray(scene.light_direction), float(scene.ambient), np.array(SKY_COLOR),
        depth, disp, sflow, oflow, flags, anchors, static, image,
    )
    chunks = _row_chunks(h, threads)
    if threads == 1:
        for r0, r1 in chunks:
            _render_rows(r0, r1, *args)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda rows: _render_rows(rows[0], rows[1], *args), chunks))

    return GroundTruthBundle(
        depth=depth, disparity=disp, scene_flow=sflow, optical_flow=oflow, flags=flags,
        anchors=anchors, static_mask=static, image=image,
        ego_motion=ego_motion_of(rig, side, frame, direction),
        side=side, direction=direction, frame=frame, target_frame=tgt,
        intrinsics=intr, baseline=float(rig.baseline),
    )
