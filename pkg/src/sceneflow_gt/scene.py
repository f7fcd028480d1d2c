"""Scene model: animated meshes, a rectified stereo rig and the scene document.

World and camera frames share one convention: x right, y down, z forward.
Pixel ``(u, v)`` denotes the center of column ``u``, row ``v``.

Scene document (UTF-8 JSON, canonical form produced by :func:`serialize_scene`)::

    {
     "ambient": 0.2,
     "camera": {"baseline": 0.5,
                "intrinsics": {"cx": .., "cy": .., "fx": .., "fy": .., "height": .., "width": ..},
                "poses": [{"rotation": [w, x, y, z], "translation": [x, y, z]}, ...]},
     "format": "sceneflow-scene/1",
     "frames": 3,
     "light": [x, y, z],
     "materials": {"<id>": {"albedo": [r, g, b]}},
     "meshes": [{"deformation": [[[x, y, z], ...], ...],   # optional
                 "id": 0, "material": "<id>", "poses": [...], "static": true,
                 "triangles": [[i, j, k], ...], "vertices": [[x, y, z], ...]}]
    }

Camera poses map camera to world (left camera); mesh poses map object to
world. Rotations are unit quaternions ``(w, x, y, z)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .formats import dumps_canonical
from .geometry import Ray, RigidTransform, normalize

FORMAT_TAG = "sceneflow-scene/1"
SIDES = ("left", "right")

_TOP_KEYS = {"format", "frames", "ambient", "light", "camera", "materials", "meshes"}
_MESH_KEYS = {"id", "material", "static", "vertices", "triangles", "poses", "deformation"}


class SceneParseError(ValueError):
    """The document is not well-formed; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = "", line: Optional[int] = None):
        self.path = path
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(path)
        super().__init__(f"{': '.join([', '.join(where)] if where else [])}{': ' if where else ''}{message}")


class SceneValidationError(ValueError):
    """The document parsed but violates a scene invariant."""

    def __init__(self, message: str, mesh_id: Optional[int] = None):
        self.mesh_id = mesh_id
        prefix = f"mesh {mesh_id}: " if mesh_id is not None else ""
        super().__init__(prefix + message)


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise SceneValidationError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise SceneValidationError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise SceneValidationError("principal point must lie inside the image")


@dataclass(frozen=True, eq=False)
class Mesh:
    id: int
    vertices: np.ndarray
    triangles: np.ndarray
    material: str
    poses: tuple
    deformation: Optional[np.ndarray] = None
    static: bool = False

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        tri = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        v.setflags(write=False)
        tri.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "poses", tuple(self.poses))
        if self.deformation is not None:
            d = np.array(self.deformation, dtype=np.float64)
            d.setflags(write=False)
            object.__setattr__(self, "deformation", d)
        self._validate()

    def _validate(self):
        if not np.all(np.isfinite(self.vertices)):
            raise SceneValidationError("non-finite vertex", self.id)
        n = len(self.vertices)
        t = self.triangles
        if len(t) and (t.min() < 0 or t.max() >= n):
            raise SceneValidationError("triangle index out of range", self.id)
        if len(t) and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise SceneValidationError("triangle repeats a vertex index", self.id)
        if self.deformation is not None:
            d = self.deformation
            if d.ndim != 3 or d.shape[1:] != (n, 3):
                raise SceneValidationError(
                    f"deformation entries must hold exactly {n} vertices", self.id
                )
            if not np.all(np.isfinite(d)):
                raise SceneValidationError("non-finite deformation vertex", self.id)
        if self.static:
            if self.deformation is not None:
                raise SceneValidationError("static mesh cannot carry a deformation track", self.id)
            if any(p != self.poses[0] for p in self.poses):
                raise SceneValidationError("static mesh pose track is not constant", self.id)

    @property
    def frame_count(self) -> int:
        return len(self.poses)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        if (self.deformation is None) != (other.deformation is None):
            return False
        return (
            self.id == other.id
            and self.material == other.material
            and self.static == other.static
            and self.poses == other.poses
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and (self.deformation is None or np.array_equal(self.deformation, other.deformation))
        )


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair sharing one set of intrinsics.

    ``poses`` are left camera-to-world transforms; the right camera sits at
    ``+baseline`` along the left camera's x axis.
    """

    intrinsics: CameraIntrinsics
    baseline: float
    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.baseline > 0:
            raise SceneValidationError("baseline must be positive")

    def camera_to_world(self, side: str, frame: int) -> RigidTransform:
        if not 0 <= frame < len(self.poses):
            raise IndexError(f"frame {frame} out of range [0, {len(self.poses)})")
        pose = self.poses[frame]
        if side == "left":
            return pose
        if side == "right":
            return pose.compose(RigidTransform.from_translation(self.baseline, 0.0, 0.0))
        raise ValueError(f"unknown camera side {side!r}")


@dataclass(frozen=True)
class Scene:
    frames: int
    meshes: tuple
    rig: StereoRig
    light: tuple = (0.0, -1.0, 0.0)
    ambient: float = 0.2
    materials: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "meshes", tuple(sorted(self.meshes, key=lambda m: m.id)))
        object.__setattr__(self, "light", tuple(float(x) for x in self.light))
        if not any(self.light):
            raise SceneValidationError("light direction must be non-zero")
        if self.frames < 1:
            raise SceneValidationError("frame count must be positive")
        if not 0.0 <= self.ambient <= 1.0:
            raise SceneValidationError("ambient must lie in [0, 1]")
        if len(self.rig.poses) != self.frames:
            raise SceneValidationError(
                f"camera pose track has {len(self.rig.poses)} entries for {self.frames} frames"
            )
        seen = set()
        for m in self.meshes:
            if m.id in seen:
                raise SceneValidationError("duplicate mesh id", m.id)
            seen.add(m.id)
            if m.frame_count != self.frames:
                raise SceneValidationError(
                    f"pose track has {m.frame_count} entries for {self.frames} frames", m.id
                )
            if m.deformation is not None and len(m.deformation) != self.frames:
                raise SceneValidationError(
                    f"deformation track has {len(m.deformation)} entries for {self.frames} frames", m.id
                )
            if m.material not in self.materials:
                raise SceneValidationError(f"unknown material {m.material!r}", m.id)

    def mesh(self, mesh_id: int) -> Mesh:
        for m in self.meshes:
            if m.id == mesh_id:
                return m
        raise KeyError(mesh_id)

    @property
    def light_direction(self) -> np.ndarray:
        """Unit vector pointing towards the light."""
        return normalize(self.light)

    def albedo(self, mesh: Mesh) -> np.ndarray:
        return np.asarray(self.materials[mesh.material], dtype=np.float64)


# -- per-frame geometry ---------------------------------------------------------

def mesh_vertices_at(mesh: Mesh, frame: int) -> np.ndarray:
    """World-space vertices of ``mesh`` at a discrete frame."""
    if not 0 <= frame < mesh.frame_count:
        raise IndexError(f"frame {frame} out of range for mesh {mesh.id}")
    local = mesh.vertices if mesh.deformation is None else mesh.deformation[frame]
    return mesh.poses[frame].apply(local)


def world_to_camera(rig: StereoRig, side: str, frame: int) -> RigidTransform:
    return rig.camera_to_world(side, frame).inverse()


def pixel_direction(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit viewing direction in camera coordinates through pixel center (u, v)."""
    d = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return d / np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])


def camera_ray(rig: StereoRig, side: str, frame: int, pixel) -> Ray:
    pose = rig.camera_to_world(side, frame)
    d = pose.rotation @ pixel_direction(rig.intrinsics, float(pixel[0]), float(pixel[1]))
    return Ray(pose.translation.copy(), d / np.linalg.norm(d))


def project(intr: CameraIntrinsics, p_cam):
    """Pinhole projection. Returns ``((u, v), depth)``; the pixel may lie
    outside the image."""
    x, y, z = (float(c) for c in p_cam)
    if not z > 0:
        raise BehindCameraError(f"point with z={z} is not in front of the camera")
    return (intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy), z


# -- document parsing ------------------------------------------------------------

def _num(value, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneParseError("expected a number", path)
    x = float(value)
    if not np.isfinite(x):
        raise SceneParseError("expected a finite number", path)
    return x


def _int(value, path) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SceneParseError("expected an integer", path)
    return value


def _vec(value, n, path) -> list:
    if not isinstance(value, list) or len(value) != n:
        raise SceneParseError(f"expected a list of {n} numbers", path)
    return [_num(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _obj(value, path, required, allowed) -> dict:
    if not isinstance(value, dict):
        raise SceneParseError("expected an object", path)
    for k in value:
        if k not in allowed:
            raise SceneParseError(f"unknown key {k!r}", f"{path}.{k}" if path else k)
    for k in required:
        if k not in value:
            raise SceneParseError(f"missing key {k!r}", f"{path}.{k}" if path else k)
    return value


def _pose(value, path) -> RigidTransform:
    _obj(value, path, ("rotation", "translation"), ("rotation", "translation"))
    q = _vec(value["rotation"], 4, f"{path}.rotation")
    t = _vec(value["translation"], 3, f"{path}.translation")
    if not any(q):
        raise SceneParseError("zero quaternion", f"{path}.rotation")
    return RigidTransform.from_quaternion(q, t)


def _points(value, path) -> np.ndarray:
    if not isinstance(value, list):
        raise SceneParseError("expected a list of points", path)
    return np.array([_vec(p, 3, f"{path}[{i}]") for i, p in enumerate(value)], dtype=np.float64).reshape(-1, 3)


def _poses(value, path) -> list:
    if not isinstance(value, list):
        raise SceneParseError("expected a list of poses", path)
    return [_pose(p, f"{path}[{i}]") for i, p in enumerate(value)]


def parse_scene(text: str) -> Scene:
    """Parse a scene document into a validated :class:`Scene`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneParseError(exc.msg, line=exc.lineno) from None
    _obj(doc, "", ("format", "frames", "camera", "meshes"), _TOP_KEYS)
    if doc["format"] != FORMAT_TAG:
        raise SceneParseError(f"unsupported format {doc['format']!r}", "format")
    frames = _int(doc["frames"], "frames")
    ambient = _num(doc.get("ambient", 0.2), "ambient")
    light = _vec(doc.get("light", [0.0, -1.0, 0.0]), 3, "light")
    if not any(light):
        raise SceneParseError("zero light direction", "light")

    materials = {}
    mats = doc.get("materials", {})
    if not isinstance(mats, dict):
        raise SceneParseError("expected an object", "materials")
    for key, mat in mats.items():
        _obj(mat, f"materials.{key}", ("albedo",), ("albedo",))
        albedo = _vec(mat["albedo"], 3, f"materials.{key}.albedo")
        if any(not 0.0 <= a <= 1.0 for a in albedo):
            raise SceneParseError("albedo outside [0, 1]", f"materials.{key}.albedo")
        materials[key] = tuple(albedo)

    cam = _obj(doc["camera"], "camera", ("intrinsics", "baseline", "poses"), ("intrinsics", "baseline", "poses"))
    ik = ("fx", "fy", "cx", "cy", "width", "height")
    intr = _obj(cam["intrinsics"], "camera.intrinsics", ik, ik)
    try:
        intrinsics = CameraIntrinsics(
            fx=_num(intr["fx"], "camera.intrinsics.fx"),
            fy=_num(intr["fy"], "camera.intrinsics.fy"),
            cx=_num(intr["cx"], "camera.intrinsics.cx"),
            cy=_num(intr["cy"], "camera.intrinsics.cy"),
            width=_int(intr["width"], "camera.intrinsics.width"),
            height=_int(intr["height"], "camera.intrinsics.height"),
        )
        rig = StereoRig(intrinsics, _num(cam["baseline"], "camera.baseline"), _poses(cam["poses"], "camera.poses"))
    except SceneValidationError as exc:
        raise SceneValidationError(f"camera: {exc}") from None

    if not isinstance(doc["meshes"], list):
        raise SceneParseError("expected a list", "meshes")
    meshes = []
    for i, m in enumerate(doc["meshes"]):
        path = f"meshes[{i}]"
        _obj(m, path, ("id", "material", "vertices", "triangles", "poses"), _MESH_KEYS)
        mesh_id = _int(m["id"], f"{path}.id")
        if not isinstance(m["material"], str):
            raise SceneParseError("expected a string", f"{path}.material")
        static = m.get("static", False)
        if not isinstance(static, bool):
            raise SceneParseError("expected true or false", f"{path}.static")
        tris = m["triangles"]
        if not isinstance(tris, list) or any(not isinstance(t, list) or len(t) != 3 for t in tris):
            raise SceneParseError("expected a list of index triples", f"{path}.triangles")
        tri = np.array([[_int(x, f"{path}.triangles[{j}]") for x in t] for j, t in enumerate(tris)], dtype=np.int64)
        deformation = None
        if "deformation" in m:
            d = m["deformation"]
            if not isinstance(d, list):
                raise SceneParseError("expected a list of vertex arrays", f"{path}.deformation")
            frames_d = [_points(f, f"{path}.deformation[{j}]") for j, f in enumerate(d)]
            nv = len(m["vertices"]) if isinstance(m["vertices"], list) else -1
            for j, f in enumerate(frames_d):
                if len(f) != nv:
                    raise SceneValidationError(
                        f"deformation entry {j} has {len(f)} vertices, expected {nv}", mesh_id
                    )
            deformation = np.stack(frames_d) if frames_d else np.zeros((0, max(nv, 0), 3))
        meshes.append(
            Mesh(
                id=mesh_id,
                vertices=_points(m["vertices"], f"{path}.vertices"),
                triangles=tri.reshape(-1, 3),
                material=m["material"],
                poses=_poses(m["poses"], f"{path}.poses"),
                deformation=deformation,
                static=static,
            )
        )
    return Scene(frames=frames, meshes=meshes, rig=rig, light=light, ambient=ambient, materials=materials)


def _pose_doc(p: RigidTransform) -> dict:
    return {"rotation": p.quaternion().tolist(), "translation": p.translation.tolist()}


def scene_to_document(scene: Scene) -> dict:
    intr = scene.rig.intrinsics
    meshes = []
    for m in scene.meshes:
        entry = {
            "id": m.id,
            "material": m.material,
            "static": m.static,
            "vertices": m.vertices.tolist(),
            "triangles": m.triangles.tolist(),
            "poses": [_pose_doc(p) for p in m.poses],
        }
        if m.deformation is not None:
            entry["deformation"] = m.deformation.tolist()
        meshes.append(entry)
    return {
        "format": FORMAT_TAG,
        "frames": scene.frames,
        "ambient": scene.ambient,
        "light": list(scene.light),
        "materials": {k: {"albedo": list(v)} for k, v in scene.materials.items()},
        "camera": {
            "intrinsics": {
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                "width": intr.width, "height": intr.height,
            },
            "baseline": scene.rig.baseline,
            "poses": [_pose_doc(p) for p in scene.rig.poses],
        },
        "meshes": meshes,
    }


def serialize_scene(scene: Scene) -> str:
    return dumps_canonical(scene_to_document(scene))


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as f:
        return parse_scene(f.read())
