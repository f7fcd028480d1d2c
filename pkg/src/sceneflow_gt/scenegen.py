"""Procedural scene generation from an asset catalog.

Assets live in a catalog keyed by UUID. Each record points into three
separate keyed stores (geometry, material, metadata) so that, e.g., one
geometry can be shared by several differently colored assets.

Randomness comes from counter-based Philox streams keyed by
``(seed, stream name, index)``. Actor ``i`` always draws from its own
stream, so adding an actor never changes the ones before it.
"""
from __future__ import annotations

import json
import math
import uuid as uuidlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from .formats import dumps_canonical
from .geometry import RigidTransform, normalize
from .scene import CameraIntrinsics, Mesh, Scene, StereoRig, serialize_scene

PRESETS = ("road", "orbit", "random-boxes")
REQUIRED_CLASSES = ("ground", "cube", "signpost")
_DOWN = np.array([0.0, 1.0, 0.0])
_MASK64 = (1 << 64) - 1


class CatalogError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class GenParamsError(ValueError):
    pass


# -- catalog -----------------------------------------------------------------------

@dataclass(frozen=True)
class AssetRecord:
    uuid: str
    geometry: str
    material: str
    metadata: str


@dataclass
class Catalog:
    geometry: dict = field(default_factory=dict)
    materials: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)

    def add(self, record: AssetRecord) -> None:
        if record.uuid in self.records:
            raise CatalogError(f"duplicate asset uuid {record.uuid}")
        self.records[record.uuid] = record

    def lookup(self, asset_uuid: str) -> AssetRecord:
        key = _canonical_uuid(asset_uuid)
        try:
            return self.records[key]
        except KeyError:
            raise CatalogError(f"unknown asset uuid {key}") from None

    def resolve(self, record: AssetRecord):
        """Geometry spec, albedo and metadata referenced by ``record``."""
        try:
            return (
                self.geometry[record.geometry],
                tuple(self.materials[record.material]),
                dict(self.metadata[record.metadata]),
            )
        except KeyError as exc:
            raise CatalogError(f"asset {record.uuid} references missing entry {exc.args[0]!r}") from None

    def by_class(self, cls: str) -> list:
        """Records whose metadata ``class`` equals ``cls``, sorted by uuid."""
        out = []
        for key in sorted(self.records):
            rec = self.records[key]
            meta = self.metadata.get(rec.metadata)
            if meta is None:
                raise CatalogError(f"asset {rec.uuid} references missing metadata {rec.metadata!r}")
            if meta.get("class") == cls:
                out.append(rec)
        return out


def _canonical_uuid(value) -> str:
    try:
        return str(uuidlib.UUID(str(value)))
    except ValueError:
        raise CatalogError(f"malformed uuid {value!r}") from None


def catalog_load(text: str) -> Catalog:
    """Parse a catalog document (JSON with ``geometry``, ``materials``,
    ``metadata`` stores and an ``assets`` list)."""
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("catalog must be a JSON object")
    cat = Catalog(
        geometry=dict(doc.get("geometry", {})),
        materials={k: tuple(float(x) for x in v) for k, v in doc.get("materials", {}).items()},
        metadata={k: {str(a): str(b) for a, b in v.items()} for k, v in doc.get("metadata", {}).items()},
    )
    for entry in doc.get("assets", []):
        cat.add(AssetRecord(
            uuid=_canonical_uuid(entry["uuid"]),
            geometry=str(entry["geometry"]),
            material=str(entry["material"]),
            metadata=str(entry["metadata"]),
        ))
    return cat


def catalog_lookup(catalog: Catalog, asset_uuid: str) -> AssetRecord:
    return catalog.lookup(asset_uuid)


def catalog_dump(catalog: Catalog) -> str:
    return dumps_canonical({
        "geometry": catalog.geometry,
        "materials": {k: list(v) for k, v in catalog.materials.items()},
        "metadata": catalog.metadata,
        "assets": [
            {"uuid": r.uuid, "geometry": r.geometry, "material": r.material, "metadata": r.metadata}
            for r in (catalog.records[k] for k in sorted(catalog.records))
        ],
    })


def asset_uuid(name: str) -> str:
    return str(uuidlib.uuid5(uuidlib.NAMESPACE_URL, f"sceneflow-gt/asset/{name}"))


def default_catalog() -> Catalog:
    cat = Catalog(
        geometry={
            "ground-plane": {"primitive": "plane", "divisions": [2, 8]},
            "unit-cube": {"primitive": "box", "size": [1.0, 1.0, 1.0]},
            "sedan": {"primitive": "box", "size": [4.2, 1.5, 1.8]},
            "van": {"primitive": "box", "size": [5.0, 2.2, 2.0]},
            # Fixed sign dimensions: 2.6 m pole, 0.7 m square plate.
            "signpost": {"primitive": "signpost", "pole": [0.08, 2.6], "plate": [0.7, 0.7, 0.04]},
        },
        materials={
            "asphalt": (0.35, 0.35, 0.38),
            "red-paint": (0.8, 0.1, 0.1),
            "blue-paint": (0.1, 0.2, 0.8),
            "white-paint": (0.9, 0.9, 0.9),
            "yellow": (0.9, 0.8, 0.1),
            "sign-metal": (0.7, 0.7, 0.75),
        },
        metadata={
            "ground": {"class": "ground"},
            "vehicle": {"class": "vehicle", "scale": "1"},
            "cube": {"class": "cube", "scale": "1"},
            "signpost": {"class": "signpost", "standard": "fixed-0.7m"},
        },
    )
    for name, geo, mat, meta in [
        ("ground", "ground-plane", "asphalt", "ground"),
        ("sedan-red", "sedan", "red-paint", "vehicle"),
        ("sedan-blue", "sedan", "blue-paint", "vehicle"),
        ("van-white", "van", "white-paint", "vehicle"),
        ("cube-yellow", "unit-cube", "yellow", "cube"),
        ("cube-white", "unit-cube", "white-paint", "cube"),
        ("signpost", "signpost", "sign-metal", "signpost"),
    ]:
        cat.add(AssetRecord(asset_uuid(name), geo, mat, meta))
    return cat


# -- primitives ------------------------------------------------------------------------

def box_mesh(size, offset=(0.0, 0.0, 0.0)):
    """Box with its base centered at the origin (y from -sy to 0), outward winding."""
    sx, sy, sz = (float(s) for s in size)
    lo = np.array([-sx / 2, -sy, -sz / 2]) + offset
    hi = np.array([sx / 2, 0.0, sz / 2]) + offset
    verts, tris = [], []
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        for sign in (-1, 1):
            corners = [(0, 0), (1, 0), (1, 1), (0, 1)]
            if sign < 0:
                corners = corners[::-1]
            base = len(verts)
            for a, b in corners:
                p = np.empty(3)
                p[k] = hi[k] if sign > 0 else lo[k]
                p[i] = hi[i] if a else lo[i]
                p[j] = hi[j] if b else lo[j]
                verts.append(p)
            tris += [[base, base + 1, base + 2], [base, base + 2, base + 3]]
    return np.array(verts), np.array(tris, dtype=np.int64)


def plane_mesh(size_x, size_z, divisions=(1, 1)):
    """Horizontal grid at y = 0 centered on the origin, facing up (-y)."""
    nx, nz = (int(d) for d in divisions)
    xs = np.linspace(-size_x / 2, size_x / 2, nx + 1)
    zs = np.linspace(-size_z / 2, size_z / 2, nz + 1)
    verts = np.array([[x, 0.0, z] for z in zs for x in xs])
    tris = []
    for iz in range(nz):
        for ix in range(nx):
            a = iz * (nx + 1) + ix
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            tris += [[a, b, c], [a, c, d]]
    return verts, np.array(tris, dtype=np.int64)


def signpost_mesh(pole, plate):
    pw, ph = pole
    sw, sh, st = plate
    v1, t1 = box_mesh((pw, ph, pw))
    v2, t2 = box_mesh((sw, sh, st), offset=(0.0, -(ph - sh), -(pw / 2 + st / 2 + 0.01)))
    return np.vstack([v1, v2]), np.vstack([t1, t2 + len(v1)])


def build_geometry(spec: dict, plane_size=(1.0, 1.0)):
    kind = spec.get("primitive")
    if kind == "box":
        return box_mesh(spec["size"])
    if kind == "plane":
        return plane_mesh(plane_size[0], plane_size[1], spec.get("divisions", (1, 1)))
    if kind == "signpost":
        return signpost_mesh(spec["pole"], spec["plate"])
    raise CatalogError(f"unknown geometry primitive {kind!r}")


# -- trajectories -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    origin: tuple
    heading: tuple = (0.0, 0.0, 1.0)
    speed: float = 0.0
    radius: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "arc", "stationary"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if abs(np.linalg.norm(self.heading) - 1.0) > 1e-9:
            raise ValueError("heading must be a unit vector")
        if self.kind == "arc" and not self.radius > 0:
            raise ValueError("arc trajectories need a positive radius")


def heading_rotation(heading) -> np.ndarray:
    """Rotation taking object +x to ``heading`` while keeping +y as close to
    world down as possible."""
    x = normalize(heading)
    y = _DOWN - (_DOWN @ x) * x
    if np.linalg.norm(y) < 1e-12:
        y = np.array([0.0, 0.0, 1.0]) - x[2] * x
    y = normalize(y)
    z = np.cross(x, y)
    return np.column_stack([x, y, z])


def sample_trajectory(spec: TrajectorySpec, frame: int) -> RigidTransform:
    if frame < 0:
        raise ValueError("frame must be non-negative")
    origin = np.asarray(spec.origin, dtype=np.float64)
    heading = np.asarray(spec.heading, dtype=np.float64)
    if spec.kind == "stationary":
        return RigidTransform(heading_rotation(heading), origin)
    if spec.kind == "linear":
        return RigidTransform(heading_rotation(heading), origin + frame * spec.speed * heading)
    # Arc: turn left about the world down axis; the center lies at
    # origin + radius * normalize(heading x down).
    inward = normalize(np.cross(heading, _DOWN))
    center = origin + spec.radius * inward
    a = -inward
    b = normalize(heading - (heading @ a) * a)
    phi = spec.speed * frame / spec.radius
    pos = center + spec.radius * (math.cos(phi) * a + math.sin(phi) * b)
    tangent = -math.sin(phi) * a + math.cos(phi) * b
    return RigidTransform(heading_rotation(tangent), pos)


# -- generation ------------------------------------------------------------------------

@dataclass(frozen=True)
class GenParams:
    preset: str = "road"
    seed: int = 0
    frames: int = 3
    actors: int = 3
    speed_range: tuple = (0.2, 1.0)
    camera_speed: float = 0.8
    intrinsics: CameraIntrinsics = CameraIntrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)
    baseline: float = 0.5
    extent: float = 20.0
    light: tuple = (-0.3, -1.0, -0.4)
    ambient: float = 0.25

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise GenParamsError(f"unknown preset {self.preset!r}")
        if not 0 <= self.seed <= _MASK64:
            raise GenParamsError("seed must be a 64-bit unsigned integer")
        if self.frames < 2:
            raise GenParamsError("frame count must be at least 2")
        if self.actors < 0:
            raise GenParamsError("actor count must be non-negative")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise GenParamsError("speed range must satisfy 0 <= min <= max")
        if self.camera_speed < 0:
            raise GenParamsError("camera speed must be non-negative")
        if not self.extent > 0:
            raise GenParamsError("extent must be positive")
        if not self.baseline > 0:
            raise GenParamsError("baseline must be positive")


def rng_stream(seed: int, name: str, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for ``(seed, name, index)``."""
    tag = (zlib.crc32(name.encode("utf-8")) << 32) | (index & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=(seed & _MASK64) | (tag << 64)))


def look_at(position, target) -> RigidTransform:
    """Camera-to-world pose at ``position`` looking at ``target`` (y down)."""
    z = normalize(np.asarray(target, dtype=np.float64) - position)
    x = normalize(np.cross(_DOWN, z))
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), position)


class _Builder:
    def __init__(self, params: GenParams, catalog: Catalog):
        self.params = params
        self.catalog = catalog
        self.meshes = []
        self.materials = {}

    def pick(self, cls: str, rng=None, fallback: str | None = None) -> AssetRecord:
        options = self.catalog.by_class(cls)
        if not options and fallback:
            options = self.catalog.by_class(fallback)
        if not options:
            raise CatalogError(f"catalog has no asset of class {cls!r}")
        return options[int(rng.integers(len(options)))] if rng is not None else options[0]

    def add(self, record: AssetRecord, poses, static: bool, plane_size=(1.0, 1.0),
            deform=None) -> None:
        spec, albedo, _ = self.catalog.resolve(record)
        verts, tris = build_geometry(spec, plane_size)
        self.materials[record.material] = albedo
        deformation = None if deform is None else np.stack([deform(verts, f) for f in range(len(poses))])
        self.meshes.append(Mesh(
            id=len(self.meshes), vertices=verts, triangles=tris, material=record.material,
            poses=poses, deformation=deformation, static=static,
        ))

    def scene(self, camera_poses) -> Scene:
        p = self.params
        return Scene(
            frames=p.frames, meshes=self.meshes,
            rig=StereoRig(p.intrinsics, p.baseline, camera_poses),
            light=tuple(normalize(p.light)), ambient=p.ambient, materials=self.materials,
        )


def _road(b: _Builder) -> Scene:
    p = b.params
    frames = range(p.frames)
    length = 150.0 + p.frames * p.camera_speed
    side_x = min(6.0, 0.8 * p.extent)
    b.add(b.pick("ground"), [RigidTransform.from_translation(0.0, 0.0, length / 2 - 10.0)] * p.frames,
          static=True, plane_size=(2 * p.extent, length + 20.0))
    sign = b.pick("signpost")
    for k, z in enumerate(np.arange(6.0, length, 12.0)):
        x = side_x if k % 2 == 0 else -side_x
        b.add(sign, [RigidTransform.from_translation(x, 0.0, float(z))] * p.frames, static=True)
    for i in range(p.actors):
        rng = rng_stream(p.seed, "actor", i)
        lane = 3.5 if rng.random() < 0.5 else -3.5
        heading = (0.0, 0.0, 1.0) if lane > 0 else (0.0, 0.0, -1.0)
        z0 = 10.0 + 12.0 * i + rng.uniform(0.0, 6.0)
        speed = rng.uniform(*p.speed_range)
        spec = TrajectorySpec("linear", (lane, 0.0, z0), heading, speed)
        b.add(b.pick("vehicle", rng, fallback="cube"), [sample_trajectory(spec, f) for f in frames], static=False)
    return b.scene([RigidTransform.from_translation(0.0, -1.6, f * p.camera_speed) for f in frames])


def _orbit(b: _Builder) -> Scene:
    p = b.params
    frames = range(p.frames)
    b.add(b.pick("ground"), [RigidTransform.identity()] * p.frames, static=True,
          plane_size=(2 * p.extent, 2 * p.extent))
    ring = 0.3 * p.extent
    for j in range(6):
        rng = rng_stream(p.seed, "static", j)
        ang = 2 * math.pi * (j + rng.uniform(0.0, 0.5)) / 6
        pose = RigidTransform(heading_rotation((math.cos(ang + 1.0), 0.0, math.sin(ang + 1.0))),
                              (ring * math.cos(ang), 0.0, ring * math.sin(ang)))
        b.add(b.pick("signpost" if j % 2 else "cube", rng), [pose] * p.frames, static=True)
    for i in range(p.actors):
        rng = rng_stream(p.seed, "actor", i)
        radius = rng.uniform(0.08, 0.22) * p.extent
        phi0 = rng.uniform(0.0, 2 * math.pi)
        speed = rng.uniform(*p.speed_range)
        amp = rng.uniform(0.05, 0.2)
        phase = rng.uniform(0.0, 2 * math.pi)
        spec = TrajectorySpec(
            "arc", (radius * math.cos(phi0), 0.0, radius * math.sin(phi0)),
            (-math.sin(phi0), 0.0, math.cos(phi0)), speed, radius,
        )

        def pulse(verts, f, amp=amp, phase=phase):
            out = verts.copy()
            out[:, 1] *= 1.0 + amp * math.sin(0.7 * f + phase)
            return out

        b.add(b.pick("cube", rng), [sample_trajectory(spec, f) for f in frames], static=False, deform=pulse)
    cam_radius = 0.6 * p.extent
    theta0 = rng_stream(p.seed, "camera").uniform(0.0, 2 * math.pi)
    poses = []
    for f in frames:
        th = theta0 + f * p.camera_speed / cam_radius
        pos = np.array([cam_radius * math.sin(th), -2.0, -cam_radius * math.cos(th)])
        poses.append(look_at(pos, (0.0, -0.5, 0.0)))
    return b.scene(poses)


def _random_boxes(b: _Builder) -> Scene:
    p = b.params
    frames = range(p.frames)
    cam_rng = rng_stream(p.seed, "camera")
    yaw_rate = cam_rng.uniform(-0.03, 0.03)
    b.add(b.pick("ground"), [RigidTransform.from_translation(0.0, 0.0, 20.0)] * p.frames, static=True,
          plane_size=(2 * p.extent, 2 * p.extent + 40.0))
    near = 8.0 + p.frames * p.camera_speed
    count = int(rng_stream(p.seed, "layout").integers(6, 12))
    for j in range(count):
        rng = rng_stream(p.seed, "static", j)
        pos = (rng.uniform(-0.8, 0.8) * p.extent, 0.0, rng.uniform(near, near + 35.0))
        yaw = rng.uniform(0.0, 2 * math.pi)
        pose = RigidTransform(heading_rotation((math.cos(yaw), 0.0, math.sin(yaw))), pos)
        b.add(b.pick("cube", rng), [pose] * p.frames, static=True)
    for i in range(p.actors):
        rng = rng_stream(p.seed, "actor", i)
        yaw = rng.uniform(0.0, 2 * math.pi)
        origin = (rng.uniform(-8.0, 8.0), 0.0, rng.uniform(near, near + 20.0))
        spec = TrajectorySpec("linear", origin, (math.cos(yaw), 0.0, math.sin(yaw)), rng.uniform(*p.speed_range))
        b.add(b.pick("cube", rng), [sample_trajectory(spec, f) for f in frames], static=False)
    poses = []
    pos = np.array([0.0, -1.5, 0.0])
    for f in frames:
        yaw = yaw_rate * f
        rot = RigidTransform.from_axis_angle((0.0, 1.0, 0.0), yaw).rotation
        poses.append(RigidTransform(rot, pos.copy()))
        pos = pos + p.camera_speed * (rot @ np.array([0.0, 0.0, 1.0]))
    return b.scene(poses)


_PRESET_BUILDERS = {"road": _road, "orbit": _orbit, "random-boxes": _random_boxes}


def build_scene(params: GenParams, catalog: Catalog | None = None) -> Scene:
    catalog = default_catalog() if catalog is None else catalog
    for cls in REQUIRED_CLASSES:
        if not catalog.by_class(cls):
            raise CatalogError(f"catalog has no asset of class {cls!r}")
    for rec in catalog.records.values():
        catalog.resolve(rec)
    return _PRESET_BUILDERS[params.preset](_Builder(params, catalog))


def generate_scene(params: GenParams, catalog: Catalog | None = None) -> str:
    """Scene document text for ``params``; identical inputs give identical bytes."""
    return serialize_scene(build_scene(params, catalog))
