"""On-disk dataset layout.

One directory per bundle::

    <root>/<frame>/<side>/<direction>/
        image.ppm depth.pfm disparity.pfm sceneflow.pfm flow.flo
        valid.pgm static.pgm anchor.npy meta.txt

``<frame>`` is the reference frame, zero-padded to six digits. ``anchor.npy``
holds the int32 (mesh id, triangle id) of every pixel's surface anchor, -1
for sky. Float channels are stored as 32-bit.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .formats import (
    FormatError,
    read_flo,
    read_pfm,
    read_pgm,
    read_ppm,
    write_flo,
    write_pfm,
    write_pgm,
    write_ppm,
)
from .geometry import RigidTransform
from .render import (
    DIRECTIONS,
    FLAG_BEHIND,
    FLAG_OUT_OF_IMAGE,
    FLAG_VALID,
    GeometryCache,
    GroundTruthBundle,
    render_bundle,
)
from .scene import SIDES, CameraIntrinsics, Scene

BUNDLE_FILES = (
    "image.ppm", "depth.pfm", "disparity.pfm", "sceneflow.pfm", "flow.flo",
    "valid.pgm", "static.pgm", "anchor.npy", "meta.txt",
)


class MissingDataError(FileNotFoundError):
    pass


def bundle_dir(root, frame: int, side: str, direction: str) -> str:
    return os.path.join(str(root), f"{frame:06d}", side, direction)


def _meta_text(b: GroundTruthBundle) -> str:
    i = b.intrinsics
    lines = [
        f"fx = {i.fx!r}",
        f"fy = {i.fy!r}",
        f"cx = {i.cx!r}",
        f"cy = {i.cy!r}",
        f"width = {i.width}",
        f"height = {i.height}",
        f"baseline = {b.baseline!r}",
        f"frame = {b.frame}",
        f"target_frame = {b.target_frame}",
        f"side = {b.side}",
        f"direction = {b.direction}",
        "ego_motion = " + " ".join(repr(v) for v in b.ego_motion.as_row_major()),
    ]
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> dict:
    meta = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"meta line {n} is not 'key = value'")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def write_bundle(bundle: GroundTruthBundle, root) -> str:
    path = bundle_dir(root, bundle.frame, bundle.side, bundle.direction)
    os.makedirs(path, exist_ok=True)
    write_ppm(os.path.join(path, "image.ppm"), bundle.image)
    write_pfm(os.path.join(path, "depth.pfm"), bundle.depth)
    write_pfm(os.path.join(path, "disparity.pfm"), bundle.disparity)
    write_pfm(os.path.join(path, "sceneflow.pfm"), bundle.scene_flow)
    write_flo(os.path.join(path, "flow.flo"), bundle.optical_flow)
    write_pgm(os.path.join(path, "valid.pgm"), bundle.valid)
    write_pgm(os.path.join(path, "static.pgm"), bundle.static_mask)
    with open(os.path.join(path, "anchor.npy"), "wb") as f:
        np.save(f, np.ascontiguousarray(bundle.anchors, dtype="<i4"), allow_pickle=False)
    with open(os.path.join(path, "meta.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(_meta_text(bundle))
    return path


def _need(path, name):
    p = os.path.join(path, name)
    if not os.path.isfile(p):
        raise MissingDataError(f"missing {name} in {path}")
    return p


def read_meta(path) -> dict:
    with open(_need(path, "meta.txt"), encoding="utf-8") as f:
        meta = parse_meta(f.read())
    if "ego_motion" not in meta:
        raise MissingDataError(f"missing ego_motion in {os.path.join(path, 'meta.txt')}")
    return meta


def read_bundle(path) -> GroundTruthBundle:
    """Load a bundle written by :func:`write_bundle` (float channels stay 32-bit)."""
    meta = read_meta(path)
    depth = read_pfm(_need(path, "depth.pfm"))
    valid = read_pgm(_need(path, "valid.pgm"))
    flow = read_flo(_need(path, "flow.flo"))
    intr = CameraIntrinsics(
        float(meta["fx"]), float(meta["fy"]), float(meta["cx"]), float(meta["cy"]),
        int(meta["width"]), int(meta["height"]),
    )
    flags = np.where(valid, FLAG_VALID, 0).astype(np.uint8)
    behind = valid & ~np.all(np.isfinite(flow), axis=-1)
    flags[behind] |= FLAG_BEHIND
    with np.errstate(invalid="ignore"):
        iu = np.floor(flow[..., 0] + np.arange(intr.width) + 0.5)
        iv = np.floor(flow[..., 1] + np.arange(intr.height)[:, None] + 0.5)
        out = valid & ~behind & ((iu < 0) | (iu >= intr.width) | (iv < 0) | (iv >= intr.height))
    flags[out] |= FLAG_OUT_OF_IMAGE
    image_path = os.path.join(path, "image.ppm")
    if os.path.isfile(image_path):
        image = read_ppm(image_path).astype(np.float32) / 255.0
    else:
        image = np.zeros(depth.shape + (3,), np.float32)
    with open(_need(path, "anchor.npy"), "rb") as f:
        anchors = np.load(f, allow_pickle=False)
    return GroundTruthBundle(
        depth=depth,
        disparity=read_pfm(_need(path, "disparity.pfm")),
        scene_flow=read_pfm(_need(path, "sceneflow.pfm")),
        optical_flow=flow,
        flags=flags,
        anchors=anchors,
        static_mask=read_pgm(_need(path, "static.pgm")),
        image=image,
        ego_motion=RigidTransform.from_row_major([float(x) for x in meta["ego_motion"].split()]),
        side=meta["side"],
        direction=meta["direction"],
        frame=int(meta["frame"]),
        target_frame=int(meta["target_frame"]),
        intrinsics=intr,
        baseline=float(meta["baseline"]),
    )


@dataclass(frozen=True)
class BundleJob:
    frame: int
    side: str
    direction: str


def dataset_jobs(frames: int, forward_only: bool = False) -> list:
    """Every (frame, side, direction) bundle of a ``frames``-frame scene."""
    jobs = []
    for f in range(frames):
        for side in SIDES:
            if f + 1 < frames:
                jobs.append(BundleJob(f, side, "forward"))
            if f >= 1 and not forward_only:
                jobs.append(BundleJob(f, side, "backward"))
    return jobs


def render_dataset(scene: Scene, root, threads: int = 1, forward_only: bool = False,
                   frames=None, progress=None) -> list:
    """Render and write all bundles of ``scene`` below ``root``.

    ``frames`` optionally restricts the reference frames rendered. Returns
    the written bundle directories in job order.
    """
    cache = GeometryCache(scene)
    written = []
    for job in dataset_jobs(scene.frames, forward_only):
        if frames is not None and job.frame not in frames:
            continue
        bundle = render_bundle(scene, job.side, job.frame, job.direction, threads=threads, geometry=cache)
        written.append(write_bundle(bundle, root))
        if progress is not None:
            progress(job)
    return written


def discover(root) -> dict:
    """Map ``(frame, side, direction)`` to bundle directories present below ``root``."""
    found = {}
    if not os.path.isdir(root):
        return found
    for name in sorted(os.listdir(root)):
        if not name.isdigit():
            continue
        for side in SIDES:
            for direction in DIRECTIONS:
                path = bundle_dir(root, int(name), side, direction)
                if os.path.isdir(path):
                    found[(int(name), side, direction)] = path
    return found
