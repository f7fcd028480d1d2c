"""Synthetic stereo scene flow ground truth: generation, rendering, verification."""
from .geometry import RigidTransform, Ray, compose, rigid_inverse, transform_point
from .render import GroundTruthBundle, SurfaceAnchor, render_bundle, scene_flow_at
from .scene import CameraIntrinsics, Mesh, Scene, StereoRig, load_scene, parse_scene, serialize_scene
from .scenegen import GenParams, build_scene, generate_scene
from .dataset import read_bundle, render_dataset, write_bundle
from .verify import (
    CheckResult,
    DatasetPair,
    Tolerances,
    ego_motion_check,
    forward_backward_check,
    round_trip_check,
    verify_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "RigidTransform", "Ray", "compose", "rigid_inverse", "transform_point",
    "GroundTruthBundle", "SurfaceAnchor", "render_bundle", "scene_flow_at",
    "CameraIntrinsics", "Mesh", "Scene", "StereoRig", "load_scene", "parse_scene", "serialize_scene",
    "GenParams", "build_scene", "generate_scene",
    "read_bundle", "render_dataset", "write_bundle",
    "CheckResult", "DatasetPair", "Tolerances",
    "ego_motion_check", "forward_backward_check", "round_trip_check", "verify_dataset",
]
