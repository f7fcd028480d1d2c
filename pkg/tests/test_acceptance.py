"""Acceptance criteria, each run at its stated tolerance.

Every test records one PASS/FAIL line, printed again in the terminal summary.
"""
import os
import shutil
import time

import numpy as np
import pytest

from conftest import make_scene, quad, record_criterion, translating_plane_scene
from sceneflow_gt.bvh import build_bvh, intersect_many
from sceneflow_gt.cli import run
from sceneflow_gt.dataset import BUNDLE_FILES, bundle_dir, discover, read_bundle, render_dataset
from sceneflow_gt.formats import decode_flo, decode_pfm, encode_flo, encode_pfm, read_flo, write_flo
from sceneflow_gt.geometry import RigidTransform
from sceneflow_gt.render import render_bundle
from sceneflow_gt.scene import StereoRig, camera_ray, project, world_to_camera
from sceneflow_gt.scenegen import PRESETS, GenParams, build_scene
from sceneflow_gt.verify import (
    DatasetPair,
    ego_motion_check,
    forward_backward_check,
    round_trip_check,
    verify_dataset,
)

pytestmark = pytest.mark.acceptance

SEEDS = range(10)


@pytest.fixture(scope="session")
def road_datasets(tmp_path_factory):
    """Seeds 0-9 of the road preset at 640x480, 3 frames, rendered single-threaded."""
    root = tmp_path_factory.mktemp("road")
    out = {}
    for seed in SEEDS:
        scene = build_scene(GenParams(preset="road", seed=seed, frames=3))
        out[seed] = root / f"seed{seed}"
        render_dataset(scene, out[seed], threads=1)
    return out


def bundles(root):
    return {k: read_bundle(p) for k, p in discover(root).items()}


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            with open(os.path.join(dirpath, name), "rb") as f:
                out[os.path.relpath(os.path.join(dirpath, name), root)] = f.read()
    return out


def test_criterion_1_ego_motion(road_datasets):
    worst, static_px, passed = 0.0, 0, True
    for root in road_datasets.values():
        for b in bundles(root).values():
            res = ego_motion_check(b, tolerance=1e-6)
            static_px += res.evaluated
            worst = max(worst, res.max_error)
            passed &= res.evaluated == int((b.valid & b.static_mask).sum()) and res.max_error < 1e-6
    assert record_criterion(1, "ego-motion consistency", passed,
                            f"max {worst:.3g} m over {static_px} static pixels, tol 1e-6")


def test_criterion_2_forward_backward(road_datasets):
    worst, skipped, passed = 0.0, 0, True
    for root in road_datasets.values():
        b = bundles(root)
        for (frame, side, direction), fwd in b.items():
            if direction != "forward":
                continue
            res = forward_backward_check(fwd, b[frame + 1, side, "backward"], tolerance=1e-4)
            worst = max(worst, res.p99_error)
            skipped += res.skipped
            passed &= res.p99_error < 1e-4 and res.evaluated + res.skipped == int(fwd.valid.sum())
    assert record_criterion(2, "forward-backward consistency", passed,
                            f"worst p99 {worst:.3g} m, {skipped} occluded pixels skipped, tol 1e-4")


def test_criterion_3_round_trip(tmp_path, road_datasets):
    render_dataset(translating_plane_scene(frames=2), tmp_path)
    b = bundles(tmp_path)
    plane_pair = DatasetPair(b[0, "left", "forward"], b[0, "right", "forward"],
                             b[1, "left", "backward"], b[1, "right", "backward"])
    plane = [round_trip_check(plane_pair, start_side=side) for side in ("left", "right")]
    exact = all(r.evaluated > 0 and r.max_error == 0.0 for r in plane)
    failures, worst = 0, 0.0
    for root in road_datasets.values():
        b = bundles(root)
        for t in (0, 1):
            pair = DatasetPair(b[t, "left", "forward"], b[t, "right", "forward"],
                               b[t + 1, "left", "backward"], b[t + 1, "right", "backward"])
            for side in ("left", "right"):
                res = round_trip_check(pair, tolerance=0.5, start_side=side)
                failures += not res.passed
                worst = max(worst, res.p99_error)
    assert record_criterion(3, "round-trip closure", exact and failures == 0,
                            f"plane max {max(r.max_error for r in plane)} px; road worst p99 {worst:.3g} px, "
                            f"{failures} false failures")


def _shift_flow(path, du):
    flow = read_flo(path)
    flow[..., 0] += du
    write_flo(path, flow)


def _shift_ego(path, dx):
    meta = os.path.join(path, "meta.txt")
    lines = open(meta).read().splitlines()
    for i, line in enumerate(lines):
        if line.startswith("ego_motion"):
            values = line.split("=", 1)[1].split()
            values[9] = repr(float(values[9]) + dx)  # translation x
            lines[i] = "ego_motion = " + " ".join(values)
    with open(meta, "w") as f:
        f.write("\n".join(lines) + "\n")


FAULTS = [
    ("flow", (0, "left", "forward")),
    ("flow", (0, "right", "forward")),
    ("flow", (1, "left", "backward")),
    ("flow", (1, "right", "backward")),
    ("flow", (1, "left", "forward")),
    ("ego", (0, "left", "forward")),
    ("ego", (1, "right", "forward")),
    ("ego", (1, "left", "backward")),
    ("ego", (2, "right", "backward")),
    ("ego", (0, "right", "forward")),
]


def test_criterion_4_fault_sensitivity(tmp_path, road_datasets):
    detected = []
    for seed, (kind, key) in zip(SEEDS, FAULTS):
        root = tmp_path / f"fault{seed}"
        shutil.copytree(road_datasets[seed], root)
        path = bundle_dir(root, *key)
        if kind == "flow":
            _shift_flow(os.path.join(path, "flow.flo"), 1.0)
        else:
            _shift_ego(path, 0.01)
        report = verify_dataset(root)
        detected.append(not report.ok)
        shutil.rmtree(root)
    assert record_criterion(4, "fault sensitivity", all(detected),
                            f"{sum(detected)}/{len(detected)} injected faults detected")


def test_criterion_5_bvh():
    rng = np.random.default_rng(2024)
    n = 10_000
    c = rng.uniform(-20, 20, (n, 3))
    v0, v1, v2 = (c + rng.normal(0, 1.0, (n, 3)) for _ in range(3))
    o = rng.uniform(-30, 30, (n, 3))
    d = rng.uniform(-20, 20, (n, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    start = time.perf_counter()
    bvh = build_bvh(v0, v1, v2)
    ids, t, _ = intersect_many(bvh, o, d)
    elapsed = time.perf_counter() - start
    ids_b, t_b, _ = intersect_many(bvh, o, d, brute_force=True)
    hit = ids >= 0
    same_ids = np.array_equal(ids, ids_b)
    dt = float(np.max(np.abs(t[hit] - t_b[hit]))) if hit.any() else 0.0
    ok = same_ids and dt < 1e-9 and elapsed < 10.0 and hit.sum() > 100
    assert record_criterion(5, "BVH correctness", ok,
                            f"{hit.sum()} hits, ids equal {same_ids}, max dt {dt:.3g}, BVH {elapsed:.2f} s")


def test_criterion_6_determinism(tmp_path, road_datasets):
    scene = build_scene(GenParams(preset="road", seed=0, frames=3))
    ref = tree_bytes(road_datasets[0])
    same = True
    for n in (2, 8):
        render_dataset(scene, tmp_path / f"t{n}", threads=n)
        same &= tree_bytes(tmp_path / f"t{n}") == ref
    assert record_criterion("6a", "thread-count determinism", same and len(ref) == 8 * len(BUNDLE_FILES),
                            "threads 1, 2, 8 byte-identical" if same else "outputs differ")


def test_criterion_6_speedup():
    scene = build_scene(GenParams(preset="road", seed=0, frames=2))
    render_bundle(scene, "left", 0, threads=8)  # warm the compiled kernels

    def best(threads):
        times = []
        for _ in range(2):
            start = time.perf_counter()
            render_bundle(scene, "left", 0, threads=threads)
            times.append(time.perf_counter() - start)
        return min(times)

    t1, t8 = best(1), best(8)
    speedup = t1 / t8
    assert record_criterion("6b", "8-thread speedup", speedup >= 3.0,
                            f"{speedup:.2f}x on {os.cpu_count()} CPU(s), needs >= 3x")


def test_criterion_7_geometry(road_datasets):
    # disparity * depth, in double precision straight from the renderer
    worst = 0.0
    for seed in SEEDS:
        scene = build_scene(GenParams(preset="road", seed=seed, frames=2))
        b = render_bundle(scene, "left", 0)
        v = b.valid
        worst = max(worst, float(np.max(np.abs(b.disparity[v] * b.depth[v] - scene.rig.intrinsics.fx * scene.rig.baseline))))
    coupling = worst < 1e-6

    # zero-motion scene: static geometry and a static camera
    intr = GenParams().intrinsics
    I = RigidTransform.identity()
    still = make_scene([quad(0, 100.0, 20.0, [I, I], static=True), quad(1, 2.0, 8.0, [I, I])], [I, I], intr=intr)
    zero = True
    for side in ("left", "right"):
        b = render_bundle(still, side, 0)
        zero &= bool(b.valid.any()) and np.all(b.scene_flow[b.valid] == 0) and np.all(b.optical_flow[b.valid] == 0)

    rng = np.random.default_rng(7)
    pose = RigidTransform.from_axis_angle((0.2, 1.0, -0.1), 0.3, (1.0, -1.5, 4.0))
    rig = StereoRig(intr, 0.54, [pose])
    err = 0.0
    for side in ("left", "right"):
        w2c = world_to_camera(rig, side, 0)
        for _ in range(500):
            px = (rng.uniform(0, intr.width), rng.uniform(0, intr.height))
            ray = camera_ray(rig, side, 0, px)
            (u, v), _ = project(intr, w2c.apply(ray.at(rng.uniform(0.5, 200.0))))
            err = max(err, abs(u - px[0]), abs(v - px[1]))
    inverse = err < 1e-6
    assert record_criterion(7, "geometry identities", coupling and zero and inverse,
                            f"|disp*depth - fx*b| {worst:.3g}, zero-motion exact {zero}, ray/project {err:.3g} px")


def test_criterion_8_format_round_trip():
    rng = np.random.default_rng(8)
    failures = 0
    for i in range(1000):
        h, w = rng.integers(1, 40, 2)
        channels = (1, 3)[i % 2]
        shape = (h, w) if channels == 1 else (h, w, 3)
        data = rng.normal(0, 10 ** rng.uniform(-3, 6), shape).astype(np.float32)
        data[rng.random((h, w)) < 0.1] = np.nan
        data.ravel()[rng.integers(0, data.size)] = rng.choice([np.inf, -np.inf, 0.0, -0.0])
        back = decode_pfm(encode_pfm(data))
        failures += back.tobytes() != data.tobytes()
        flow = data.reshape(h, w, -1)[..., :1].repeat(2, axis=-1)
        flow[..., 1] *= -1
        back = decode_flo(encode_flo(flow))
        failures += back.tobytes() != np.ascontiguousarray(flow).tobytes()
    assert record_criterion(8, "format round trips", failures == 0,
                            f"{failures} mismatches over 1000 PFM and 1000 .flo maps")


def test_criterion_9_end_to_end(tmp_path):
    failed = []
    for preset in PRESETS:
        for seed in SEEDS:
            scene_path = tmp_path / f"{preset}_{seed}.json"
            out = tmp_path / f"{preset}_{seed}"
            codes = (
                run(["generate", "--preset", preset, "--seed", str(seed), "--out", str(scene_path)]),
                run(["render", str(scene_path), "--out", str(out)]),
                run(["verify", str(out), "--checks", "all"]),
            )
            if codes != (0, 0, 0):
                failed.append((preset, seed, codes))
            shutil.rmtree(out)
    assert record_criterion(9, "end-to-end generate/render/verify", not failed,
                            f"{3 * len(SEEDS) - len(failed)}/{3 * len(SEEDS)} runs exit 0"
                            + (f", failures {failed}" if failed else ""))
