"""Automated consistency checks over rendered ground truth.

* round trip: left(t) -> left(t+1) -> right(t+1) -> right(t) -> left(t) using
  forward flow, disparity, backward flow and disparity again, plus the
  mirrored cycle starting on the right so every optical flow map is read;
* forward-backward: the backward motion at a pixel's forward target must
  cancel its forward motion;
* ego-motion: on static geometry the scene flow must equal the motion
  induced by the camera's own movement.

Every hop samples the next map at the nearest pixel (round half up), which
moves the sample point by at most ``0.5 * sqrt(2)`` px. With gradient
scaling on, the sampling checks subtract a per-pixel rounding allowance
``0.5 * sqrt(2) * sum(G)`` from the raw error, where ``G`` is the local
finite-difference gradient of each sampled field at the sampled pixel,
measured only between neighbors on the same triangle (so depth edges do not
inflate it). They then gate on the 99th percentile of what remains.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import MissingDataError, discover, read_bundle
from .formats import FormatError
from .render import FLAG_VALID, GroundTruthBundle

CHECKS = ("roundtrip", "fb", "ego")
ROUNDING_HOP = 0.5 * math.sqrt(2.0)


class IncompleteInputError(ValueError):
    pass


class CheckInputError(ValueError):
    pass


@dataclass(frozen=True)
class Tolerances:
    px: float = 0.5
    m: float = 1e-4
    ego: float = 1e-6
    gradient_scaled: bool = True


@dataclass(eq=False)
class CheckResult:
    name: str
    error_map: np.ndarray
    evaluated: int
    skipped: int
    max_error: float
    mean_error: float
    p99_error: float
    tolerance: float
    statistic: str = "p99"
    # largest local gradient seen by the rounding allowance (0 when unscaled)
    lipschitz: float = 0.0

    @property
    def passed(self) -> bool:
        value = self.max_error if self.statistic == "max" else self.p99_error
        return bool(value <= self.tolerance)


def _result(name, err, evaluated_mask, start_mask, tolerance, statistic="p99", lipschitz=0.0) -> CheckResult:
    err = np.asarray(err, dtype=np.float64)
    error_map = np.full(err.shape, np.nan)
    error_map[evaluated_mask] = err[evaluated_mask]
    values = err[evaluated_mask]
    n = int(values.size)
    if n:
        stats = float(values.max()), float(values.mean()), float(np.percentile(values, 99))
    else:
        stats = (math.nan, math.nan, math.nan)
    return CheckResult(
        name=name, error_map=error_map, evaluated=n,
        skipped=int(np.count_nonzero(start_mask)) - n,
        max_error=stats[0], mean_error=stats[1], p99_error=stats[2],
        tolerance=float(tolerance), statistic=statistic, lipschitz=float(lipschitz),
    )


def round_half_up(x):
    """Nearest integer with halves rounded up; NaN maps far outside any image."""
    r = np.floor(np.asarray(x, dtype=np.float64) + 0.5)
    return np.nan_to_num(r, nan=-2.0**40).clip(-2.0**40, 2.0**40).astype(np.int64)


def local_gradient(values, anchors, valid=None) -> np.ndarray:
    """Per-pixel max norm of finite differences to 4-neighbors on the same
    (mesh, triangle) anchor; 0 where no such neighbor exists.

    ``values`` is ``(H, W)`` or ``(H, W, C)``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[..., None]
    ok = np.all(np.isfinite(v), axis=-1) & (anchors[..., 0] >= 0)
    if valid is not None:
        ok &= valid
    grad = np.zeros(ok.shape)
    for axis in (0, 1):
        a = [slice(None), slice(None)]
        b = [slice(None), slice(None)]
        a[axis] = slice(None, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        same = ok[a] & ok[b] & np.all(anchors[a] == anchors[b], axis=-1)
        with np.errstate(invalid="ignore"):
            diff = np.where(same, np.linalg.norm(v[b] - v[a], axis=-1), 0.0)
        np.maximum(grad[a], diff, out=grad[a])
        np.maximum(grad[b], diff, out=grad[b])
    return grad


def field_lipschitz(values, anchors, valid=None) -> float:
    """Largest same-triangle finite difference of ``values`` (a global bound)."""
    return float(local_gradient(values, anchors, valid).max(initial=0.0))


def _sample(array, iu, iv, ok):
    """``array[iv, iu]`` where ``ok``; indices elsewhere are clamped."""
    h, w = array.shape[:2]
    return array[np.where(ok, iv, 0).clip(0, h - 1), np.where(ok, iu, 0).clip(0, w - 1)]


def _inside(iu, iv, shape):
    h, w = shape[:2]
    return (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)


def _valid(bundle: GroundTruthBundle) -> np.ndarray:
    return (bundle.flags & FLAG_VALID) != 0


def _require(bundle, name):
    if bundle is None:
        raise IncompleteInputError(f"missing {name}")
    return bundle


@dataclass
class DatasetPair:
    """The four bundles spanning frames t and t+1 of a stereo rig."""

    left_forward: Optional[GroundTruthBundle]
    right_forward: Optional[GroundTruthBundle]
    left_backward: Optional[GroundTruthBundle]
    right_backward: Optional[GroundTruthBundle]

    def validate(self):
        lf = _require(self.left_forward, "left forward bundle (flow and disparity at t)")
        rf = _require(self.right_forward, "right forward bundle (disparity at t)")
        lb = _require(self.left_backward, "left backward bundle (disparity at t+1)")
        rb = _require(self.right_backward, "right backward bundle (flow at t+1)")
        shapes = {b.depth.shape for b in (lf, rf, lb, rb)}
        if len(shapes) != 1:
            raise CheckInputError("bundles do not share image dimensions")
        t = lf.frame
        if not (rf.frame == t and lb.frame == t + 1 and rb.frame == t + 1
                and lb.target_frame == t and rb.target_frame == t and lf.target_frame == t + 1):
            raise CheckInputError("bundle frame indices are not consistent with a (t, t+1) pair")
        return lf, rf, lb, rb


def round_trip_check(pair: DatasetPair, tolerance: float = 0.5, gradient_scaled: bool = True,
                     start_side: str = "left") -> CheckResult:
    """Close the stereo/temporal cycle for every valid pixel of ``start_side`` at t.

    The left cycle reads the left forward and right backward flow, the right
    cycle the other two. Hops that leave the image, land on an invalid pixel,
    or land on a different mesh than the start pixel (occlusion) are skipped.
    """
    lf, rf, lb, rb = pair.validate()
    if start_side == "right":
        lf, rf, lb, rb = rf, lf, rb, lb
        sign = -1.0  # right to left adds the disparity
    elif start_side == "left":
        sign = 1.0
    else:
        raise ValueError(f"unknown side {start_side!r}")
    h, w = lf.depth.shape
    v0, u0 = np.mgrid[0:h, 0:w].astype(np.float64)
    mesh0 = lf.anchors[..., 0]
    flow = np.asarray(lf.optical_flow, dtype=np.float64)
    start = _valid(lf)
    ok = start & np.all(np.isfinite(flow), axis=-1)

    allowance = np.zeros((h, w))
    lip = 0.0

    def hop(ok, pu, pv, target: GroundTruthBundle, values):
        nonlocal lip
        iu, iv = round_half_up(pu), round_half_up(pv)
        ok = ok & _inside(iu, iv, (h, w))
        ok &= _sample(_valid(target), iu, iv, ok)
        ok &= _sample(target.anchors[..., 0], iu, iv, ok) == mesh0
        sampled = np.asarray(_sample(values, iu, iv, ok), dtype=np.float64)
        fin = np.isfinite(sampled) if sampled.ndim == 2 else np.all(np.isfinite(sampled), axis=-1)
        if gradient_scaled:
            grad = local_gradient(values, target.anchors, _valid(target))
            lip = max(lip, float(grad.max(initial=0.0)))
            allowance[:] += ROUNDING_HOP * _sample(grad, iu, iv, ok)
        return ok & fin, sampled

    p1u, p1v = u0 + flow[..., 0], v0 + flow[..., 1]
    ok, d1 = hop(ok, p1u, p1v, lb, lb.disparity)
    p2u, p2v = p1u - sign * d1, p1v
    ok, fb = hop(ok, p2u, p2v, rb, rb.optical_flow)
    p3u, p3v = p2u + fb[..., 0], p2v + fb[..., 1]
    ok, d3 = hop(ok, p3u, p3v, rf, rf.disparity)
    p4u, p4v = p3u + sign * d3, p3v
    with np.errstate(invalid="ignore"):
        err = np.hypot(p4u - u0, p4v - v0)
        if gradient_scaled:
            err = np.maximum(err - allowance, 0.0)
    return _result("roundtrip", err, ok, start, tolerance, lipschitz=lip)


def forward_backward_check(fwd: GroundTruthBundle, bwd: GroundTruthBundle, tolerance: float = 1e-4,
                           gradient_scaled: bool = True) -> CheckResult:
    """Forward motion plus the backward motion at its target pixel must vanish."""
    if fwd.direction != "forward" or bwd.direction != "backward":
        raise CheckInputError("expected a forward bundle and a backward bundle")
    if fwd.side != bwd.side:
        raise CheckInputError("bundles belong to different cameras")
    if bwd.frame != fwd.target_frame or bwd.target_frame != fwd.frame:
        raise CheckInputError(
            f"backward bundle spans {bwd.frame}->{bwd.target_frame}, expected {fwd.target_frame}->{fwd.frame}"
        )
    if fwd.depth.shape != bwd.depth.shape:
        raise CheckInputError("bundles do not share image dimensions")
    h, w = fwd.depth.shape
    v0, u0 = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = np.asarray(fwd.optical_flow, dtype=np.float64)
    start = _valid(fwd)
    ok = start & np.all(np.isfinite(flow), axis=-1)
    iu, iv = round_half_up(u0 + flow[..., 0]), round_half_up(v0 + flow[..., 1])
    ok &= _inside(iu, iv, (h, w))
    ok &= _sample(_valid(bwd), iu, iv, ok)
    ok &= np.all(_sample(bwd.anchors, iu, iv, ok) == fwd.anchors, axis=-1)
    m_f = np.asarray(fwd.scene_flow, dtype=np.float64)
    m_b = np.asarray(_sample(bwd.scene_flow, iu, iv, ok), dtype=np.float64)
    with np.errstate(invalid="ignore"):
        err = np.linalg.norm(m_f + m_b, axis=-1)
    ok &= np.isfinite(err)
    lip = 0.0
    if gradient_scaled:
        grad = local_gradient(bwd.scene_flow, bwd.anchors, _valid(bwd))
        lip = float(grad.max(initial=0.0))
        with np.errstate(invalid="ignore"):
            err = np.maximum(err - ROUNDING_HOP * _sample(grad, iu, iv, ok), 0.0)
    return _result("fb", err, ok, start, tolerance, lipschitz=lip)


def ego_motion_check(bundle: GroundTruthBundle, static_mask=None, tolerance: float = 1e-6) -> CheckResult:
    """On static pixels, depth plus scene flow must follow the ego-motion exactly."""
    if bundle.ego_motion is None:
        raise IncompleteInputError("bundle carries no ego-motion")
    static = bundle.static_mask if static_mask is None else np.asarray(static_mask, dtype=bool)
    intr = bundle.intrinsics
    h, w = bundle.depth.shape
    v0, u0 = np.mgrid[0:h, 0:w].astype(np.float64)
    d = np.asarray(bundle.depth, dtype=np.float64)
    q = np.stack([(u0 - intr.cx) / intr.fx * d, (v0 - intr.cy) / intr.fy * d, d], axis=-1)
    q1 = q + np.asarray(bundle.scene_flow, dtype=np.float64)
    expected = bundle.ego_motion.apply(q.reshape(-1, 3)).reshape(h, w, 3)
    with np.errstate(invalid="ignore"):
        err = np.linalg.norm(q1 - expected, axis=-1)
    start = _valid(bundle)
    ok = start & static & np.isfinite(err)
    return _result("ego", err, ok, start, tolerance, statistic="max")


# -- dataset level ------------------------------------------------------------------

@dataclass
class ReportItem:
    frame: int
    camera: str
    check: str
    result: CheckResult


@dataclass
class VerificationReport:
    root: str
    items: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.items) and not self.errors and all(i.result.passed for i in self.items)

    def failures(self) -> list:
        return [i for i in self.items if not i.result.passed]

    def summary_lines(self) -> list:
        lines = ["frame\tcamera\tcheck\tevaluated\tskipped\tmean\tp99\tmax\ttolerance\tstatus"]
        for i in sorted(self.items, key=lambda i: (i.frame, i.camera, i.check)):
            r = i.result
            lines.append(
                f"{i.frame}\t{i.camera}\t{i.check}\t{r.evaluated}\t{r.skipped}\t"
                f"{r.mean_error:.6g}\t{r.p99_error:.6g}\t{r.max_error:.6g}\t{r.tolerance:.6g}\t"
                f"{'pass' if r.passed else 'FAIL'}"
            )
        return lines

    def text(self) -> str:
        out = [f"verification report for {self.root}"]
        for i in sorted(self.items, key=lambda i: (i.frame, i.camera, i.check)):
            r = i.result
            gate = "max" if r.statistic == "max" else "p99"
            value = r.max_error if r.statistic == "max" else r.p99_error
            out.append(
                f"frame {i.frame} {i.camera} {i.check}: {'pass' if r.passed else 'FAIL'} "
                f"({gate} {value:.6g} vs tolerance {r.tolerance:.6g}; "
                f"{r.evaluated} evaluated, {r.skipped} skipped)"
            )
        for where, msg in self.errors:
            out.append(f"error {where}: {msg}")
        n_fail = len(self.failures())
        out.append(
            f"overall: {'PASS' if self.ok else 'FAIL'} "
            f"({len(self.items)} checks, {n_fail} failed, {len(self.errors)} errors)"
        )
        return "\n".join(out) + "\n"

    def write(self, text_path, summary_path=None) -> None:
        with open(text_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.text())
        if summary_path is not None:
            with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
                f.write("\n".join(self.summary_lines()) + "\n")


def verify_dataset(root, checks=CHECKS, tolerances: Tolerances = Tolerances()) -> VerificationReport:
    """Run the selected checks over every bundle and frame pair below ``root``.

    Unreadable or missing bundles are recorded as report errors. When no
    backward bundle exists at all (forward-only rendering), the round-trip
    and forward-backward checks are skipped.
    """
    checks = set(CHECKS if checks in ("all", None) else checks)
    unknown = checks - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    report = VerificationReport(str(root))
    found = discover(root)
    if not found:
        report.errors.append(("dataset", f"no bundles found below {root}"))
        return report

    cache = {}

    def load(key):
        if key not in cache:
            path = found.get(key)
            if path is None:
                cache[key] = None
                report.errors.append((f"frame {key[0]} {key[1]}/{key[2]}", "bundle missing"))
            else:
                try:
                    cache[key] = read_bundle(path)
                except (MissingDataError, FormatError, ValueError, KeyError, OSError) as exc:
                    cache[key] = None
                    report.errors.append((f"frame {key[0]} {key[1]}/{key[2]}", str(exc)))
        return cache[key]

    frames = sorted({k[0] for k in found})
    forward_only = not any(k[2] == "backward" for k in found)

    if "ego" in checks:
        for key in sorted(found):
            b = load(key)
            if b is not None:
                report.items.append(ReportItem(key[0], f"{key[1]}/{key[2]}", "ego", ego_motion_check(b, tolerance=tolerances.ego)))

    if not forward_only:
        for t in frames[:-1]:
            if t + 1 not in frames:
                continue
            if "fb" in checks:
                for side in ("left", "right"):
                    fwd, bwd = load((t, side, "forward")), load((t + 1, side, "backward"))
                    if fwd is None or bwd is None:
                        continue
                    try:
                        res = forward_backward_check(fwd, bwd, tolerances.m, tolerances.gradient_scaled)
                    except CheckInputError as exc:
                        report.errors.append((f"frame {t} {side}", str(exc)))
                        continue
                    report.items.append(ReportItem(t, side, "fb", res))
            if "roundtrip" in checks:
                pair = DatasetPair(load((t, "left", "forward")), load((t, "right", "forward")),
                                   load((t + 1, "left", "backward")), load((t + 1, "right", "backward")))
                for side in ("left", "right"):
                    try:
                        res = round_trip_check(pair, tolerances.px, tolerances.gradient_scaled, side)
                    except (IncompleteInputError, CheckInputError) as exc:
                        report.errors.append((f"frame {t} stereo", str(exc)))
                        break
                    report.items.append(ReportItem(t, f"stereo/{side}", "roundtrip", res))
    return report


def write_report(report: VerificationReport, directory) -> tuple:
    """Write ``report.txt`` and ``summary.tsv`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    text_path = os.path.join(directory, "report.txt")
    summary_path = os.path.join(directory, "summary.tsv")
    report.write(text_path, summary_path)
    return text_path, summary_path
