"""Command-line entry point: ``sceneflow-gt {generate,render,verify,visualize}``.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .dataset import render_dataset
from .formats import (
    FormatError,
    atomic_write_text,
    depth_to_color,
    flow_to_color,
    read_flo,
    read_pfm,
    vector_to_color,
    write_ppm,
)
from .scene import load_scene
from .scenegen import PRESETS, GenParams, generate_scene
from .verify import CHECKS, Tolerances, verify_dataset, write_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def _non_negative_int(text):
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if n < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return n


def _positive_float(text):
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not x > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return x


def _frame_range(text):
    """``A:B`` (half-open) or a single frame ``A``."""
    try:
        if ":" in text:
            a, b = text.split(":", 1)
            lo, hi = int(a), int(b)
        else:
            lo = int(text)
            hi = lo + 1
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B, got {text!r}")
    if lo < 0 or hi <= lo:
        raise argparse.ArgumentTypeError(f"empty or negative frame range {text!r}")
    return range(lo, hi)


def _non_empty(text):
    if not text:
        raise argparse.ArgumentTypeError("path must not be empty")
    return text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sceneflow-gt", description="Synthetic stereo scene flow ground truth.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a procedural scene document")
    g.add_argument("--preset", choices=PRESETS, default="road")
    g.add_argument("--seed", type=_non_negative_int, default=0)
    g.add_argument("--frames", type=int, default=3)
    g.add_argument("--actors", type=_non_negative_int, default=3)
    g.add_argument("--out", type=_non_empty, default=None,
                   help="output file (default: scene_<preset>_<seed>.json)")

    r = sub.add_parser("render", help="render ground-truth bundles for a scene")
    r.add_argument("scene", type=_non_empty)
    r.add_argument("--out", type=_non_empty, required=True)
    r.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    r.add_argument("--forward-only", action="store_true", help="skip backward bundles")
    r.add_argument("--frame-range", type=_frame_range, default=None, metavar="A:B",
                   help="reference frames to render (half-open)")

    v = sub.add_parser("verify", help="run consistency checks over a dataset")
    v.add_argument("dataset", type=_non_empty)
    v.add_argument("--checks", nargs="+", choices=CHECKS + ("all",), default=["all"])
    v.add_argument("--tol-px", type=_positive_float, default=Tolerances.px)
    v.add_argument("--tol-m", type=_positive_float, default=Tolerances.m)
    v.add_argument("--tol-ego", type=_positive_float, default=Tolerances.ego)
    v.add_argument("--no-gradient-scaling", action="store_true",
                   help="disable the rounding allowance of the sampling checks")
    v.add_argument("--report", type=_non_empty, default=None,
                   help="report directory (default: the dataset directory)")

    z = sub.add_parser("visualize", help="color-code a .flo or .pfm file as .ppm")
    z.add_argument("input", type=_non_empty)
    z.add_argument("--out", type=_non_empty, default=None)
    z.add_argument("--max-mag", type=_positive_float, default=None,
                   help="magnitude mapped to full saturation (default: data maximum)")
    return p


def _generate(args) -> int:
    params = GenParams(preset=args.preset, seed=args.seed, frames=args.frames, actors=args.actors)
    text = generate_scene(params)
    out = args.out or f"scene_{args.preset}_{args.seed}.json"
    atomic_write_text(out, text)
    print(f"generate: wrote {out} ({args.preset}, seed {args.seed}, {args.frames} frames)")
    return EXIT_OK


def _render(args) -> int:
    scene = load_scene(args.scene)
    frames = None if args.frame_range is None else set(args.frame_range)
    start = time.perf_counter()
    written = render_dataset(scene, args.out, threads=args.threads,
                             forward_only=args.forward_only, frames=frames)
    elapsed = time.perf_counter() - start
    print(f"render: wrote {len(written)} bundles to {args.out} "
          f"({args.threads} threads, {elapsed:.1f} s)")
    return EXIT_OK


def _verify(args) -> int:
    checks = CHECKS if "all" in args.checks else tuple(dict.fromkeys(args.checks))
    tol = Tolerances(px=args.tol_px, m=args.tol_m, ego=args.tol_ego,
                     gradient_scaled=not args.no_gradient_scaling)
    if not os.path.isdir(args.dataset):
        raise FileNotFoundError(f"dataset directory {args.dataset!r} does not exist")
    report = verify_dataset(args.dataset, checks, tol)
    text_path, _ = write_report(report, args.report or args.dataset)
    n_fail = len(report.failures())
    status = "PASS" if report.ok else "FAIL"
    print(f"verify: {status} ({len(report.items)} checks, {n_fail} failed, "
          f"{len(report.errors)} errors) report: {text_path}")
    if not report.ok:
        for item in report.failures()[:10]:
            print(f"  failed: frame {item.frame} {item.camera} {item.check}", file=sys.stderr)
        for where, msg in report.errors[:10]:
            print(f"  error: {where}: {msg}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_FAIL


def _default_max(values: np.ndarray) -> float:
    mags = np.linalg.norm(values, axis=-1) if values.ndim == 3 else np.abs(values)
    mags = mags[np.isfinite(mags)]
    top = float(mags.max()) if mags.size else 0.0
    return top if top > 0 else 1.0


def _visualize(args) -> int:
    path = args.input
    ext = os.path.splitext(path)[1].lower()
    if ext == ".flo":
        data = read_flo(path)
        rgb = flow_to_color(data, args.max_mag or _default_max(data))
    elif ext == ".pfm":
        data = read_pfm(path)
        if data.ndim == 2:
            rgb = depth_to_color(data, args.max_mag)
        else:
            rgb = vector_to_color(data, args.max_mag or _default_max(data))
    else:
        raise FormatError(f"unsupported input {path!r}: expected .flo or .pfm")
    out = args.out or os.path.splitext(path)[0] + ".ppm"
    write_ppm(out, rgb)
    print(f"visualize: wrote {out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return EXIT_OK


COMMANDS = {"generate": _generate, "render": _render, "verify": _verify, "visualize": _visualize}


def run(argv=None) -> int:
    """Parse ``argv`` and run the subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"sceneflow-gt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


def main() -> None:
    sys.exit(run())
