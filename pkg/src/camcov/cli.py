"""Command-line frontend: ``camcov generate|compute|verify|subrec``.

Exit codes:
    0  success
    2  bad or inconsistent flags
    3  input/output failure (missing file, unreadable or invalid scene)
    4  a pipeline stage failed (the message names the stage)
    5  ``verify`` threshold failure

Progress goes to stderr. Data goes to files, or to stdout as a single JSON
line with ``--porcelain``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import scene as scene_mod
from .covariance import compute_covariance, default_threads, psd_violations
from .errors import CamcovError, SceneError, StageError
from .nullspace import compute_nullspace, nullspace_residual
from .oracle import SIZE_GUARD, error_metric, pseudoinverse_covariance
from .projection import assemble_jacobian
from .scene import CAM_DOF

log = logging.getLogger("camcov")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_STAGE, EXIT_THRESHOLD = 0, 2, 3, 4, 5

ORACLE_ERR_TOL = 1e-4
NULLSPACE_TOL = 1e-8
# the error-vs-size sweep needs the full covariance; skip it above this size
SWEEP_MAX_CAMERAS = 2000

_TRIU = np.triu_indices(CAM_DOF)
TRIU_COLUMNS = [f"s{i}{j}" for i, j in zip(*_TRIU)]


class UsageError(Exception):
    pass


def _write_text(path, text):
    if path == "-":
        sys.stdout.write(text)
        return
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def covariance_document(blocks, diagnostics, extra=None) -> dict:
    cams = []
    for i, b in enumerate(blocks):
        entry = {"id": i, "cov": b[_TRIU].tolist(), "trace": float(np.trace(b))}
        if extra:
            entry.update({k: v[i] for k, v in extra.items()})
        cams.append(entry)
    return {"cameras": cams, "diagnostics": _jsonable(diagnostics)}


def covariance_csv(blocks) -> str:
    from io import StringIO
    buf = StringIO()
    w = csv.writer(buf)
    w.writerow(["id"] + TRIU_COLUMNS)
    for i, b in enumerate(blocks):
        w.writerow([i] + [repr(float(x)) for x in b[_TRIU]])
    return buf.getvalue()


def blocks_from_document(doc) -> np.ndarray:
    out = np.zeros((len(doc["cameras"]), CAM_DOF, CAM_DOF))
    for i, c in enumerate(doc["cameras"]):
        out[i][_TRIU] = c["cov"]
        out[i] = out[i] + np.triu(out[i], 1).T
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_covariance(path, fmt, blocks, diagnostics, extra=None):
    if fmt == "csv":
        _write_text(path, covariance_csv(blocks))
    else:
        _write_text(path, json.dumps(covariance_document(blocks, diagnostics, extra)) + "\n")


def _load(path):
    try:
        return scene_mod.load_reconstruction(path)
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror or e}") from e


def _threads(args):
    return args.threads if args.threads is not None else default_threads()


def _summary(args, payload):
    if args.porcelain:
        print(json.dumps(_jsonable(payload)))


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    if args.cube:
        if args.cams is not None or args.pts is not None or args.desk:
            raise UsageError("--cube cannot be combined with --cams/--pts/--desk")
        rec = scene_mod.generate_cube_scene(args.seed, args.noise)
    elif args.desk:
        if args.cams is not None or args.pts is not None:
            raise UsageError("--desk cannot be combined with --cams/--pts")
        rec = scene_mod.generate_desk_scene(args.desk, args.seed, args.noise)
    else:
        if args.cams is None or args.pts is None:
            raise UsageError("give --cube, --desk NAME, or both --cams and --pts")
        try:
            rec = scene_mod.generate_random_scene(args.cams, args.pts, args.visibility, args.seed, args.noise)
        except ValueError as e:
            raise UsageError(str(e)) from e
    scene_mod.save_reconstruction(rec, args.output)
    log.info("wrote %s (n=%d, m=%d, t=%d)", args.output, rec.n, rec.m, rec.t)
    _summary(args, {"command": "generate", "output": args.output, "n": rec.n, "m": rec.m, "t": rec.t})
    return EXIT_OK


def cmd_compute(args) -> int:
    rec = _load(args.input)
    log.info("loaded %s (n=%d, m=%d, t=%d)", args.input, rec.n, rec.m, rec.t)
    t0 = time.perf_counter()
    res = compute_covariance(rec, threads=_threads(args), keep_inverse=False)
    elapsed = time.perf_counter() - t0
    res.diagnostics["seconds"] = elapsed
    log.info("covariance computed in %.2f s", elapsed)
    _write_covariance(args.output, args.format, res.cameras, res.diagnostics)
    _summary(args, {"command": "compute", "output": args.output, "n": rec.n, "seconds": elapsed,
                    "min_pivot": res.diagnostics["min_pivot"], "rcond": res.diagnostics["rcond"]})
    return EXIT_OK


def _corrupt(blocks):
    # test hook: make camera 0's block indefinite and far from the reference
    blocks = blocks.copy()
    blocks[0] = blocks[0] - 2.0 * np.trace(blocks[0]) * np.eye(CAM_DOF)
    return blocks


def cmd_verify(args) -> int:
    rec = _load(args.input)
    res = compute_covariance(rec, threads=_threads(args), keep_inverse=False)
    blocks = _corrupt(res.cameras) if args.inject_fault else res.cameras
    checks = {}

    J = assemble_jacobian(rec)
    resid = nullspace_residual(J, compute_nullspace(rec, J))
    checks["nullspace_residual"] = (resid, resid < NULLSPACE_TOL)

    bad = psd_violations(blocks)
    checks["psd"] = (len(bad), not bad)

    asym = float(np.abs(blocks - np.swapaxes(blocks, 1, 2)).max())
    checks["symmetry"] = (asym, asym <= 1e-12 * float(np.abs(blocks).max()))

    table = None
    if rec.n_params <= SIZE_GUARD:
        oracle = pseudoinverse_covariance(rec)
        rep = error_metric(oracle.cameras, blocks, rec)
        checks["oracle_mean_err"] = (rep.mean, rep.mean < ORACLE_ERR_TOL)
        table = rep.per_camera
        if args.err_csv:
            _write_text(args.err_csv, "camera,err\n" + "".join(f"{i},{e!r}\n" for i, e in enumerate(table.tolist())))
    else:
        log.warning("oracle skipped: %d parameters exceed the dense guard (%d); "
                    "running invariant checks only", rec.n_params, SIZE_GUARD)

    failed = [k for k, (_, ok) in checks.items() if not ok]
    if not args.porcelain:
        if table is not None:
            print("camera  err")
            for i, e in enumerate(table):
                print(f"{i:6d}  {e:.3e}")
        for k, (v, ok) in checks.items():
            print(f"{'PASS' if ok else 'FAIL'}  {k} = {v:.3e}" if isinstance(v, float)
                  else f"{'PASS' if ok else 'FAIL'}  {k} = {v}")
    _summary(args, {"command": "verify", "passed": not failed, "failed": failed,
                    "oracle_skipped": table is None,
                    "checks": {k: v for k, (v, _) in checks.items()}})
    if failed:
        log.error("verification failed: %s", ", ".join(failed))
        return EXIT_THRESHOLD
    return EXIT_OK


def _parse_ks(text):
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not ks or min(ks) < 2:
        raise argparse.ArgumentTypeError("sweep sizes must be integers >= 2")
    return ks


def cmd_subrec(args) -> int:
    from .subrec import approximate_covariances, error_sweep

    if args.k < 2:
        raise UsageError("--k must be at least 2")
    if args.decompositions < 1:
        raise UsageError("--decompositions must be at least 1")
    rec = _load(args.input)
    threads = _threads(args)
    payload = {"command": "subrec", "n": rec.n, "k": args.k, "decompositions": args.decompositions}
    t0 = time.perf_counter()
    agg = approximate_covariances(rec, args.k, args.decompositions, args.seed, threads=threads)
    payload["seconds"] = time.perf_counter() - t0
    payload["subsets"] = len(agg.plan.subsets)
    payload["mean_trace"] = float(agg.traces.mean())
    log.info("%d sub-reconstructions in %.2f s", len(agg.plan.subsets), payload["seconds"])
    if args.output:
        diag = {"k": args.k, "decompositions": args.decompositions, "seed": args.seed,
                "subsets": len(agg.plan.subsets)}
        _write_covariance(args.output, args.format, agg.cameras, diag,
                          extra={"subset": agg.source.tolist()})
        payload["output"] = args.output

    if args.sweep_csv:
        if rec.n > SWEEP_MAX_CAMERAS:
            log.warning("error sweep skipped: %d cameras exceed %d", rec.n, SWEEP_MAX_CAMERAS)
        else:
            sw = error_sweep(rec, args.sweep, args.subsets, args.seed, threads=threads)
            sw.write_csv(args.sweep_csv)
            summary = sw.summary()
            payload["sweep"] = {str(k): v for k, v in summary.items()}
            payload["upper_bound_violations"] = len(sw.upper_bound_violations())
            if not args.porcelain:
                print("k     mean_rel   median_rel  mean_abs   median_abs")
                for k, s in summary.items():
                    print(f"{k:<5d} {s['mean_relative']:.3e}  {s['median_relative']:.3e}   "
                          f"{s['mean_absolute']:.3e}  {s['median_absolute']:.3e}")
    _summary(args, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $CAMCOV_THREADS or all cores)")
    common.add_argument("--porcelain", action="store_true", help="print one JSON summary line on stdout")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress output")

    ap = argparse.ArgumentParser(prog="camcov", description="Camera covariances of bundle-adjusted scenes.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic scene")
    g.add_argument("--cube", action="store_true", help="6-camera cube scene")
    g.add_argument("--desk", choices=sorted(scene_mod.DESK_DATASETS), help="desk-scale dataset analog")
    g.add_argument("--cams", type=int)
    g.add_argument("--pts", type=int)
    g.add_argument("--visibility", type=float, default=0.1, help="fraction of cameras seeing a point")
    g.add_argument("--noise", type=float, default=0.0, help="pixel noise std")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("compute", parents=[common], help="camera covariances of a scene")
    c.add_argument("input")
    c.add_argument("-o", "--output", required=True, help="output file, or - for stdout")
    c.add_argument("--format", choices=("json", "csv"), default="json")
    c.set_defaults(func=cmd_compute)

    v = sub.add_parser("verify", parents=[common], help="check covariances against the dense reference")
    v.add_argument("input")
    v.add_argument("--err-csv", metavar="PATH", help="write the per-camera error table as CSV")
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("subrec", parents=[common], help="covariances from sub-reconstructions")
    s.add_argument("input")
    s.add_argument("-o", "--output", help="aggregated covariance file")
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.add_argument("--k", type=int, default=100, help="cameras per sub-reconstruction")
    s.add_argument("--decompositions", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sweep-csv", help="also run the error-vs-size sweep and write its CSV here")
    s.add_argument("--sweep", type=_parse_ks, default=[5, 10, 20, 40, 80], help="sizes, e.g. 5,10,20")
    s.add_argument("--subsets", type=int, default=25, help="random sub-reconstructions per size")
    s.set_defaults(func=cmd_subrec)
    return ap


def _configure_logging(quiet):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("camcov: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _configure_logging(args.quiet)
    if args.threads is not None and args.threads < 1:
        ap.error("--threads must be positive")
    try:
        return args.func(args)
    except UsageError as e:
        ap.error(str(e))
    except (OSError, SceneError) as e:
        log.error("%s", e)
        return EXIT_IO
    except StageError as e:
        log.error("stage %s failed: %s", e.stage, e.cause)
        return EXIT_STAGE
    except CamcovError as e:
        log.error("%s", e)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
