"""Full covariance of a large synthetic scene; prints one JSON line.

    python bench/scale_run.py [--cams 1000 --pts 100000 --visibility 0.006] [--trace]

``--trace`` records the peak of traced (numpy + Python) allocations, which
is compared against the size of the reduced camera system.
"""
import argparse
import json
import resource
import time
import tracemalloc

from camcov.covariance import GAUGE_DIM, compute_covariance
from camcov.scene import CAM_DOF, PT_DOF, generate_random_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cams", type=int, default=1000)
    ap.add_argument("--pts", type=int, default=100000)
    ap.add_argument("--visibility", type=float, default=0.006)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--trace", action="store_true")
    args = ap.parse_args()

    rec = generate_random_scene(args.cams, args.pts, args.visibility, seed=args.seed, noise_px=0.5)
    if args.trace:
        tracemalloc.start()
    t0 = time.perf_counter()
    res = compute_covariance(rec, threads=args.threads, keep_inverse=False)
    seconds = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1] if args.trace else None
    z_bytes = 8 * (CAM_DOF * rec.n + GAUGE_DIM) ** 2
    print(json.dumps({
        "n": rec.n, "m": rec.m, "t": rec.t, "seconds": seconds,
        "max_rss_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
        "traced_peak_bytes": peak, "z_bytes": z_bytes,
        "dense_theta_bytes": 8 * (CAM_DOF * rec.n + PT_DOF * rec.m) ** 2,
        "rcond": res.diagnostics["rcond"], "min_pivot": res.diagnostics["min_pivot"],
        "backend": res.diagnostics["backend"],
    }))


if __name__ == "__main__":
    main()
