"""Compare the compiled and pure-Python kernels on synthetic scenes.

    python bench/bench_kernels.py [--cams 200 --pts 20000 --repeat 3]
"""
import argparse
import time

import numpy as np

from camcov import kernels
from camcov.covariance import build_fisher_blocks, condition_columns, invert_schur, schur_reduce
from camcov.nullspace import compute_nullspace
from camcov.projection import assemble_jacobian
from camcov.scene import generate_random_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cams", type=int, default=200)
    ap.add_argument("--pts", type=int, default=20000)
    ap.add_argument("--visibility", type=float, default=0.03)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    rec = generate_random_scene(args.cams, args.pts, args.visibility, seed=0, noise_px=0.5)
    J = assemble_jacobian(rec)
    H = compute_nullspace(rec, J)
    sys_ = build_fisher_blocks(J, rec, H).scaled(condition_columns(J, H, rec.sigma))
    print(f"scene: n={rec.n} m={rec.m} t={rec.t}  Z is {8 * rec.n + 7}^2")

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the Python fallback is timed")
    results = {}
    for name in backends:
        t_red, (Z, _) = best_of(lambda: schur_reduce(sys_, threads=args.threads, backend=name), args.repeat)
        t_inv, (Zi, diag) = best_of(lambda: invert_schur(Z, backend=name), args.repeat)
        results[name] = (t_red, t_inv, Z, Zi)
        print(f"{name:8s} schur_reduce {t_red:8.3f} s   invert_schur {t_inv:8.3f} s   "
              f"min pivot {diag['min_pivot']:.2e}")

    if len(results) == 2:
        (rc, ic, Zc, Zic), (rp, ip, Zp, Zip) = results["cython"], results["python"]
        dz = np.abs(Zc - Zp).max() / np.abs(Zc).max()
        di = np.abs(Zic - Zip).max() / np.abs(Zic).max()
        print(f"speedup  schur_reduce {rp / rc:6.1f}x   invert_schur {ip / ic:6.1f}x")
        print(f"max rel difference  Z {dz:.1e}   Z^-1 {di:.1e}")


if __name__ == "__main__":
    main()
