"""Camera covariances from the gauge-bordered normal equations.

The information matrix ``M = J^T W J`` (``W`` the inverse observation
covariances) is rank deficient by the seven gauge directions ``H``. The
bordered matrix ``Q = [[M, H], [H^T, 0]]`` is full rank and the top-left block
of its inverse is the natural (minimum-norm) covariance. ``Q`` is column
scaled, permuted to put the 3x3 point blocks first, and the point block is
eliminated so that only the ``(8n + 7)`` square Schur complement is factorised
densely.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._util import segment_sum
from .errors import (CamcovError, FactorizationError, SceneError,
                     SingularPointBlockError, StageError)
from .nullspace import Nullspace, compute_nullspace
from .projection import SparseJacobian, assemble_jacobian
from .scene import CAM_DOF, PT_DOF, Reconstruction

log = logging.getLogger(__name__)

GAUGE_DIM = 7
SYM_TOL = 1e-9
POINT_RCOND_TOL = 1e-14
RCOND_TOL = 1e-14
DENSE_GUARD = 4000


def default_threads() -> int:
    env = os.environ.get("CAMCOV_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ConditioningScales:
    S_a: np.ndarray      # (8n + 3m,)
    S_b: np.ndarray      # (7,)
    flagged: np.ndarray  # parameter columns with zero information, left unscaled

    @property
    def extremes(self) -> tuple[float, float]:
        return float(self.S_a.min()), float(self.S_a.max())


@dataclass(frozen=True)
class BorderedSystem:
    """Block-sparse pieces of ``[[M, H], [H^T, 0]]`` (scaled when ``scales`` is set).

    Camera-camera blocks of ``M`` are block diagonal (``cam_blocks``), camera-
    point coupling is stored per observation (``coupling``, 8x3) and the point
    blocks are block diagonal (``point_blocks``).
    """

    cam_blocks: np.ndarray    # (n, 8, 8)
    coupling: np.ndarray      # (t, 8, 3)
    point_blocks: np.ndarray  # (m, 3, 3)
    H: np.ndarray             # (8n + 3m, 7)
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    n: int
    m: int
    scales: ConditioningScales | None = None

    @property
    def n_params(self) -> int:
        return CAM_DOF * self.n + PT_DOF * self.m

    def scaled(self, scales: ConditioningScales) -> "BorderedSystem":
        n = self.n
        sc = scales.S_a[: CAM_DOF * n].reshape(n, CAM_DOF)
        sp = scales.S_a[CAM_DOF * n:].reshape(self.m, PT_DOF)
        return BorderedSystem(
            cam_blocks=sc[:, :, None] * self.cam_blocks * sc[:, None, :],
            coupling=sc[self.obs_cam][:, :, None] * self.coupling * sp[self.obs_pt][:, None, :],
            point_blocks=sp[:, :, None] * self.point_blocks * sp[:, None, :],
            H=scales.S_a[:, None] * self.H * scales.S_b[None, :],
            obs_cam=self.obs_cam, obs_pt=self.obs_pt, n=n, m=self.m, scales=scales)

    def permutation(self) -> np.ndarray:
        """Index map to the points-first order ``(X_1..X_m, P_1..P_n, border)``."""
        nc = CAM_DOF * self.n
        return np.concatenate([np.arange(nc, self.n_params), np.arange(nc),
                               self.n_params + np.arange(GAUGE_DIM)])

    def fisher_dense(self) -> np.ndarray:
        """Dense ``M`` in parameter order. Desk-scale only."""
        N = self.n_params
        if N > DENSE_GUARD:
            raise MemoryError(f"dense information matrix of size {N} exceeds the guard")
        M = np.zeros((N, N))
        nc = CAM_DOF * self.n
        for i, blk in enumerate(self.cam_blocks):
            M[8 * i:8 * i + 8, 8 * i:8 * i + 8] = blk
        for j, blk in enumerate(self.point_blocks):
            M[nc + 3 * j:nc + 3 * j + 3, nc + 3 * j:nc + 3 * j + 3] = blk
        for o, blk in enumerate(self.coupling):
            i, j = self.obs_cam[o], self.obs_pt[o]
            M[8 * i:8 * i + 8, nc + 3 * j:nc + 3 * j + 3] += blk
            M[nc + 3 * j:nc + 3 * j + 3, 8 * i:8 * i + 8] += blk.T
        return M

    def bordered_dense(self, permuted=False) -> np.ndarray:
        N = self.n_params
        Q = np.zeros((N + GAUGE_DIM, N + GAUGE_DIM))
        Q[:N, :N] = self.fisher_dense()
        Q[:N, N:] = self.H
        Q[N:, :N] = self.H.T
        if permuted:
            p = self.permutation()
            Q = Q[np.ix_(p, p)]
        return Q


@dataclass
class CovarianceResult:
    """Per-camera 8x8 covariance blocks (parameter units squared)."""

    cameras: np.ndarray                      # (n, 8, 8)
    points: np.ndarray | None = None         # (m, 3, 3)
    diagnostics: dict = field(default_factory=dict)
    _zinv: np.ndarray | None = field(default=None, repr=False)
    _cam_scale: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.cameras.shape[0]

    def traces(self) -> np.ndarray:
        return np.trace(self.cameras, axis1=1, axis2=2)

    def camera_cross(self, i: int, k: int) -> np.ndarray:
        """Cross-covariance block between cameras ``i`` and ``k``."""
        if self._zinv is None:
            raise ValueError("cross-covariances were not kept; pass keep_inverse=True")
        s = self._cam_scale
        blk = self._zinv[8 * i:8 * i + 8, 8 * k:8 * k + 8]
        return s[i][:, None] * blk * s[k][None, :]

    def camera_covariance_dense(self) -> np.ndarray:
        """Full ``8n x 8n`` camera covariance (including cross blocks)."""
        if self._zinv is None:
            raise ValueError("cross-covariances were not kept; pass keep_inverse=True")
        s = self._cam_scale.ravel()
        nc = s.size
        return s[:, None] * self._zinv[:nc, :nc] * s[None, :]


def _observation_weights(sigma: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(sigma)
        bad = int(np.flatnonzero(ev.min(axis=1) <= 0)[0]) if (ev.min(axis=1) <= 0).any() else -1
        raise SceneError(f"observation {bad}: covariance is not positive definite") from None
    return np.linalg.inv(sigma)


def build_fisher_blocks(J: SparseJacobian, rec: Reconstruction, H: Nullspace | np.ndarray | None = None
                        ) -> BorderedSystem:
    """Block-sparse ``M = J^T Sigma_u^-1 J`` (unscaled)."""
    W = _observation_weights(rec.sigma)
    JcT = np.swapaxes(J.cam_blocks, 1, 2)
    WJx = W @ J.pt_blocks
    cam_blocks = segment_sum(JcT @ (W @ J.cam_blocks), J.obs_cam, J.n)
    coupling = JcT @ WJx
    point_blocks = segment_sum(np.swapaxes(J.pt_blocks, 1, 2) @ WJx, J.obs_pt, J.m)
    if H is None:
        Hm = np.zeros((CAM_DOF * J.n + PT_DOF * J.m, GAUGE_DIM))
    else:
        Hm = H.H if isinstance(H, Nullspace) else np.asarray(H, dtype=float)
    return BorderedSystem(cam_blocks, coupling, point_blocks, Hm, J.obs_cam, J.obs_pt, J.n, J.m)


def condition_columns(J: SparseJacobian, H, sigma=None) -> ConditioningScales:
    """Jacobi column scales ``1/sqrt(M_jj)`` and unit-norm scales for ``S_a H``."""
    Jw = J if sigma is None else J.weighted(sigma)
    diag = np.concatenate([
        segment_sum((Jw.cam_blocks ** 2).sum(axis=1), J.obs_cam, J.n).ravel(),
        segment_sum((Jw.pt_blocks ** 2).sum(axis=1), J.obs_pt, J.m).ravel(),
    ])
    flagged = np.flatnonzero(~(diag > 0))
    S_a = np.ones_like(diag)
    ok = diag > 0
    S_a[ok] = 1.0 / np.sqrt(diag[ok])
    Hm = H.H if isinstance(H, Nullspace) else np.asarray(H, dtype=float)
    norms = np.linalg.norm(S_a[:, None] * Hm, axis=0)
    S_b = np.ones(Hm.shape[1])
    S_b[norms > 0] = 1.0 / norms[norms > 0]
    return ConditioningScales(S_a, S_b, flagged)


@dataclass
class SchurParts:
    """Intermediate products of the point elimination, reused for point covariances."""

    G: np.ndarray        # (m, 3, 3) inverse point blocks
    E: np.ndarray        # (t, 8, 3) coupling @ G
    GH: np.ndarray       # (m, 3, 7) G @ H_points
    cam_ptr: np.ndarray
    cam_obs: np.ndarray
    pt_ptr: np.ndarray
    pt_obs: np.ndarray


def _csr_groups(index, size):
    order = np.argsort(index, kind="stable").astype(np.int64)
    ptr = np.zeros(size + 1, dtype=np.int64)
    np.cumsum(np.bincount(index, minlength=size), out=ptr[1:])
    return ptr, order


def _camera_ranges(cam_ptr, pt_ptr, cam_obs, obs_pt, n, threads):
    if threads <= 1 or n < 2:
        return [(0, n)]
    track = (pt_ptr[1:] - pt_ptr[:-1])[obs_pt[cam_obs]]
    work = np.cumsum(np.bincount(np.repeat(np.arange(n), np.diff(cam_ptr)), weights=track, minlength=n))
    cuts = np.searchsorted(work, work[-1] * np.arange(1, threads) / threads)
    edges = np.unique(np.concatenate([[0], cuts, [n]]))
    return list(zip(edges[:-1], edges[1:]))


def invert_point_blocks(A: np.ndarray) -> np.ndarray:
    ev = np.linalg.eigvalsh(A)
    bad = ~(ev[:, 0] > POINT_RCOND_TOL * np.abs(ev[:, -1]))
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        raise SingularPointBlockError(j, f" (eigenvalues {ev[j]})")
    return np.linalg.inv(A)


def schur_reduce(sys: BorderedSystem, threads: int | None = None, backend: str | None = None):
    """Eliminate the point blocks; returns ``(Z_p, parts)``.

    ``Z_p = D_p - B_p^T A_p^-1 B_p`` has size ``8n + 7``; the border (scaled
    nullspace) occupies the last seven rows/columns. No array larger than
    ``Z_p`` is ever allocated.
    """
    kern = kernels.get_backend(backend)
    threads = default_threads() if threads is None else max(1, int(threads))
    n, m = sys.n, sys.m
    nc = CAM_DOF * n
    N = nc + GAUGE_DIM

    G = invert_point_blocks(sys.point_blocks)
    obs_cam = np.ascontiguousarray(sys.obs_cam, dtype=np.int64)
    obs_pt = np.ascontiguousarray(sys.obs_pt, dtype=np.int64)
    F = np.ascontiguousarray(sys.coupling)
    E = np.ascontiguousarray(F @ G[obs_pt])
    Hp = sys.H[nc:].reshape(m, PT_DOF, GAUGE_DIM)
    GH = G @ Hp
    EH = np.ascontiguousarray(E @ Hp[obs_pt])

    cam_ptr, cam_obs = _csr_groups(obs_cam, n)
    pt_ptr, pt_obs = _csr_groups(obs_pt, m)

    Z = np.zeros((N, N))
    Zc = Z[:nc, :nc].reshape(n, CAM_DOF, n, CAM_DOF)
    idx = np.arange(n)
    Zc[idx, :, idx, :] = sys.cam_blocks
    Z[:nc, nc:] = sys.H[:nc]
    Z[nc:, :nc] = sys.H[:nc].T
    Z[nc:, nc:] -= np.einsum("jki,jkl->il", Hp, GH)

    args = (E, F, EH, cam_ptr, cam_obs, pt_ptr, pt_obs, obs_cam, obs_pt, n)
    ranges = _camera_ranges(cam_ptr, pt_ptr, cam_obs, obs_pt, n, threads)
    if len(ranges) == 1:
        kern.schur_accumulate(Z, *args, 0, n)
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            list(pool.map(lambda r: kern.schur_accumulate(Z, *args, int(r[0]), int(r[1])), ranges))
    return Z, SchurParts(G, E, GH, cam_ptr, cam_obs, pt_ptr, pt_obs)


def invert_schur(Z_p: np.ndarray, backend: str | None = None, overwrite: bool = False):
    """Symmetric indefinite (LDL^T) inverse of ``Z_p``; returns ``(Z_inv, diagnostics)``."""
    kern = kernels.get_backend(backend)
    Z = Z_p if overwrite else Z_p.copy()
    info, pmin, pmax, rcond = kern.sym_invert(Z)
    diag = {"min_pivot": float(pmin), "max_pivot": float(pmax), "rcond": float(rcond)}
    # tiny Bunch-Kaufman pivots alone do not imply singularity; the condition estimate decides
    if info != 0 or not rcond > RCOND_TOL:
        raise FactorizationError(
            f"LDL^T factorization of the reduced camera system failed "
            f"(info={info}, rcond={rcond:.3e}); the scene is degenerate "
            f"or disconnected, or the gauge border does not span the nullspace")
    return Z, diag


def extract_camera_covariances(Z_inv: np.ndarray, scales: ConditioningScales, n: int | None = None,
                               keep_inverse: bool = True) -> CovarianceResult:
    """``Sigma_P = S_P Z_s S_P`` restricted to the 8x8 diagonal blocks."""
    if n is None:
        n = (Z_inv.shape[0] - GAUGE_DIM) // CAM_DOF
    nc = CAM_DOF * n
    s = scales.S_a[:nc].reshape(n, CAM_DOF)
    blocks = Z_inv[:nc, :nc].reshape(n, CAM_DOF, n, CAM_DOF)[np.arange(n), :, np.arange(n), :]
    cams = s[:, :, None] * blocks * s[:, None, :]
    cams = 0.5 * (cams + np.swapaxes(cams, 1, 2))
    res = CovarianceResult(cams, _zinv=Z_inv if keep_inverse else None, _cam_scale=s)
    res.diagnostics["psd_warnings"] = psd_violations(cams)
    for i, ev, tr in res.diagnostics["psd_warnings"]:
        log.warning("camera %d: covariance block has eigenvalue %.3e (trace %.3e)", i, ev, tr)
    return res


def psd_violations(blocks: np.ndarray, tol: float = SYM_TOL):
    ev = np.linalg.eigvalsh(blocks)
    tr = np.trace(blocks, axis1=1, axis2=2)
    bad = np.flatnonzero(ev[:, 0] < -tol * np.abs(tr))
    return [(int(i), float(ev[i, 0]), float(tr[i])) for i in bad]


def point_covariances(sys: BorderedSystem, parts: SchurParts, Z_inv: np.ndarray) -> np.ndarray:
    """Scaled-back 3x3 point blocks ``A^-1 + A^-1 B Z^-1 B^T A^-1``."""
    n, m = sys.n, sys.m
    nc = CAM_DOF * n
    Zcc = Z_inv[:nc, :nc].reshape(n, CAM_DOF, n, CAM_DOF)
    Zcb = Z_inv[:nc, nc:].reshape(n, CAM_DOF, GAUGE_DIM)
    Zbb = Z_inv[nc:, nc:]
    obs_cam, obs_pt = sys.obs_cam, sys.obs_pt
    out = parts.G + np.einsum("jib,bc,jkc->jik", parts.GH, Zbb, parts.GH)
    # camera-border cross terms, one per observation
    cross = np.einsum("oai,oab,okb->oik", parts.E, Zcb[obs_cam], parts.GH[obs_pt])
    out += segment_sum(cross + np.swapaxes(cross, 1, 2), obs_pt, m)
    # camera-camera terms over observation pairs of each point
    from .kernels._schur_py import _partners
    o, o2 = _partners(np.arange(len(obs_cam)), obs_pt, parts.pt_ptr, parts.pt_obs)
    chunk = 1 << 16
    for s in range(0, len(o), chunk):
        a, b = o[s:s + chunk], o2[s:s + chunk]
        blk = Zcc[obs_cam[a], :, obs_cam[b], :]
        out += segment_sum(np.einsum("pai,pab,pbk->pik", parts.E[a], blk, parts.E[b]), obs_pt[a], m)
    sp = sys.scales.S_a[nc:].reshape(m, PT_DOF) if sys.scales is not None else np.ones((m, PT_DOF))
    out = sp[:, :, None] * out * sp[:, None, :]
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (CamcovError, np.linalg.LinAlgError) as e:
        raise StageError(name, e) from e


def compute_covariance(rec: Reconstruction, *, threads: int | None = None, backend: str | None = None,
                       points: bool = False, keep_inverse: bool = True) -> CovarianceResult:
    """Natural-form camera covariances of ``rec``.

    Pipeline: Jacobian, gauge nullspace, information blocks, column
    conditioning, point elimination, LDL^T inverse, extraction. Errors are
    re-raised as :class:`StageError` carrying the failing stage name.
    """
    J = _stage("jacobian", assemble_jacobian, rec)
    H = _stage("nullspace", compute_nullspace, rec, J)
    raw = _stage("fisher", build_fisher_blocks, J, rec, H)
    scales = _stage("conditioning", condition_columns, J, H, rec.sigma)
    sys = raw.scaled(scales)
    Z, parts = _stage("schur", schur_reduce, sys, threads=threads, backend=backend)
    Zinv, fdiag = _stage("factorization", invert_schur, Z, backend=backend, overwrite=True)
    res = extract_camera_covariances(Zinv, scales, rec.n, keep_inverse=keep_inverse or points)
    lo, hi = scales.extremes
    res.diagnostics.update(fdiag)
    res.diagnostics.update({
        "n": rec.n, "m": rec.m, "t": rec.t,
        "scale_min": lo, "scale_max": hi,
        "flagged_columns": scales.flagged.tolist(),
        "backend": backend or kernels.DEFAULT_BACKEND,
    })
    if points:
        res.points = point_covariances(sys, parts, Zinv)
        if not keep_inverse:
            res._zinv = None
    return res


def full_covariance(rec: Reconstruction, backend: str | None = None) -> np.ndarray:
    """Dense natural covariance of all ``8n + 3m`` parameters. Desk-scale only.

    Uses the same elimination as :func:`compute_covariance` and assembles the
    point blocks of the block inverse instead of discarding them.
    """
    if rec.n_params > DENSE_GUARD:
        raise MemoryError(f"{rec.n_params} parameters exceed the dense guard ({DENSE_GUARD})")
    J = assemble_jacobian(rec)
    H = compute_nullspace(rec, J)
    scales = condition_columns(J, H, rec.sigma)
    sys = build_fisher_blocks(J, rec, H).scaled(scales)
    Z, parts = schur_reduce(sys, threads=1, backend=backend)
    Zinv, _ = invert_schur(Z, backend=backend, overwrite=True)
    n, m = rec.n, rec.m
    nc, npar = CAM_DOF * n, rec.n_params
    N = nc + GAUGE_DIM
    # V = A^-1 B_p, rows of point j: E^T at its cameras, G H_j at the border
    V = np.zeros((PT_DOF * m, N))
    for o in range(rec.t):
        i, j = sys.obs_cam[o], sys.obs_pt[o]
        V[3 * j:3 * j + 3, 8 * i:8 * i + 8] = parts.E[o].T
    V[:, nc:] = parts.GH.reshape(PT_DOF * m, GAUGE_DIM)
    Sigma = np.zeros((npar, npar))
    pts = slice(nc, npar)
    Sigma[:nc, :nc] = Zinv[:nc, :nc]
    VZ = V @ Zinv
    Spp = VZ @ V.T
    for j in range(m):
        Spp[3 * j:3 * j + 3, 3 * j:3 * j + 3] += parts.G[j]
    Sigma[pts, pts] = Spp
    Sigma[pts, :nc] = -VZ[:, :nc]
    Sigma[:nc, pts] = -VZ[:, :nc].T
    s = scales.S_a
    return s[:, None] * Sigma * s[None, :]
