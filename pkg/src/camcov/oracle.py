"""Dense Moore-Penrose reference covariance and the per-camera error metric.

The reference drops exactly the seven smallest singular values of the
information matrix, whatever their magnitude. By default the SVD of ``M`` is
obtained from the SVD of its whitened factor ``L^-1 J`` (``M = V S^2 V^T``),
which keeps the relative accuracy of the small singular values; the
``"fisher"`` method decomposes the explicitly formed ``M`` instead and serves
as the plain double-precision baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import GAUGE_DIM, CovarianceResult, build_fisher_blocks
from .projection import assemble_jacobian
from .scene import CAM_DOF, Reconstruction

SIZE_GUARD = 2000


class OracleSizeError(ValueError):
    pass


@dataclass
class OracleResult(CovarianceResult):
    singular_values: np.ndarray | None = None   # of M, descending
    sigma_full: np.ndarray | None = None        # dense pseudoinverse of M
    fisher: np.ndarray | None = None            # dense M

    @property
    def gauge_gap(self) -> float:
        """Smallest kept over largest dropped singular value."""
        s = self.singular_values
        return float(s[-GAUGE_DIM - 1] / s[-GAUGE_DIM]) if s[-GAUGE_DIM] > 0 else np.inf


def _check_size(rec, max_params):
    if rec.n_params > max_params:
        raise OracleSizeError(f"{rec.n_params} parameters exceed the dense oracle guard ({max_params})")


def pseudoinverse_covariance(rec: Reconstruction, method: str = "jacobian",
                             max_params: int = SIZE_GUARD) -> OracleResult:
    """Natural covariance by dense SVD with the seven gauge singular values zeroed."""
    _check_size(rec, max_params)
    J = assemble_jacobian(rec)
    M = build_fisher_blocks(J, rec).fisher_dense()
    if method == "jacobian":
        Jw = J.weighted(rec.sigma).to_dense(max_size=np.inf)
        _, s, Vt = np.linalg.svd(Jw, full_matrices=Jw.shape[0] < Jw.shape[1])
        s_m = np.zeros(Vt.shape[0])
        s_m[: s.size] = s * s
    elif method == "fisher":
        _, s_m, Vt = np.linalg.svd(M)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    keep = s_m.size - GAUGE_DIM
    inv = np.zeros_like(s_m)
    inv[:keep] = 1.0 / s_m[:keep]
    Sigma = (Vt.T * inv) @ Vt
    Sigma = 0.5 * (Sigma + Sigma.T)
    n = rec.n
    cams = np.array([Sigma[CAM_DOF * i:CAM_DOF * (i + 1), CAM_DOF * i:CAM_DOF * (i + 1)] for i in range(n)])
    return OracleResult(cams, diagnostics={"method": method, "n_params": rec.n_params},
                        singular_values=s_m, sigma_full=Sigma, fisher=M)


def thresholded_pseudoinverse_covariance(rec: Reconstruction, rcond: float = 1e-14,
                                         max_params: int = SIZE_GUARD) -> OracleResult:
    """Pseudoinverse of the formed ``M`` dropping singular values below ``rcond * s_max``."""
    _check_size(rec, max_params)
    J = assemble_jacobian(rec)
    M = build_fisher_blocks(J, rec).fisher_dense()
    _, s, Vt = np.linalg.svd(M)
    inv = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    Sigma = (Vt.T * inv) @ Vt
    Sigma = 0.5 * (Sigma + Sigma.T)
    cams = np.array([Sigma[8 * i:8 * i + 8, 8 * i:8 * i + 8] for i in range(rec.n)])
    return OracleResult(cams, diagnostics={"method": "threshold", "rcond": rcond,
                                           "dropped": int((inv == 0).sum())},
                        singular_values=s, sigma_full=Sigma, fisher=M)


@dataclass
class ErrorReport:
    per_camera: np.ndarray   # (n,)
    O: np.ndarray            # (8, 8)
    flagged: list            # parameter slots whose mean magnitude was zero

    @property
    def mean(self) -> float:
        return float(self.per_camera.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.per_camera))


def normalization_matrix(rec: Reconstruction):
    """``O = sqrt(a a^T)`` with ``a`` the mean absolute camera parameter vector."""
    a = np.abs(rec.cams).mean(axis=0)
    flagged = np.flatnonzero(a == 0).tolist()
    a = np.where(a == 0, 1.0, a)
    return np.sqrt(np.outer(a, a)), flagged


def error_from_blocks(gt: np.ndarray, est: np.ndarray, O: np.ndarray) -> np.ndarray:
    return (np.sqrt(np.abs(np.asarray(gt) - np.asarray(est))) / O).mean(axis=(-2, -1))


def error_metric(gt, est, rec: Reconstruction) -> ErrorReport:
    """Mean over the 64 entries of ``sqrt(|gt - est|)`` divided element-wise by ``O``."""
    g = gt.cameras if isinstance(gt, CovarianceResult) else np.asarray(gt)
    e = est.cameras if isinstance(est, CovarianceResult) else np.asarray(est)
    if g.shape != e.shape or g.shape[1:] != (CAM_DOF, CAM_DOF):
        raise ValueError(f"covariance shapes differ: {g.shape} vs {e.shape}")
    if g.shape[0] != rec.n:
        raise ValueError(f"{g.shape[0]} camera blocks for a scene with {rec.n} cameras")
    O, flagged = normalization_matrix(rec)
    return ErrorReport(error_from_blocks(g, e, O), O, flagged)
