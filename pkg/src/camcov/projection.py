"""Pinhole projection with one-parameter radial distortion, and its Jacobian.

For a camera ``(r, C, c, k)`` and a point ``X``::

    y   = R(r) (X - C)
    u_n = y[:2] / y[2]
    u   = c * u_n * (1 + k |u_n|^2)

``R(r)`` is the Rodrigues rotation of the axis-angle vector ``r``. All the
vectorised functions take stacked per-observation inputs of shape ``(t, ...)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ProjectionError
from .scene import CAM_DOF, PT_DOF, Camera, Reconstruction

DEPTH_EPS = 1e-9
_SMALL_ANGLE = 1e-3


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ y == np.cross(v, y)``.

    Accepts a single 3-vector or a stack of shape ``(..., 3)``.
    """
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1] = -v[..., 2]
    K[..., 0, 2] = v[..., 1]
    K[..., 1, 0] = v[..., 2]
    K[..., 1, 2] = -v[..., 0]
    K[..., 2, 0] = -v[..., 1]
    K[..., 2, 1] = v[..., 0]
    return K


def _rodrigues_coeffs(theta):
    # a = sin(t)/t, b = (1-cos t)/t^2, c = (t - sin t)/t^3, with series near 0
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - np.cos(t)) / (t * t))
    c = np.where(small, 1 / 6 - t2 / 120 + t2 * t2 / 5040, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def rotation_matrices(r) -> np.ndarray:
    """Rodrigues formula for a stack of axis-angle vectors ``(..., 3)``."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    a, b, _ = _rodrigues_coeffs(theta)
    K = skew(r)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_matrix(r) -> np.ndarray:
    """3x3 rotation matrix of the axis-angle vector ``r`` (radians)."""
    return rotation_matrices(np.asarray(r, dtype=float).reshape(3))


def right_jacobian(r) -> np.ndarray:
    """Right Jacobian of SO(3): ``R(r + d) ~= R(r) R(J_r(r) d)``."""
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    K = skew(r)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


def _camera_frame(cams, X, R=None):
    if R is None:
        R = rotation_matrices(cams[:, 0:3])
    d = X - cams[:, 3:6]
    y = np.einsum("tij,tj->ti", R, d)
    z = y[:, 2]
    bad = np.flatnonzero(~(z > DEPTH_EPS))
    if bad.size:
        o = bad[0]
        raise ProjectionError(f"observation {o}: point depth {z[o]:.3e} is not in front of the camera")
    return R, d, y


def project_points(cams, X) -> np.ndarray:
    """Project ``X[t]`` with camera parameters ``cams[t]``; returns ``(t, 2)`` pixels."""
    cams = np.asarray(cams, dtype=float).reshape(-1, CAM_DOF)
    X = np.asarray(X, dtype=float).reshape(-1, PT_DOF)
    _, _, y = _camera_frame(cams, X)
    un = y[:, :2] / y[:, 2:3]
    rho = np.einsum("ti,ti->t", un, un)
    return (cams[:, 6] * (1 + cams[:, 7] * rho))[:, None] * un


def _as_params(cam):
    if isinstance(cam, Camera):
        return cam.params()
    return np.asarray(cam, dtype=float).reshape(CAM_DOF)


def project(cam, X) -> np.ndarray:
    """Pixel coordinates of point ``X`` in camera ``cam`` (a :class:`Camera` or 8-vector)."""
    return project_points(_as_params(cam)[None], np.asarray(X, dtype=float)[None])[0]


def jacobian_blocks(cams, X):
    """Analytic derivatives of :func:`project_points`.

    Returns ``(Jc, Jx)`` of shapes ``(t, 2, 8)`` and ``(t, 2, 3)``; camera
    columns are ordered ``r, C, c, k``.
    """
    cams = np.asarray(cams, dtype=float).reshape(-1, CAM_DOF)
    X = np.asarray(X, dtype=float).reshape(-1, PT_DOF)
    t = cams.shape[0]
    R, d, y = _camera_frame(cams, X)
    z = y[:, 2]
    un = y[:, :2] / z[:, None]
    rho = np.einsum("ti,ti->t", un, un)
    c, k = cams[:, 6], cams[:, 7]
    f = 1 + k * rho

    du_dn = (c * f)[:, None, None] * np.eye(2) + (2 * c * k)[:, None, None] * (un[:, :, None] * un[:, None, :])
    dn_dy = np.zeros((t, 2, 3))
    dn_dy[:, 0, 0] = 1 / z
    dn_dy[:, 1, 1] = 1 / z
    dn_dy[:, :, 2] = -un / z[:, None]
    du_dy = du_dn @ dn_dy

    Jx = du_dy @ R
    Jc = np.empty((t, 2, CAM_DOF))
    Jc[:, :, 0:3] = -(du_dy @ R @ skew(d) @ right_jacobian(cams[:, 0:3]))
    Jc[:, :, 3:6] = -Jx
    Jc[:, :, 6] = f[:, None] * un
    Jc[:, :, 7] = (c * rho)[:, None] * un
    return Jc, Jx


@dataclass(frozen=True)
class ObservationJacobian:
    d_r: np.ndarray
    d_C: np.ndarray
    d_c: np.ndarray
    d_k: np.ndarray
    d_X: np.ndarray

    def camera_block(self) -> np.ndarray:
        return np.hstack([self.d_r, self.d_C, self.d_c, self.d_k])


def observation_jacobian(cam, X) -> ObservationJacobian:
    Jc, Jx = jacobian_blocks(_as_params(cam)[None], np.asarray(X, dtype=float)[None])
    Jc, Jx = Jc[0], Jx[0]
    return ObservationJacobian(Jc[:, 0:3], Jc[:, 3:6], Jc[:, 6:7], Jc[:, 7:8], Jx)


@dataclass(frozen=True)
class SparseJacobian:
    """Block-sparse Jacobian of all projections.

    Rows ``2o, 2o+1`` belong to observation ``o``. Columns are the cameras
    (8 each) followed by the points (3 each).
    """

    cam_blocks: np.ndarray   # (t, 2, 8)
    pt_blocks: np.ndarray    # (t, 2, 3)
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    n: int
    m: int

    @property
    def shape(self) -> tuple[int, int]:
        return 2 * len(self.obs_cam), CAM_DOF * self.n + PT_DOF * self.m

    @property
    def t(self) -> int:
        return len(self.obs_cam)

    def cam_col(self, i):
        return CAM_DOF * np.asarray(i)

    def pt_col(self, j):
        return CAM_DOF * self.n + PT_DOF * np.asarray(j)

    def to_sparse(self) -> sp.csr_matrix:
        t = self.t
        rows = np.repeat(np.arange(2 * t).reshape(t, 2), CAM_DOF + PT_DOF, axis=1)
        cc = self.cam_col(self.obs_cam)[:, None] + np.arange(CAM_DOF)
        pc = self.pt_col(self.obs_pt)[:, None] + np.arange(PT_DOF)
        cols = np.broadcast_to(np.hstack([cc, pc])[:, None, :], (t, 2, CAM_DOF + PT_DOF))
        vals = np.concatenate([self.cam_blocks, self.pt_blocks], axis=2)
        return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=self.shape)

    def to_dense(self, max_size=4_000_000) -> np.ndarray:
        rows, cols = self.shape
        if rows * cols > max_size:
            raise MemoryError(f"dense Jacobian of shape {self.shape} exceeds the size guard")
        return self.to_sparse().toarray()

    def weighted(self, sigma) -> "SparseJacobian":
        """Whitened Jacobian ``L^-1 J`` where ``sigma[o] = L L^T``."""
        L = np.linalg.cholesky(sigma)
        Li = np.linalg.inv(L)
        return SparseJacobian(Li @ self.cam_blocks, Li @ self.pt_blocks,
                              self.obs_cam, self.obs_pt, self.n, self.m)

    def matmul(self, H) -> np.ndarray:
        """``J @ H`` for a dense ``H`` with ``8n + 3m`` rows, without forming ``J``."""
        H = np.asarray(H, dtype=float)
        ncols = H.shape[1]
        Hc = H[: CAM_DOF * self.n].reshape(self.n, CAM_DOF, ncols)
        Hp = H[CAM_DOF * self.n:].reshape(self.m, PT_DOF, ncols)
        out = self.cam_blocks @ Hc[self.obs_cam] + self.pt_blocks @ Hp[self.obs_pt]
        return out.reshape(2 * self.t, ncols)


def assemble_jacobian(rec: Reconstruction) -> SparseJacobian:
    """Jacobian of all projections at the reconstruction's parameters."""
    Jc, Jx = jacobian_blocks(rec.cams[rec.obs_cam], rec.points[rec.obs_pt])
    return SparseJacobian(Jc, Jx, rec.obs_cam, rec.obs_pt, rec.n, rec.m)


def residuals(rec: Reconstruction) -> np.ndarray:
    """Stacked ``u - p(X, P)`` for every observation, length ``2t``."""
    return (rec.uv - project_points(rec.cams[rec.obs_cam], rec.points[rec.obs_pt])).ravel()
