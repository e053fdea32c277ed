"""Seven-dimensional gauge nullspace of the projection Jacobian.

Columns are the infinitesimal similarity transforms: translation (3),
rotation (3) and scale (1). Point and camera-centre rows have closed forms;
the camera-rotation rows depend on the rotation parametrisation and are
recovered numerically from ``J @ H = 0`` one camera at a time.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import segment_sum
from .errors import RankDeficientCameraError
from .projection import SparseJacobian, skew
from .scene import CAM_DOF, PT_DOF, Reconstruction

NS_TOL = 1e-8
COND_TOL = 1e-12

T_COLS = slice(0, 3)
S_COLS = slice(3, 6)
MU_COL = 6


@dataclass(frozen=True)
class Nullspace:
    H: np.ndarray    # (8n + 3m, 7)
    n: int
    m: int

    def camera_rows(self, i) -> np.ndarray:
        return self.H[CAM_DOF * i: CAM_DOF * (i + 1)]

    def point_rows(self, j) -> np.ndarray:
        o = CAM_DOF * self.n + PT_DOF * j
        return self.H[o: o + PT_DOF]

    @property
    def camera_part(self) -> np.ndarray:
        return self.H[: CAM_DOF * self.n].reshape(self.n, CAM_DOF, 7)

    @property
    def point_part(self) -> np.ndarray:
        return self.H[CAM_DOF * self.n:].reshape(self.m, PT_DOF, 7)


def fixed_nullspace_blocks(rec: Reconstruction) -> Nullspace:
    """Translation, scale and point/centre rotation blocks; rotation rows of the
    camera orientations are left at zero."""
    n, m = rec.n, rec.m
    H = np.zeros((CAM_DOF * n + PT_DOF * m, 7))
    Hc = H[: CAM_DOF * n].reshape(n, CAM_DOF, 7)
    Hp = H[CAM_DOF * n:].reshape(m, PT_DOF, 7)
    C = rec.cams[:, 3:6]
    Hc[:, 3:6, T_COLS] = np.eye(3)
    Hc[:, 3:6, S_COLS] = skew(C)
    Hc[:, 3:6, MU_COL] = C
    Hp[:, :, T_COLS] = np.eye(3)
    Hp[:, :, S_COLS] = skew(rec.points)
    Hp[:, :, MU_COL] = rec.points
    return Nullspace(H, n, m)


def solve_rotation_blocks(J: SparseJacobian, partial: Nullspace) -> Nullspace:
    """Fill the camera-rotation rows of the rotation columns.

    For camera ``i`` the rows of ``J @ H = 0`` restricted to its observations
    read ``J_r H_r = B`` with ``B = -(dp/dC [C]x + dp/dX [X]x)``. The stacked
    system is consistent, so the 3x3 normal equations solve it exactly.
    """
    n = partial.n
    H = partial.H.copy()
    Hc = H[: CAM_DOF * n].reshape(n, CAM_DOF, 7)
    Hp = H[CAM_DOF * n:].reshape(partial.m, PT_DOF, 7)

    Jr = J.cam_blocks[:, :, 0:3]
    B = -(J.cam_blocks[:, :, 3:6] @ Hc[J.obs_cam, 3:6, S_COLS]
          + J.pt_blocks @ Hp[J.obs_pt, :, S_COLS])
    JrT = np.swapaxes(Jr, 1, 2)
    N = segment_sum(JrT @ Jr, J.obs_cam, n)
    rhs = segment_sum(JrT @ B, J.obs_cam, n)

    rcond = 1.0 / np.linalg.cond(N)
    bad = np.flatnonzero(~(rcond >= COND_TOL))
    if bad.size:
        raise RankDeficientCameraError(int(bad[0]), float(rcond[bad[0]]))
    Hc[:, 0:3, S_COLS] = np.linalg.solve(N, rhs)
    return Nullspace(H, n, partial.m)


def compute_nullspace(rec: Reconstruction, J: SparseJacobian) -> Nullspace:
    return solve_rotation_blocks(J, fixed_nullspace_blocks(rec))


def nullspace_residual(J: SparseJacobian, H: Nullspace) -> float:
    """``max|J H| / (max|J| max|H|)``."""
    Hm = H.H if isinstance(H, Nullspace) else np.asarray(H)
    if Hm.shape[0] != J.shape[1]:
        raise ValueError(f"nullspace has {Hm.shape[0]} rows, Jacobian has {J.shape[1]} columns")
    jmax = max(np.abs(J.cam_blocks).max(), np.abs(J.pt_blocks).max())
    return float(np.abs(J.matmul(Hm)).max() / (jmax * np.abs(Hm).max()))
