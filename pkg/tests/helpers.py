"""Shared test oracles."""
import numpy as np

from camcov.projection import observation_jacobian, project, rotation_matrix


def random_well_posed_pair(rng):
    """Camera and a point in front of it with moderate normalized radius."""
    axis = rng.normal(size=3)
    r = axis / np.linalg.norm(axis) * rng.uniform(0.0, np.pi)
    C = rng.uniform(-5, 5, size=3)
    c = rng.uniform(200.0, 2000.0)
    k = rng.uniform(-0.3, 0.3)
    z = rng.uniform(1.0, 10.0)
    y = np.array([rng.uniform(-0.8, 0.8) * z, rng.uniform(-0.8, 0.8) * z, z])
    X = C + rotation_matrix(r).T @ y
    return np.r_[r, C, c, k], X


def fd_jacobian(cam, X, rel_step=1e-6):
    """Central finite differences of the projection, (2x8, 2x3)."""
    def num(f, x):
        out = np.zeros((2, x.size))
        for i in range(x.size):
            h = rel_step * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            out[:, i] = (f(xp) - f(xm)) / (2 * h)
        return out
    return num(lambda p: project(p, X), cam), num(lambda x: project(cam, x), X)


def block_relative_error(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def jacobian_fd_errors(cam, X):
    """Max relative error of each analytic block against finite differences."""
    jac = observation_jacobian(cam, X)
    fc, fx = fd_jacobian(cam, X)
    return {
        "d_r": block_relative_error(jac.d_r, fc[:, 0:3]),
        "d_C": block_relative_error(jac.d_C, fc[:, 3:6]),
        "d_c": block_relative_error(jac.d_c, fc[:, 6:7]),
        "d_k": block_relative_error(jac.d_k, fc[:, 7:8]),
        "d_X": block_relative_error(jac.d_X, fx),
    }


def similarity_transform(rec, rotvec, shift, scale=1.0):
    """Apply ``X -> s R0 X + t`` to the scene; image observations are unchanged."""
    from scipy.spatial.transform import Rotation
    R0 = Rotation.from_rotvec(rotvec)
    cams = rec.cams.copy()
    cams[:, 3:6] = scale * R0.apply(rec.cams[:, 3:6]) + shift
    cams[:, 0:3] = (Rotation.from_rotvec(np.array(rec.cams[:, 0:3])) * R0.inv()).as_rotvec()
    points = scale * R0.apply(rec.points) + shift
    return rec.replace(cams=cams, points=points)


def quaternion_rotation_blocks(rec, J):
    """Rotation columns of the Jacobian under the quaternion-vector parametrization
    ``q = (sqrt(1 - |v|^2), v)`` at the scene's current rotations."""
    from scipy.spatial.transform import Rotation
    quat = Rotation.from_rotvec(np.array(rec.cams[:, 0:3])).as_quat()     # (x, y, z, w)
    quat[quat[:, 3] < 0] *= -1
    v_all, w_all = quat[:, :3], quat[:, 3]
    blocks = J.cam_blocks.copy()
    for o, (i, j) in enumerate(zip(rec.obs_cam, rec.obs_pt)):
        v, w = v_all[i], w_all[i]
        y = rec.points[j] - rec.cams[i, 3:6]
        R = rotation_matrix(rec.cams[i, 0:3])
        dRy = (-4.0 * np.outer(y, v) + 2.0 * (v @ y) * np.eye(3) + 2.0 * np.outer(v, y)
               - 2.0 * np.outer(np.cross(v, y), v) / w
               - 2.0 * w * np.array([[0, -y[2], y[1]], [y[2], 0, -y[0]], [-y[1], y[0], 0]]))
        blocks[o, :, 0:3] = J.pt_blocks[o] @ R.T @ dRy
    return blocks
