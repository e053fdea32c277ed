"""Pure numpy/scipy versions of the compiled kernels (same signatures)."""
import numpy as np
from scipy.linalg import lapack

_PAIR_CHUNK = 1 << 17


def _partners(o_list, obs_pt, pt_ptr, pt_obs):
    # every (o, o2) with o2 observing the same point as o, grouped by o
    starts = pt_ptr[obs_pt[o_list]]
    counts = pt_ptr[obs_pt[o_list] + 1] - starts
    rep = np.repeat(o_list, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    return rep, pt_obs[np.repeat(starts, counts) + offs]


def schur_accumulate(Z, E, F, EH, cam_ptr, cam_obs, pt_ptr, pt_obs, obs_cam, obs_pt, n, lo, hi):
    border = 8 * n
    Zc = Z[:border, :border].reshape(n, 8, n, 8)
    own = cam_obs[cam_ptr[lo]:cam_ptr[hi]]
    if own.size == 0:
        return
    track = (pt_ptr[1:] - pt_ptr[:-1])[obs_pt[own]].tolist()
    cams_own = obs_cam[own].tolist()
    # Chunks hold a bounded number of pairs. Cuts fall on camera boundaries, or at
    # camera-local offsets inside an oversized camera, so every block is summed
    # in the same order whatever the lo..hi split.
    bounds = [0]
    acc = local = 0
    for i, c in enumerate(track):
        if i and cams_own[i] != cams_own[i - 1]:
            local = 0
            if acc >= _PAIR_CHUNK:
                bounds.append(i)
                acc = 0
        elif local >= _PAIR_CHUNK:
            bounds.append(i)
            acc = local = 0
        acc += c
        local += c
    if bounds[-1] != own.size:
        bounds.append(own.size)
    for s, e in zip(bounds[:-1], bounds[1:]):
        o, o2 = _partners(own[s:e], obs_pt, pt_ptr, pt_obs)
        blocks = np.einsum("pik,pjk->pij", E[o], F[o2])
        key = obs_cam[o] * n + obs_cam[o2]
        order = np.argsort(key, kind="stable")
        key = key[order]
        first = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        sums = np.add.reduceat(blocks[order], first, axis=0)
        ua, ub = key[first] // n, key[first] % n
        Zc[ua, :, ub, :] -= sums
    cams = obs_cam[own]
    first = np.flatnonzero(np.r_[True, cams[1:] != cams[:-1]])
    sums = np.add.reduceat(EH[own], first, axis=0)
    for a, blk in zip(cams[first], sums):
        Z[8 * a:8 * a + 8, border:] -= blk
        Z[border:, 8 * a:8 * a + 8] -= blk.T


def _pivot_range(ldu, ipiv):
    # eigenvalue magnitudes of the 1x1 / 2x2 diagonal blocks of D (lower storage)
    N = ldu.shape[0]
    lo, hi = [], []
    k = 0
    while k < N:
        if ipiv[k] > 0:
            ev = np.abs(ldu[k:k + 1, k])
            k += 1
        else:
            blk = np.array([[ldu[k, k], ldu[k + 1, k]], [ldu[k + 1, k], ldu[k + 1, k + 1]]])
            ev = np.abs(np.linalg.eigvalsh(blk))
            k += 2
        lo.append(ev.min())
        hi.append(ev.max())
    return float(min(lo)), float(max(hi))


def sym_invert(Z):
    """In-place symmetric indefinite inverse; see the compiled version.

    Factorizes with dsytrf and solves against the identity with dsytrs.
    """
    N = Z.shape[0]
    if N == 0:
        return 0, 0.0, 0.0, 1.0
    anorm = np.abs(Z).sum(axis=0).max()
    ldu, ipiv, info = lapack.dsytrf(Z, lower=1)
    if info < 0:
        return int(info), 0.0, 0.0, 0.0
    pmin, pmax = _pivot_range(ldu, ipiv)
    if info > 0:
        return int(info), 0.0, pmax, 0.0
    rcond, info = lapack.dsycon(ldu, ipiv, anorm, lower=1)
    X, info = lapack.dsytrs(ldu, ipiv, np.eye(N), lower=1, overwrite_b=1)
    if info != 0:
        return int(info), pmin, pmax, float(rcond)
    Z[...] = np.triu(X) + np.triu(X, 1).T
    return 0, pmin, pmax, float(rcond)
