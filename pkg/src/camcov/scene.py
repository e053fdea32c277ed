"""Reconstructions: containers, JSON IO and synthetic scene generators.

A reconstruction stores its parameters as flat arrays so that the numerical
code can work on all observations at once:

* ``cams``   (n, 8)  camera parameters ordered ``r(3), C(3), c, k``
* ``points`` (m, 3)  3D points
* ``obs_cam``, ``obs_pt`` (t,)  observation index set
* ``uv``     (t, 2)  measured image points, pixels
* ``sigma``  (t, 2, 2)  observation covariances, pixels^2

The parameter vector is ``(P_1..P_n, X_1..X_m)``, length ``8n + 3m``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import SceneError

CAM_DOF = 8
PT_DOF = 3
MIN_OBS_PER_CAMERA = 4
MIN_TRACK_LENGTH = 2

# Observation counts of the small datasets used for accuracy experiments.
DESK_DATASETS = {
    "cube": (6, 15, 60),
    "toy": (10, 60, 200),
    "flat": (30, 100, 1033),
    "daliborka": (64, 200, 5205),
}


@dataclass(frozen=True)
class Camera:
    r: np.ndarray
    C: np.ndarray
    c: float
    k: float

    def params(self) -> np.ndarray:
        return np.concatenate([self.r, self.C, [self.c, self.k]])


@dataclass(frozen=True)
class Observation:
    cam_index: int
    point_index: int
    u: np.ndarray
    sigma: np.ndarray = field(default_factory=lambda: np.eye(2))


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Reconstruction:
    """Immutable camera/point/observation container.

    Construction validates every invariant; an invalid scene raises
    :class:`SceneError` naming the offending camera, point or observation.
    """

    __slots__ = ("cams", "points", "obs_cam", "obs_pt", "uv", "sigma")

    def __init__(self, cams, points, obs_cam, obs_pt, uv, sigma=None, validate=True):
        cams = np.asarray(cams, dtype=float).reshape(-1, CAM_DOF)
        points = np.asarray(points, dtype=float).reshape(-1, PT_DOF)
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        t = uv.shape[0]
        if sigma is None:
            sigma = np.broadcast_to(np.eye(2), (t, 2, 2))
        object.__setattr__(self, "cams", _frozen(cams))
        object.__setattr__(self, "points", _frozen(points))
        object.__setattr__(self, "obs_cam", _frozen(obs_cam, np.int64).reshape(-1))
        object.__setattr__(self, "obs_pt", _frozen(obs_pt, np.int64).reshape(-1))
        object.__setattr__(self, "uv", _frozen(uv))
        object.__setattr__(self, "sigma", _frozen(np.asarray(sigma, dtype=float).reshape(-1, 2, 2)))
        if validate:
            check_invariants(self)

    def __setattr__(self, name, value):
        raise AttributeError("Reconstruction is immutable")

    @property
    def n(self) -> int:
        return self.cams.shape[0]

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def t(self) -> int:
        return self.uv.shape[0]

    @property
    def n_params(self) -> int:
        return CAM_DOF * self.n + PT_DOF * self.m

    @property
    def cameras(self) -> list[Camera]:
        return [Camera(p[0:3].copy(), p[3:6].copy(), float(p[6]), float(p[7])) for p in self.cams]

    @property
    def observations(self) -> list[Observation]:
        return [Observation(int(i), int(j), u.copy(), s.copy())
                for i, j, u, s in zip(self.obs_cam, self.obs_pt, self.uv, self.sigma)]

    def theta(self) -> np.ndarray:
        """Full parameter vector ``(P_1..P_n, X_1..X_m)``."""
        return np.concatenate([self.cams.ravel(), self.points.ravel()])

    def replace(self, **kw) -> "Reconstruction":
        args = dict(cams=self.cams, points=self.points, obs_cam=self.obs_cam,
                    obs_pt=self.obs_pt, uv=self.uv, sigma=self.sigma)
        validate = kw.pop("validate", True)
        args.update(kw)
        return Reconstruction(**args, validate=validate)

    def __eq__(self, other):
        if not isinstance(other, Reconstruction):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.__slots__)

    def __repr__(self):
        return f"Reconstruction(n={self.n}, m={self.m}, t={self.t})"

    @classmethod
    def from_items(cls, cameras: Sequence[Camera], points: Iterable, observations: Sequence[Observation]):
        cams = np.array([c.params() for c in cameras], dtype=float).reshape(-1, CAM_DOF)
        pts = np.array([np.asarray(p, dtype=float) for p in points]).reshape(-1, PT_DOF)
        return cls(cams, pts,
                   [o.cam_index for o in observations],
                   [o.point_index for o in observations],
                   np.array([o.u for o in observations]).reshape(-1, 2),
                   np.array([o.sigma for o in observations]).reshape(-1, 2, 2))


def check_invariants(rec: Reconstruction) -> None:
    """Raise :class:`SceneError` if ``rec`` breaks any reconstruction invariant."""
    n, m, t = rec.n, rec.m, rec.t
    if n == 0:
        raise SceneError("reconstruction has no cameras")
    if m == 0:
        raise SceneError("reconstruction has no points")
    if not (rec.obs_cam.shape == rec.obs_pt.shape == (t,) and rec.sigma.shape == (t, 2, 2)):
        raise SceneError("observation arrays have inconsistent lengths")
    bad = np.flatnonzero(~np.isfinite(rec.cams).all(axis=1))
    if bad.size:
        raise SceneError(f"camera {bad[0]}: non-finite parameters")
    bad = np.flatnonzero(rec.cams[:, 6] <= 0)
    if bad.size:
        raise SceneError(f"camera {bad[0]}: focal length must be positive, got {rec.cams[bad[0], 6]}")
    bad = np.flatnonzero(~np.isfinite(rec.points).all(axis=1))
    if bad.size:
        raise SceneError(f"point {bad[0]}: non-finite coordinates")
    bad = np.flatnonzero((rec.obs_cam < 0) | (rec.obs_cam >= n) | (rec.obs_pt < 0) | (rec.obs_pt >= m))
    if bad.size:
        o = bad[0]
        raise SceneError(f"observation {o}: index (cam={rec.obs_cam[o]}, pt={rec.obs_pt[o]}) out of range")
    bad = np.flatnonzero(~np.isfinite(rec.uv).all(axis=1))
    if bad.size:
        raise SceneError(f"observation {bad[0]}: non-finite image coordinates")
    s = rec.sigma
    sym = np.abs(s[:, 0, 1] - s[:, 1, 0]) <= 1e-12 * (np.abs(s[:, 0, 0]) + np.abs(s[:, 1, 1]))
    det = s[:, 0, 0] * s[:, 1, 1] - s[:, 0, 1] * s[:, 1, 0]
    bad = np.flatnonzero(~(sym & (s[:, 0, 0] > 0) & (det > 0)))
    if bad.size:
        raise SceneError(f"observation {bad[0]}: covariance is not symmetric positive definite")
    key = rec.obs_cam * m + rec.obs_pt
    uniq, counts = np.unique(key, return_counts=True)
    if (counts > 1).any():
        k = uniq[counts > 1][0]
        raise SceneError(f"duplicate observation of point {k % m} by camera {k // m}")
    per_cam = np.bincount(rec.obs_cam, minlength=n)
    bad = np.flatnonzero(per_cam < MIN_OBS_PER_CAMERA)
    if bad.size:
        raise SceneError(f"camera {bad[0]} observes {per_cam[bad[0]]} points, "
                         f"needs at least {MIN_OBS_PER_CAMERA}")
    track = np.bincount(rec.obs_pt, minlength=m)
    bad = np.flatnonzero(track < MIN_TRACK_LENGTH)
    if bad.size:
        raise SceneError(f"point {bad[0]} is observed by {track[bad[0]]} camera(s), "
                         f"needs at least {MIN_TRACK_LENGTH}")


# ---------------------------------------------------------------------------
# JSON IO


def _field(obj, key, where, length=None):
    if key not in obj:
        raise SceneError(f"{where}: missing field '{key}'")
    v = obj[key]
    if length is not None:
        if not isinstance(v, list) or len(v) != length:
            raise SceneError(f"{where}: field '{key}' must be a list of {length} numbers")
    return v


def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneError(f"{where}: expected a number, got {v!r}")
    return float(v)


def reconstruction_from_dict(doc: dict) -> Reconstruction:
    if not isinstance(doc, dict):
        raise SceneError("top level must be an object")
    for key in ("cameras", "points", "observations"):
        if key not in doc or not isinstance(doc[key], list):
            raise SceneError(f"missing top-level array '{key}'")
    cams = []
    for i, c in enumerate(doc["cameras"]):
        where = f"cameras[{i}]"
        if not isinstance(c, dict):
            raise SceneError(f"{where}: expected an object")
        r = [_num(x, f"{where}.r") for x in _field(c, "r", where, 3)]
        C = [_num(x, f"{where}.C") for x in _field(c, "C", where, 3)]
        cams.append(r + C + [_num(_field(c, "c", where), f"{where}.c"),
                             _num(_field(c, "k", where), f"{where}.k")])
    pts = []
    for j, p in enumerate(doc["points"]):
        where = f"points[{j}]"
        if not isinstance(p, list) or len(p) != 3:
            raise SceneError(f"{where}: expected a list of 3 numbers")
        pts.append([_num(x, where) for x in p])
    t = len(doc["observations"])
    obs_cam = np.empty(t, dtype=np.int64)
    obs_pt = np.empty(t, dtype=np.int64)
    uv = np.empty((t, 2))
    sigma = np.empty((t, 2, 2))
    for o, ob in enumerate(doc["observations"]):
        where = f"observations[{o}]"
        if not isinstance(ob, dict):
            raise SceneError(f"{where}: expected an object")
        for key, arr in (("cam", obs_cam), ("pt", obs_pt)):
            v = _field(ob, key, where)
            if isinstance(v, bool) or not isinstance(v, int):
                raise SceneError(f"{where}: field '{key}' must be an integer")
            arr[o] = v
        uv[o] = [_num(x, f"{where}.u") for x in _field(ob, "u", where, 2)]
        s = ob.get("sigma")
        if s is None:
            sigma[o] = np.eye(2)
        else:
            if not isinstance(s, list) or len(s) != 3:
                raise SceneError(f"{where}: 'sigma' must be the upper triangle [a, b, c]")
            a, b, d = (_num(x, f"{where}.sigma") for x in s)
            sigma[o] = [[a, b], [b, d]]
    return Reconstruction(np.array(cams).reshape(-1, CAM_DOF), np.array(pts).reshape(-1, PT_DOF),
                          obs_cam, obs_pt, uv, sigma)


def reconstruction_to_dict(rec: Reconstruction) -> dict:
    return {
        "cameras": [{"r": p[0:3].tolist(), "C": p[3:6].tolist(), "c": float(p[6]), "k": float(p[7])}
                    for p in rec.cams],
        "points": rec.points.tolist(),
        "observations": [
            {"cam": int(i), "pt": int(j), "u": u.tolist(),
             "sigma": [float(s[0, 0]), float(s[0, 1]), float(s[1, 1])]}
            for i, j, u, s in zip(rec.obs_cam, rec.obs_pt, rec.uv, rec.sigma)
        ],
    }


def load_reconstruction(path) -> Reconstruction:
    """Read a reconstruction from the JSON scene format."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}: JSON parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return reconstruction_from_dict(doc)


def save_reconstruction(rec: Reconstruction, path) -> None:
    """Write ``rec`` as JSON. Floats are written with round-trip precision."""
    check_invariants(rec)
    doc = reconstruction_to_dict(rec)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# synthetic scenes


def look_at_rotvec(center, target, up=(0.0, 0.0, 1.0), roll=0.0) -> np.ndarray:
    """Axis-angle of the world-to-camera rotation looking from ``center`` at ``target``."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(fwd, (1.0, 0.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    if roll:
        cr, sr = math.cos(roll), math.sin(roll)
        R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    return Rotation.from_matrix(R).as_rotvec()


def _observe(cams, points, obs_cam, obs_pt, noise_px, rng):
    # local import: projection depends on this module
    from .projection import project_points

    uv = project_points(cams[obs_cam], points[obs_pt])
    if noise_px > 0:
        uv = uv + rng.normal(0.0, noise_px, size=uv.shape)
    var = noise_px ** 2 if noise_px > 0 else 1.0
    sigma = np.broadcast_to(var * np.eye(2), (len(obs_cam), 2, 2)).copy()
    return uv, sigma


def generate_cube_scene(seed: int = 1, noise_px: float = 0.0) -> Reconstruction:
    """Six cameras on the axes of a sphere looking at 15 points near the origin.

    Point ``p`` corresponds to a pair of cameras ``{a, b}`` and is seen by the
    other four, so every camera sees 10 points and there are 60 observations.
    """
    if noise_px < 0:
        raise ValueError("noise_px must be non-negative")
    rng = np.random.default_rng(seed)
    dirs = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    cams = np.empty((6, CAM_DOF))
    for i, d in enumerate(dirs):
        C = 5.0 * d + rng.uniform(-0.3, 0.3, 3)
        target = rng.uniform(-0.2, 0.2, 3)
        cams[i, 0:3] = look_at_rotvec(C, target, roll=rng.uniform(-0.3, 0.3))
        cams[i, 3:6] = C
        cams[i, 6] = rng.uniform(800.0, 1200.0)
        cams[i, 7] = rng.uniform(-0.1, 0.1)
    points = rng.uniform(-1.0, 1.0, size=(15, 3))
    obs_cam, obs_pt = [], []
    pairs = [(a, b) for a in range(6) for b in range(a + 1, 6)]
    for j, pair in enumerate(pairs):
        for i in range(6):
            if i not in pair:
                obs_cam.append(i)
                obs_pt.append(j)
    obs_cam = np.array(obs_cam)
    obs_pt = np.array(obs_pt)
    order = np.lexsort((obs_pt, obs_cam))
    obs_cam, obs_pt = obs_cam[order], obs_pt[order]
    uv, sigma = _observe(cams, points, obs_cam, obs_pt, noise_px, rng)
    return Reconstruction(cams, points, obs_cam, obs_pt, uv, sigma)


def generate_random_scene(n_cams: int, n_pts: int, visibility: float, seed: int = 0,
                          noise_px: float = 0.0, radius: float = 10.0) -> Reconstruction:
    """Cameras on a ring looking inwards at a point cloud around the origin.

    Each point gets a home angle on the ring and is observed by a contiguous
    window of cameras around it; the window length is drawn as
    ``max(2, Binomial(n_cams, visibility))``. Cameras left with fewer than
    four observations pick up the nearest unobserved points.
    """
    if n_cams < 2:
        raise ValueError(f"need at least 2 cameras, got {n_cams}")
    if n_pts < 8:
        raise ValueError(f"need at least 8 points, got {n_pts}")
    if not (0.0 < visibility <= 1.0):
        raise ValueError(f"visibility must lie in (0, 1], got {visibility}")
    if noise_px < 0:
        raise ValueError("noise_px must be non-negative")
    rng = np.random.default_rng(seed)

    step = 2 * math.pi / n_cams
    cam_angle = np.arange(n_cams) * step + rng.uniform(-0.2, 0.2, n_cams) * step
    cams = np.empty((n_cams, CAM_DOF))
    for i, a in enumerate(cam_angle):
        rad = radius * rng.uniform(0.95, 1.05)
        C = np.array([rad * math.cos(a), rad * math.sin(a), rng.uniform(-1.0, 1.0)])
        target = rng.uniform(-0.5, 0.5, 3)
        cams[i, 0:3] = look_at_rotvec(C, target, roll=rng.uniform(-0.2, 0.2))
        cams[i, 3:6] = C
        cams[i, 6] = rng.uniform(800.0, 1200.0)
        cams[i, 7] = rng.uniform(-0.1, 0.1)

    home = rng.uniform(0.0, 2 * math.pi, n_pts)
    rho = 0.3 * radius * np.sqrt(rng.uniform(0.0, 1.0, n_pts))
    points = np.column_stack([rho * np.cos(home), rho * np.sin(home),
                              rng.uniform(-0.15, 0.15, n_pts) * radius])

    span = np.maximum(MIN_TRACK_LENGTH, rng.binomial(n_cams, visibility, n_pts))
    span = np.minimum(span, n_cams)
    nearest = np.rint(home / step).astype(np.int64) % n_cams
    start = nearest - span // 2
    obs_pt = np.repeat(np.arange(n_pts), span)
    offsets = np.arange(obs_pt.size) - np.repeat(np.cumsum(span) - span, span)
    obs_cam = (np.repeat(start, span) + offsets) % n_cams

    per_cam = np.bincount(obs_cam, minlength=n_cams)
    extra_cam, extra_pt = [], []
    for i in np.flatnonzero(per_cam < MIN_OBS_PER_CAMERA):
        seen = set(obs_pt[obs_cam == i].tolist())
        d = np.abs((home - cam_angle[i] + math.pi) % (2 * math.pi) - math.pi)
        for j in np.argsort(d, kind="stable"):
            if per_cam[i] >= MIN_OBS_PER_CAMERA:
                break
            if int(j) not in seen:
                extra_cam.append(i)
                extra_pt.append(int(j))
                per_cam[i] += 1
    if extra_cam:
        obs_cam = np.concatenate([obs_cam, extra_cam])
        obs_pt = np.concatenate([obs_pt, extra_pt])
    order = np.lexsort((obs_pt, obs_cam))
    obs_cam, obs_pt = obs_cam[order], obs_pt[order]
    uv, sigma = _observe(cams, points, obs_cam, obs_pt, noise_px, rng)
    try:
        return Reconstruction(cams, points, obs_cam, obs_pt, uv, sigma)
    except SceneError as e:
        raise SceneError(f"infeasible visibility pattern: {e}") from e


def generate_desk_scene(name: str, seed: int = 0, noise_px: float = 0.5) -> Reconstruction:
    """Synthetic analog of one of :data:`DESK_DATASETS` (camera/point counts match)."""
    n, m, t = DESK_DATASETS[name]
    if name == "cube":
        return generate_cube_scene(seed, noise_px)
    return generate_random_scene(n, m, t / (n * m), seed, noise_px)


def concatenate(*recs: Reconstruction, offset=None) -> Reconstruction:
    """Stack independent reconstructions into one (disconnected) scene."""
    cams, pts, oc, op, uv, sig = [], [], [], [], [], []
    nc = npt = 0
    for idx, r in enumerate(recs):
        shift = np.zeros(3) if offset is None else idx * np.asarray(offset, float)
        c = r.cams.copy()
        c[:, 3:6] += shift
        cams.append(c)
        pts.append(r.points + shift)
        oc.append(r.obs_cam + nc)
        op.append(r.obs_pt + npt)
        uv.append(r.uv)
        sig.append(r.sigma)
        nc += r.n
        npt += r.m
    return Reconstruction(np.concatenate(cams), np.concatenate(pts), np.concatenate(oc),
                          np.concatenate(op), np.concatenate(uv), np.concatenate(sig))
