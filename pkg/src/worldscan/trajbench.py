"""One-minute benchmark trajectories: generation from waypoint templates and
pose-accuracy evaluation.

World frame: an OpenCV camera at yaw = pitch = 0 (x right, y down, z
forward), so world "up" is ``-y``. Yaw turns about world up (positive turns
left, toward ``-x``); pitch turns about the camera's right axis (positive
looks up). Quaternions are ``(w, x, y, z)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .camgeo import CameraPose, Intrinsics
from .errors import AlignmentError, InvalidInputError

WORLD_UP = np.array([0.0, -1.0, 0.0])
MAX_SPEED = 0.4              # m/s, global cap
DEPTH_TRAVEL_FRACTION = 0.6  # of the median depth, over the whole clip
ANGULAR_LIMIT = 12.0         # deg/s
COLLISION_MARGIN = 0.3       # m
RETRY_SPEED_FACTOR = 0.7
MAX_RETRIES = 3
REVISIT_DISTANCE = 0.5       # m
REVISIT_ANGLE = 20.0         # deg
REVISIT_GAP = 32             # frames
REVISIT_TOP_K = 5
OVERSAMPLE = 16


# -- quaternions ------------------------------------------------------------

def qmul(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def qconj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qlog(q) -> np.ndarray:
    """Log of a unit quaternion as a 3-vector (half the rotation vector)."""
    q = np.asarray(q, dtype=float)
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = np.arctan2(n, q[..., :1])
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(n > 1e-15, theta / n, 1.0)
    return v * scale


def qexp(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(n > 1e-15, np.sin(n) / n, 1.0)
    return np.concatenate([np.cos(n), u * s], axis=-1)


def qangle(a, b) -> np.ndarray:
    """Geodesic rotation angle between unit quaternions, radians."""
    d = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, -1.0, 1.0))


def slerp(q0, q1, h, shortest: bool = True):
    q0, q1 = np.asarray(q0, dtype=float), np.asarray(q1, dtype=float)
    h = np.asarray(h, dtype=float)[..., None]
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    if shortest:
        q1 = np.where(dot < 0, -q1, q1)
        dot = np.abs(dot)
    dot = np.clip(dot, -1.0, 1.0)
    omega = np.arccos(dot)
    so = np.sin(omega)
    small = so < 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - h, np.sin((1.0 - h) * omega) / so)
        b = np.where(small, h, np.sin(h * omega) / so)
    out = a * q0 + b * q1
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def quat_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]]).as_matrix()


def matrix_to_quat(r) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(r, dtype=float)).as_quat()
    return xyzw[..., [3, 0, 1, 2]]


def axis_angle_quat(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle_rad / 2)], np.sin(angle_rad / 2) * axis])


def yaw_pitch_quat(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Yaw about world up, then pitch about the camera's right axis; zero roll."""
    q_yaw = axis_angle_quat(WORLD_UP, np.radians(yaw_deg))
    q_pitch = axis_angle_quat([1.0, 0.0, 0.0], np.radians(pitch_deg))
    return qmul(q_yaw, q_pitch)


def align_hemisphere(qs: np.ndarray) -> np.ndarray:
    qs = np.array(qs, dtype=float)
    for i in range(1, len(qs)):
        if np.dot(qs[i - 1], qs[i]) < 0:
            qs[i] = -qs[i]
    return qs


# -- domain types -----------------------------------------------------------

@dataclass(frozen=True)
class Waypoint:
    position: tuple[float, float, float]
    yaw: float
    pitch: float
    time: float
    revisit_tag: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> Waypoint:
        return cls(tuple(float(x) for x in d["position"]), float(d["yaw"]), float(d["pitch"]),
                   float(d["time"]), d.get("revisit_tag"))


@dataclass(frozen=True)
class RevisitPair:
    i: int
    j: int
    distance: float
    angle: float

    @property
    def score(self) -> float:
        return self.distance / REVISIT_DISTANCE + self.angle / REVISIT_ANGLE

    def to_dict(self) -> dict:
        return {"i": self.i, "j": self.j, "distance": self.distance, "angle": self.angle, "score": self.score}


@dataclass
class Trajectory:
    quaternions: np.ndarray   # (N, 4) wxyz, camera-to-world
    positions: np.ndarray     # (N, 3) camera centres
    fps: float
    intrinsics: Intrinsics | None = None

    def __post_init__(self):
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.quaternions) == 0 or len(self.quaternions) != len(self.positions):
            raise InvalidInputError("trajectory needs matching, nonempty rotation and position tracks")
        if not np.allclose(np.linalg.norm(self.quaternions, axis=1), 1.0, atol=1e-9):
            raise InvalidInputError("trajectory quaternions must be unit length")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def from_poses(cls, rotations, positions, fps: float, intrinsics: Intrinsics | None = None) -> Trajectory:
        return cls(matrix_to_quat(rotations), positions, fps, intrinsics)

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.quaternions)

    @property
    def poses(self) -> list[CameraPose]:
        return [CameraPose(r, o) for r, o in zip(self.rotations, self.positions)]

    def subsample(self, indices) -> Trajectory:
        idx = np.asarray(indices, dtype=int)
        return Trajectory(self.quaternions[idx], self.positions[idx], self.fps, self.intrinsics)


@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def apply_trajectory(self, traj: Trajectory) -> Trajectory:
        rots = np.einsum("ij,njk->nik", self.rotation, traj.rotations)
        return Trajectory.from_poses(rots, self.apply(traj.positions), traj.fps, traj.intrinsics)


@dataclass(frozen=True)
class PoseMetrics:
    rot_err: float
    trans_err: float
    cam_mc: float

    def to_dict(self) -> dict:
        return {"rot_err_deg": self.rot_err, "trans_err": self.trans_err, "cam_mc": self.cam_mc}


@dataclass
class GenerationStatus:
    retries: int = 0
    collision: bool = False
    speed_limit: float = 0.0
    speed: float = 0.0
    scale: float = 1.0
    min_clearance: float | None = None
    attempts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "retries": self.retries, "collision": self.collision, "speed_limit": self.speed_limit,
            "speed": self.speed, "scale": self.scale, "min_clearance": self.min_clearance,
            "attempts": self.attempts,
        }


# -- splines ----------------------------------------------------------------

def _phantom_ends(p: np.ndarray) -> np.ndarray:
    # mirrored endpoints; plain duplication would give zero-length centripetal knots
    return np.concatenate([2 * p[:1] - p[1:2], p, 2 * p[-1:] - p[-2:-1]])


def _centripetal_knots(p: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1) ** alpha
    scale = max(float(seg.max(initial=0.0)), 1.0)
    seg = np.maximum(seg, 1e-9 * scale)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _barry_goldman(p0, p1, p2, p3, t0, t1, t2, t3, t):
    t = t[:, None]

    def lerp(a, b, ta, tb):
        return ((tb - t) * a + (t - ta) * b) / (tb - ta)

    a1 = lerp(p0, p1, t0, t1)
    a2 = lerp(p1, p2, t1, t2)
    a3 = lerp(p2, p3, t2, t3)
    b1 = lerp(a1, a2, t0, t2)
    b2 = lerp(a2, a3, t1, t3)
    return lerp(b1, b2, t1, t2)


def _segment_index(knot_times: np.ndarray, times: np.ndarray) -> np.ndarray:
    seg = np.searchsorted(knot_times, times, side="right") - 1
    return np.clip(seg, 0, len(knot_times) - 2)


def catmull_rom(points, point_times, eval_times, alpha: float = 0.5) -> np.ndarray:
    """Centripetal Catmull-Rom through ``points`` reached at ``point_times``.

    Each evaluation time is mapped linearly from its segment's time span onto
    that segment's centripetal knot interval.
    """
    p = np.asarray(points, dtype=float)
    ts = np.asarray(point_times, dtype=float)
    te = np.asarray(eval_times, dtype=float)
    if len(p) < 2:
        raise InvalidInputError("Catmull-Rom needs at least two points")
    if np.any(np.diff(ts) <= 0):
        raise InvalidInputError("point times must be strictly increasing")
    ext = _phantom_ends(p)
    knots = _centripetal_knots(ext, alpha)
    seg = _segment_index(ts, te)
    out = np.empty((len(te), p.shape[1]))
    for s in np.unique(seg):
        m = seg == s
        k0, k1, k2, k3 = knots[s:s + 4]
        u = k1 + (te[m] - ts[s]) / (ts[s + 1] - ts[s]) * (k2 - k1)
        out[m] = _barry_goldman(*ext[s:s + 4], k0, k1, k2, k3, u)
    return out


def _waypoint_times(waypoints: Sequence[Waypoint]) -> np.ndarray:
    return np.array([w.time for w in waypoints], dtype=float)


def catmull_rom_positions(waypoints: Sequence[Waypoint], frame_times) -> np.ndarray:
    if len(waypoints) < 2:
        raise InvalidInputError("need at least two waypoints")
    pts = np.array([w.position for w in waypoints], dtype=float)
    return catmull_rom(pts, _waypoint_times(waypoints), frame_times)


def squad_quaternions(quats, key_times, eval_times) -> np.ndarray:
    """Squad through unit keys; reduces to slerp when there are two keys."""
    q = align_hemisphere(np.asarray(quats, dtype=float))
    ts = np.asarray(key_times, dtype=float)
    te = np.asarray(eval_times, dtype=float)
    n = len(q)
    ctrl = q.copy()
    for i in range(1, n - 1):
        inv = qconj(q[i])
        a = qlog(qmul(inv, q[i + 1]))
        b = qlog(qmul(inv, q[i - 1]))
        ctrl[i] = qmul(q[i], qexp(-(a + b) / 4.0))
    seg = _segment_index(ts, te)
    h = np.clip((te - ts[seg]) / (ts[seg + 1] - ts[seg]), 0.0, 1.0)
    outer = slerp(q[seg], q[seg + 1], h, shortest=False)
    inner = slerp(ctrl[seg], ctrl[seg + 1], h, shortest=False)
    out = slerp(outer, inner, 2 * h * (1 - h), shortest=False)
    return align_hemisphere(out)


def squad_rotations(waypoints: Sequence[Waypoint], frame_times) -> np.ndarray:
    quats = np.stack([yaw_pitch_quat(w.yaw, w.pitch) for w in waypoints])
    return squad_quaternions(quats, _waypoint_times(waypoints), frame_times)


# -- reparameterization and smoothing --------------------------------------

def equal_arc_params(samples: np.ndarray, count: int) -> np.ndarray:
    """Fractional sample indices at equal cumulative chord length."""
    samples = np.asarray(samples, dtype=float)
    chord = np.linalg.norm(np.diff(samples, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(chord)])
    if cum[-1] <= 0:
        return np.zeros(count)
    targets = np.linspace(0.0, cum[-1], count)
    idx = np.arange(len(samples), dtype=float)
    # strictly increasing abscissa for interp; zero-length chords collapse harmlessly
    return np.interp(targets, cum, idx)


def _interp_rows(samples: np.ndarray, params: np.ndarray) -> np.ndarray:
    lo = np.clip(np.floor(params).astype(int), 0, len(samples) - 2)
    frac = (params - lo)[:, None]
    return (1 - frac) * samples[lo] + frac * samples[lo + 1]


def arc_length_reparam(positions, frame_count: int, oversample: int = OVERSAMPLE,
                       return_params: bool = False):
    """Resample a path to ``frame_count`` points at equal arc-length spacing.

    The path is first densified to ``oversample * frame_count`` points with a
    centripetal Catmull-Rom through the input samples, then cumulative chord
    length on the dense polyline is inverted. With ``return_params`` the
    fractional input-sample index of every output frame is also returned, so
    other tracks (times, rotations) can follow the same reparameterization.
    """
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        raise InvalidInputError("arc-length reparameterization needs at least two samples")
    idx = np.arange(len(p), dtype=float)
    dense_u = np.linspace(0.0, len(p) - 1, max(oversample * frame_count, len(p)))
    if np.allclose(p, p[0]):
        out = np.repeat(p[:1], frame_count, axis=0)
        params = np.linspace(0.0, len(p) - 1, frame_count)
    else:
        dense = catmull_rom(p, idx, dense_u)
        dp = equal_arc_params(dense, frame_count)
        out = _interp_rows(dense, dp)
        params = np.interp(dp, np.arange(len(dense_u)), dense_u)
    return (out, params) if return_params else out


def laplacian_smooth(positions, sigma: float, lam: float = 0.5) -> np.ndarray:
    """``round(sigma)`` Jacobi sweeps of ``x += lam * (mean(neighbours) - x)``; ends fixed."""
    if sigma < 0:
        raise InvalidInputError("sigma must be >= 0")
    x = np.array(positions, dtype=float)
    for _ in range(int(round(sigma))):
        if len(x) < 3:
            break
        avg = 0.5 * (x[:-2] + x[2:])
        x[1:-1] = x[1:-1] + lam * (avg - x[1:-1])
    return x


def clamp_angular_velocity(quats, fps: float, limit_deg_per_s: float = ANGULAR_LIMIT) -> np.ndarray:
    """Single forward pass limiting each frame-to-frame rotation to ``limit / fps``."""
    if limit_deg_per_s <= 0:
        raise InvalidInputError("angular limit must be positive")
    q = np.array(quats, dtype=float)
    max_step = np.radians(limit_deg_per_s) / fps
    for i in range(1, len(q)):
        ang = qangle(q[i - 1], q[i])
        if ang > max_step:
            q[i] = slerp(q[i - 1], q[i], max_step / ang)
    return align_hemisphere(q)


def angular_speeds(quats, fps: float) -> np.ndarray:
    """Per-step angular velocity, deg/s."""
    q = np.asarray(quats)
    return np.degrees(qangle(q[:-1], q[1:])) * fps


def linear_speeds(positions, fps: float) -> np.ndarray:
    return np.linalg.norm(np.diff(positions, axis=0), axis=1) * fps


def scene_speed_limit(median_depth: float, duration: float) -> float:
    if not median_depth > 0:
        raise InvalidInputError("median depth must be positive")
    if not duration > 0:
        raise InvalidInputError("duration must be positive")
    return min(MAX_SPEED, DEPTH_TRAVEL_FRACTION * median_depth / duration)


# -- generation -------------------------------------------------------------

@dataclass
class Scene:
    median_depth: float
    point_cloud: np.ndarray | None = None
    intrinsics: Intrinsics | None = None


def frame_count(duration: float, fps: float) -> int:
    """Camera frames for a clip, endpoints inclusive (60 s at 16 fps -> 961)."""
    return int(round(duration * fps)) + 1


def _normalized_times(waypoints: Sequence[Waypoint], duration: float) -> np.ndarray:
    t = _waypoint_times(waypoints)
    if np.any(np.diff(t) <= 0):
        raise InvalidInputError("waypoint times must be strictly increasing")
    return (t - t[0]) / (t[-1] - t[0]) * duration


def _scaled_waypoints(waypoints, times, factor):
    origin = np.asarray(waypoints[0].position, dtype=float)
    out = []
    for w, t in zip(waypoints, times):
        pos = origin + factor * (np.asarray(w.position) - origin)
        out.append(Waypoint(tuple(pos), w.yaw, w.pitch, float(t), w.revisit_tag))
    return out


def _build_track(waypoints: Sequence[Waypoint], n: int, fps: float, duration: float):
    dense_t = np.linspace(0.0, duration, OVERSAMPLE * n)
    dense = catmull_rom_positions(waypoints, dense_t)
    params = equal_arc_params(dense, n)
    times = np.interp(params, np.arange(len(dense_t)), dense_t)
    if np.allclose(dense, dense[0]):
        times = np.arange(n) / fps
    positions = catmull_rom_positions(waypoints, times)
    quats = squad_rotations(waypoints, times)
    positions = laplacian_smooth(positions, n / 200.0)
    quats = clamp_angular_velocity(quats, fps, ANGULAR_LIMIT)
    return quats, positions


def path_length(waypoints: Sequence[Waypoint], duration: float, samples: int) -> float:
    dense = catmull_rom_positions(waypoints, np.linspace(0.0, duration, samples))
    return float(np.sum(np.linalg.norm(np.diff(dense, axis=0), axis=1)))


def generate_trajectory(template: Sequence[Waypoint], scene: Scene, duration: float = 60.0,
                        fps: float = 16.0, seed: int = 0, max_points: int = 200_000):
    """Scale a template to the scene, interpolate, smooth and collision-check it.

    The template is treated as a shape: it is scaled about its first waypoint
    so the path covers ``speed * duration`` metres, with ``speed`` the scene
    limit. A camera centre closer than 0.3 m to any cloud point is a
    collision; each of up to three retries multiplies the speed by 0.7. The
    seed only drives the subsampling of clouds larger than ``max_points``.

    Returns ``(trajectory, status)``; after three failed retries the last
    attempt is returned with ``status.collision`` set.
    """
    if len(template) < 2:
        raise InvalidInputError("template needs at least two waypoints")
    n = frame_count(duration, fps)
    times = _normalized_times(template, duration)
    base = _scaled_waypoints(template, times, 1.0)
    v_max = scene_speed_limit(scene.median_depth, duration)
    length = path_length(base, duration, OVERSAMPLE * n)

    tree = None
    if scene.point_cloud is not None and len(scene.point_cloud):
        cloud = np.asarray(scene.point_cloud, dtype=float).reshape(-1, 3)
        if len(cloud) > max_points:
            rng = np.random.default_rng(seed)
            cloud = cloud[np.sort(rng.choice(len(cloud), max_points, replace=False))]
        tree = cKDTree(cloud)

    status = GenerationStatus(speed_limit=v_max)
    speed = v_max
    for attempt in range(MAX_RETRIES + 1):
        factor = speed * duration / length if length > 0 else 1.0
        quats, positions = _build_track(_scaled_waypoints(base, times, factor), n, fps, duration)
        clearance = None
        collided = False
        if tree is not None:
            dist, _ = tree.query(positions)
            clearance = float(dist.min())
            collided = clearance < COLLISION_MARGIN
        status.attempts.append({"speed": speed, "scale": factor, "min_clearance": clearance, "collision": collided})
        status.retries, status.speed, status.scale = attempt, speed, factor
        status.min_clearance, status.collision = clearance, collided
        if not collided or attempt == MAX_RETRIES:
            break
        speed *= RETRY_SPEED_FACTOR
    return Trajectory(quats, positions, fps, scene.intrinsics), status


# -- revisits ---------------------------------------------------------------

def detect_revisits(traj: Trajectory, min_gap: int = REVISIT_GAP, max_distance: float = REVISIT_DISTANCE,
                    max_angle: float = REVISIT_ANGLE, top_k: int | None = None) -> list[RevisitPair]:
    """Frame pairs at least ``min_gap`` apart that nearly share a viewpoint.

    Distance is between camera centres, angle between forward (optical)
    axes; both thresholds are strict. Pairs are sorted by
    ``distance/0.5 + angle/20`` (lower is better), ties by index.
    """
    pos = traj.positions
    fwd = traj.rotations[:, :, 2]
    pairs = cKDTree(pos).query_pairs(max_distance, output_type="ndarray")
    if len(pairs) == 0:
        return []
    i, j = pairs.min(axis=1), pairs.max(axis=1)
    keep = j - i >= min_gap
    i, j = i[keep], j[keep]
    dist = np.linalg.norm(pos[i] - pos[j], axis=1)
    ang = np.degrees(np.arccos(np.clip(np.sum(fwd[i] * fwd[j], axis=1), -1.0, 1.0)))
    keep = (dist < max_distance) & (ang < max_angle)
    i, j, dist, ang = i[keep], j[keep], dist[keep], ang[keep]
    score = dist / REVISIT_DISTANCE + ang / REVISIT_ANGLE
    order = np.lexsort((j, i, score))
    if top_k is not None:
        order = order[:top_k]
    return [RevisitPair(int(i[o]), int(j[o]), float(dist[o]), float(ang[o])) for o in order]


# -- evaluation -------------------------------------------------------------

def umeyama_sim3(est, gt, with_scale: bool = True) -> Sim3:
    """Least-squares similarity mapping ``est`` points onto ``gt``."""
    x = np.asarray(est, dtype=float)
    y = np.asarray(gt, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise InvalidInputError("point sets must be equal-length (N, 3) arrays")
    if len(x) < 3:
        raise AlignmentError("need at least three points")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentError("estimated points are degenerate (coincident or collinear)")
    cov = yc.T @ xc / len(x)
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    rot = (u * s) @ vt
    scale = float(np.sum(d * s) / np.mean(np.sum(xc * xc, axis=1))) if with_scale else 1.0
    return Sim3(scale, rot, my - scale * rot @ mx)


def rotation_errors_deg(r_gt: np.ndarray, r_est: np.ndarray) -> np.ndarray:
    """Geodesic angle of ``R^T R~`` in degrees.

    Same value as ``arccos(clip((tr - 1) / 2, -1, 1))`` but computed with
    atan2 against the skew part, which keeps small angles (and exact zeros)
    accurate where arccos of a value near 1 loses half the digits.
    """
    rel = np.einsum("nji,njk->nik", r_gt, r_est)
    cos = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.stack([rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0], rel[:, 1, 0] - rel[:, 0, 1]], axis=1)
    sin = np.linalg.norm(skew, axis=1) / 2.0
    return np.degrees(np.arctan2(sin, cos))


def pose_errors(gt: Trajectory, est_aligned: Trajectory) -> PoseMetrics:
    """Mean RotErr (deg), TransErr and CamMC over frames; inputs already aligned."""
    if len(gt) != len(est_aligned):
        raise InvalidInputError(f"trajectory lengths differ: {len(gt)} vs {len(est_aligned)}")
    r_gt, r_est = gt.rotations, est_aligned.rotations
    t_gt, t_est = gt.positions, est_aligned.positions
    rot = rotation_errors_deg(r_gt, r_est)
    trans = np.linalg.norm(t_gt - t_est, axis=1)
    p_gt = np.concatenate([r_gt, t_gt[:, :, None]], axis=2)
    p_est = np.concatenate([r_est, t_est[:, :, None]], axis=2)
    cmc = np.linalg.norm(p_gt - p_est, axis=(1, 2))
    return PoseMetrics(float(rot.mean()), float(trans.mean()), float(cmc.mean()))


def relativize(traj: Trajectory) -> Trajectory:
    """Express every pose relative to the first frame."""
    r = traj.rotations
    r0t = r[0].T
    rots = np.einsum("ij,njk->nik", r0t, r)
    pos = (traj.positions - traj.positions[0]) @ r0t.T
    return Trajectory.from_poses(rots, pos, traj.fps, traj.intrinsics)


def remap_indices(n_ref: int, f_video: float, f_ref: float = 16.0) -> np.ndarray:
    """Reference frame ``i`` at ``f_ref`` reads video frame ``round(i * f_video / f_ref)`` (half up)."""
    return np.floor(np.arange(n_ref) * f_video / f_ref + 0.5).astype(int)


def evaluate_camera(gt: Trajectory, est: Trajectory) -> tuple[PoseMetrics, Sim3]:
    """Timestamp remap, first-frame relativization, Sim(3) alignment, metrics."""
    if est.fps != gt.fps:
        idx = remap_indices(len(gt), est.fps, gt.fps)
        if idx[-1] >= len(est):
            raise InvalidInputError(f"estimate has {len(est)} frames, remap needs index {idx[-1]}")
        est = est.subsample(idx)
    elif len(est) != len(gt):
        raise InvalidInputError(f"trajectory lengths differ: {len(gt)} vs {len(est)}")
    gt_rel, est_rel = relativize(gt), relativize(est)
    sim = umeyama_sim3(est_rel.positions, gt_rel.positions)
    return pose_errors(gt_rel, sim.apply_trajectory(est_rel)), sim


# -- file formats -----------------------------------------------------------

def trajectory_to_dict(traj: Trajectory, **extra) -> dict:
    out = {"fps": float(traj.fps),
           "intrinsics": traj.intrinsics.to_dict() if traj.intrinsics else None,
           "frames": [{"quaternion": [float(v) for v in q], "position": [float(v) for v in p]}
                      for q, p in zip(traj.quaternions, traj.positions)]}
    out.update(extra)
    return out


def trajectory_from_dict(d: dict) -> Trajectory:
    try:
        frames = d["frames"]
        quats = np.array([f["quaternion"] for f in frames], dtype=float)
        pos = np.array([f["position"] for f in frames], dtype=float)
        intr = Intrinsics.from_dict(d["intrinsics"]) if d.get("intrinsics") else None
        return Trajectory(quats, pos, float(d["fps"]), intr)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidInputError):
            raise
        raise InvalidInputError(f"malformed trajectory record: {exc}") from exc


def save_trajectory(path, traj: Trajectory, **extra) -> None:
    Path(path).write_text(json.dumps(trajectory_to_dict(traj, **extra), indent=1) + "\n")


def load_trajectory(path) -> Trajectory:
    return trajectory_from_dict(json.loads(Path(path).read_text()))


def load_point_cloud(path) -> np.ndarray:
    """``.bin``: little-endian float32 xyz triples; ``.npy``; anything else: whitespace text."""
    path = Path(path)
    if path.suffix == ".bin":
        data = np.fromfile(path, dtype="<f4")
        if data.size % 3:
            raise InvalidInputError("binary point cloud length is not a multiple of 3")
        return data.reshape(-1, 3).astype(float)
    if path.suffix == ".npy":
        return np.load(path).reshape(-1, 3).astype(float)
    data = np.loadtxt(path, ndmin=2)
    if data.size == 0:
        return np.zeros((0, 3))
    if data.shape[1] != 3:
        raise InvalidInputError("text point cloud must have three columns")
    return data


def load_template(source) -> list[Waypoint]:
    """Waypoints from a JSON file path or the name of a bundled illustrative template."""
    path = Path(str(source))
    if path.suffix == ".json" and path.exists():
        obj = json.loads(path.read_text())
    else:
        bundled = json.loads(resources.files("worldscan").joinpath("data/templates.json").read_text())
        if source not in bundled["templates"]:
            raise InvalidInputError(f"unknown template {source!r}; bundled: {sorted(bundled['templates'])}")
        obj = bundled["templates"][source]
    return [Waypoint.from_dict(w) for w in obj["waypoints"]]


def bundled_templates() -> list[str]:
    bundled = json.loads(resources.files("worldscan").joinpath("data/templates.json").read_text())
    return sorted(bundled["templates"])


def smoothness_stats(traj: Trajectory) -> dict:
    lin = linear_speeds(traj.positions, traj.fps)
    ang = angular_speeds(traj.quaternions, traj.fps)
    return {"frames": len(traj), "max_speed": float(lin.max(initial=0.0)),
            "mean_speed": float(lin.mean()) if len(lin) else 0.0,
            "max_angular_velocity_deg_s": float(ang.max(initial=0.0))}


def evaluate_many(pairs: Sequence[tuple[Trajectory, Trajectory]], workers: int = 1,
                  fn: Callable = evaluate_camera) -> list:
    """Evaluate several scenes, merged back in input order."""
    if workers <= 1:
        return [fn(g, e) for g, e in pairs]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ge: fn(*ge), pairs))
