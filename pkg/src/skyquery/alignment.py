"""Keypoint-based frame alignment and geolocation.

Keypoints observed across video frames are aggregated into stable groups
(one contiguous overflight of a ground feature), each group is geolocated by
least squares from the drone poses that observed it, stable groups are
merged into global groups across flights, and finally the pose of a new
frame is re-estimated by matching its keypoints against the global groups.

Conventions: pixel offsets are measured from the image center with +x to
the right and +y downward.  At heading ``alpha = 0`` image-right points
east and image-up points north; ``alpha`` rotates counterclockwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import WorldCoord

RANK_COND_LIMIT = 1e8
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class AlignmentError(ValueError):
    pass


class LogFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class SensorPose:
    x: float
    y: float
    h: float
    alpha: float  # radians counterclockwise from east

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h])


@dataclass(frozen=True)
class CameraIntrinsics:
    width_px: int
    height_px: int
    fov_x: float  # radians

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0 < self.fov_x < math.pi:
            raise ValueError("fov_x must lie in (0, pi)")

    @property
    def fov_y(self) -> float:
        return 2.0 * math.atan(math.tan(self.fov_x / 2) * self.height_px / self.width_px)

    @property
    def focal_px(self) -> float:
        """Pixels per unit tangent; identical on both axes."""
        return (self.width_px / 2) / math.tan(self.fov_x / 2)

    def in_frame(self, px: float, py: float) -> bool:
        return abs(px) <= self.width_px / 2 and abs(py) <= self.height_px / 2


@dataclass(frozen=True)
class KeypointObservation:
    frame_id: int
    px: float
    py: float
    descriptor: tuple[float, ...]


@dataclass
class Frame:
    frame_id: int
    t_ms: int
    pose: SensorPose
    keypoints: list[KeypointObservation] = field(default_factory=list)


@dataclass(frozen=True)
class AlignmentParams:
    T_f: float = 0.25
    T_d_px: float = 20.0
    T_d_m: float = 3.0
    min_group_size: int = 2
    max_gap_frames: int = 3

    def __post_init__(self):
        if min(self.T_f, self.T_d_px, self.T_d_m) <= 0:
            raise ValueError("alignment thresholds must be positive")
        if self.min_group_size < 2:
            raise ValueError("min_group_size must be at least 2")
        if self.max_gap_frames < 0:
            raise ValueError("max_gap_frames must be non-negative")


@dataclass
class StableGroup:
    members: list[KeypointObservation] = field(default_factory=list)
    coord: Optional[WorldCoord] = None
    _desc_sum: Optional[np.ndarray] = field(default=None, repr=False)

    def add(self, kp: KeypointObservation) -> None:
        if self.members and kp.frame_id <= self.members[-1].frame_id:
            raise AlignmentError("stable group member frames must strictly increase")
        d = np.asarray(kp.descriptor, dtype=float)
        self._desc_sum = d.copy() if self._desc_sum is None else self._desc_sum + d
        self.members.append(kp)

    @property
    def mean_descriptor(self) -> np.ndarray:
        return self._desc_sum / len(self.members)

    @property
    def last(self) -> KeypointObservation:
        return self.members[-1]

    def __len__(self) -> int:
        return len(self.members)


@dataclass
class GlobalGroup:
    members: list[StableGroup] = field(default_factory=list)
    _coord_sum: np.ndarray = field(default_factory=lambda: np.zeros(3), repr=False)
    _desc_sum: Optional[np.ndarray] = field(default=None, repr=False)

    def add(self, s: StableGroup) -> None:
        if s.coord is None:
            raise AlignmentError("stable group has no coordinate estimate")
        self._coord_sum = self._coord_sum + s.coord.as_array()
        md = s.mean_descriptor
        self._desc_sum = md.copy() if self._desc_sum is None else self._desc_sum + md
        self.members.append(s)

    @property
    def coord(self) -> WorldCoord:
        c = self._coord_sum / len(self.members)
        return WorldCoord(float(c[0]), float(c[1]), float(c[2]))

    @property
    def coord_array(self) -> np.ndarray:
        return self._coord_sum / len(self.members)

    @property
    def mean_descriptor(self) -> np.ndarray:
        return self._desc_sum / len(self.members)


# ---------------------------------------------------------------- geometry

def pixel_to_angles(px: float, py: float, cam: CameraIntrinsics) -> tuple[float, float]:
    """Angles between the camera axis and the ray through pixel ``(px, py)``.

    ``theta_y`` is positive toward image-up, so a downward pixel offset gives
    a negative angle.
    """
    theta_x = math.atan(px * math.tan(cam.fov_x / 2) / (cam.width_px / 2))
    theta_y = math.atan(-py * math.tan(cam.fov_y / 2) / (cam.height_px / 2))
    return theta_x, theta_y


def ground_tangents(px: float, py: float, alpha: float, cam: CameraIntrinsics) -> tuple[float, float]:
    """World-frame offset per meter of height below the camera for a pixel."""
    tx, ty = (math.tan(a) for a in pixel_to_angles(px, py, cam))
    c, s = math.cos(alpha), math.sin(alpha)
    return tx * c - ty * s, tx * s + ty * c


def project_point(pose: SensorPose, point: Sequence[float], cam: CameraIntrinsics
                  ) -> Optional[tuple[float, float]]:
    """Pixel position of a world point, or None if it is not below the camera."""
    x, y, h = point
    depth = pose.h - h
    if depth <= 0:
        return None
    u = (x - pose.x) / depth
    v = (y - pose.y) / depth
    c, s = math.cos(pose.alpha), math.sin(pose.alpha)
    tx = u * c + v * s
    ty = -u * s + v * c
    f = cam.focal_px
    return tx * f, -ty * f


def predict_displacement(prev: SensorPose, cur: SensorPose, kp_px: tuple[float, float],
                         cam: CameraIntrinsics) -> tuple[float, float]:
    """Ego-motion pixel displacement of a ground-plane point between two poses."""
    if cur.h <= 0 or prev.h <= 0:
        raise AlignmentError("ego-motion model needs positive drone heights")
    u, v = ground_tangents(kp_px[0], kp_px[1], prev.alpha, cam)
    ground = (prev.x + prev.h * u, prev.y + prev.h * v, 0.0)
    nxt = project_point(cur, ground, cam)
    assert nxt is not None
    return nxt[0] - kp_px[0], nxt[1] - kp_px[1]


# ------------------------------------------------------- stable grouping

def aggregate_stable_groups(frames: Sequence[Frame], params: AlignmentParams,
                            cam: CameraIntrinsics) -> list[StableGroup]:
    """Greedy streaming aggregation of keypoints into stable groups.

    A keypoint joins the eligible group with the nearest mean descriptor
    among those passing both the descriptor gate (``< T_f``) and the
    ego-motion pixel gate (``< T_d_px``).  A group is eligible if it has no
    member from the current frame and its last member is at most
    ``max_gap_frames`` frames old.
    """
    groups: list[StableGroup] = []
    active: list[int] = []
    poses: dict[int, SensorPose] = {}
    dim: Optional[int] = None
    last_fid: Optional[int] = None
    for fr in frames:
        if last_fid is not None and fr.frame_id <= last_fid:
            raise AlignmentError(f"frame {fr.frame_id} out of order")
        last_fid = fr.frame_id
        poses[fr.frame_id] = fr.pose
        active = [g for g in active if fr.frame_id - groups[g].last.frame_id <= params.max_gap_frames + 1]
        for kp in fr.keypoints:
            if dim is None:
                dim = len(kp.descriptor)
            elif len(kp.descriptor) != dim:
                raise AlignmentError(f"descriptor dimension {len(kp.descriptor)} != {dim}")
            chosen = None
            if active:
                f = np.asarray(kp.descriptor, dtype=float)
                means = np.stack([groups[g].mean_descriptor for g in active])
                dist = np.linalg.norm(means - f, axis=1)
                order = np.argsort(dist, kind="stable")
                for k in order:
                    if dist[k] >= params.T_f:
                        break
                    g = groups[active[k]]
                    if g.last.frame_id >= fr.frame_id:
                        continue
                    dx, dy = predict_displacement(poses[g.last.frame_id], fr.pose,
                                                  (g.last.px, g.last.py), cam)
                    if math.hypot(g.last.px + dx - kp.px, g.last.py + dy - kp.py) < params.T_d_px:
                        chosen = g
                        break
            if chosen is None:
                chosen = StableGroup()
                groups.append(chosen)
                active.append(len(groups) - 1)
            chosen.add(kp)
    return [g for g in groups if len(g) >= params.min_group_size]


# ------------------------------------------------------- geolocation

def _group_system(group: StableGroup, poses: dict[int, SensorPose], cam: CameraIntrinsics):
    rows, rhs = [], []
    for kp in group.members:
        pose = poses[kp.frame_id]
        u, v = ground_tangents(kp.px, kp.py, pose.alpha, cam)
        # (d.h - s.h) u = s.x - d.x   ->   s.x + u s.h = d.x + u d.h
        rows.append((1.0, 0.0, u))
        rhs.append(pose.x + u * pose.h)
        rows.append((0.0, 1.0, v))
        rhs.append(pose.y + v * pose.h)
    return np.array(rows), np.array(rhs)


def estimate_group_coord(group: StableGroup, poses: dict[int, SensorPose],
                         cam: CameraIntrinsics) -> WorldCoord:
    """Least-squares world position of a stable group.

    Falls back to a ground-plane solution (``h = 0``) when the full system
    is rank deficient, e.g. a point only ever seen at nadir.
    """
    if len(group) < 2:
        raise AlignmentError("need at least 2 observations to geolocate a group")
    A, b = _group_system(group, poses, cam)
    if np.linalg.cond(A) <= RANK_COND_LIMIT:
        sol = np.linalg.lstsq(A, b, rcond=None)[0]
        return WorldCoord(float(sol[0]), float(sol[1]), float(sol[2]))
    A2 = A[:, :2]
    if np.linalg.cond(A2) > RANK_COND_LIMIT:
        raise AlignmentError("ground-plane system is singular")
    sol = np.linalg.lstsq(A2, b, rcond=None)[0]
    return WorldCoord(float(sol[0]), float(sol[1]), 0.0)


def group_residual(group: StableGroup, poses: dict[int, SensorPose], cam: CameraIntrinsics,
                   coord: Sequence[float]) -> float:
    A, b = _group_system(group, poses, cam)
    return float(np.linalg.norm(A @ np.asarray(coord, dtype=float) - b))


def merge_global_groups(stable: Iterable[StableGroup], params: AlignmentParams) -> list[GlobalGroup]:
    """Each stable group joins the first global group within ``T_d_m`` meters
    and ``T_f`` descriptor distance, else founds a new one."""
    out: list[GlobalGroup] = []
    for s in stable:
        if s.coord is None:
            raise AlignmentError("every stable group needs a coordinate before merging")
        c = s.coord.as_array()
        f = s.mean_descriptor
        for g in out:
            if (np.linalg.norm(c - g.coord_array) < params.T_d_m
                    and np.linalg.norm(f - g.mean_descriptor) < params.T_f):
                g.add(s)
                break
        else:
            g = GlobalGroup()
            g.add(s)
            out.append(g)
    return out


# ------------------------------------------------------- pose estimation

@dataclass(frozen=True)
class PoseEstimate:
    pose: SensorPose
    sensor_only: bool
    n_matches: int
    residual: float = float("nan")


def match_keypoints(keypoints: Sequence[KeypointObservation], globals_: Sequence[GlobalGroup],
                    T_f: float) -> list[tuple[KeypointObservation, GlobalGroup]]:
    """Nearest-descriptor matches under ``T_f``; each global group keeps its closest keypoint."""
    if not keypoints or not globals_:
        return []
    means = np.stack([g.mean_descriptor for g in globals_])
    best: dict[int, tuple[float, int]] = {}
    for i, kp in enumerate(keypoints):
        dist = np.linalg.norm(means - np.asarray(kp.descriptor, dtype=float), axis=1)
        j = int(np.argmin(dist))
        if dist[j] < T_f and (j not in best or dist[j] < best[j][0]):
            best[j] = (float(dist[j]), i)
    return [(keypoints[i], globals_[j]) for j, (_, i) in sorted(best.items())]


def _solve_position(tangents: np.ndarray, coords: np.ndarray, alpha: float):
    c, s = math.cos(alpha), math.sin(alpha)
    u = tangents[:, 0] * c - tangents[:, 1] * s
    v = tangents[:, 0] * s + tangents[:, 1] * c
    n = len(u)
    A = np.zeros((2 * n, 3))
    A[0::2, 0] = 1.0
    A[1::2, 1] = 1.0
    A[0::2, 2] = u
    A[1::2, 2] = v
    b = np.empty(2 * n)
    # (d.h - s.h) u = s.x - d.x   ->   d.x + u d.h = s.x + u s.h
    b[0::2] = coords[:, 0] + u * coords[:, 2]
    b[1::2] = coords[:, 1] + v * coords[:, 2]
    sol = np.linalg.lstsq(A, b, rcond=None)[0]
    return sol, float(np.linalg.norm(A @ sol - b))


def estimate_frame_pose(keypoints: Sequence[KeypointObservation], globals_: Sequence[GlobalGroup],
                        sensor_prior: SensorPose, cam: CameraIntrinsics, params: AlignmentParams,
                        search_deg: float = 10.0, tol: float = 1e-10) -> PoseEstimate:
    """Re-estimate a frame's pose from keypoint matches against global groups.

    Position is solved linearly at fixed heading; heading is refined by
    golden-section search within ``search_deg`` of the prior.
    """
    matches = match_keypoints(keypoints, globals_, params.T_f)
    if len(matches) < 3:
        return PoseEstimate(sensor_prior, True, len(matches))
    tangents = np.array([[math.tan(a) for a in pixel_to_angles(kp.px, kp.py, cam)]
                         for kp, _ in matches])
    coords = np.stack([g.coord_array for _, g in matches])

    def cost(alpha: float) -> float:
        return _solve_position(tangents, coords, alpha)[1]

    lo = sensor_prior.alpha - math.radians(search_deg)
    hi = sensor_prior.alpha + math.radians(search_deg)
    a = hi - GOLDEN * (hi - lo)
    b = lo + GOLDEN * (hi - lo)
    fa, fb = cost(a), cost(b)
    while hi - lo > tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - GOLDEN * (hi - lo)
            fa = cost(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + GOLDEN * (hi - lo)
            fb = cost(b)
    alpha = (lo + hi) / 2
    sol, res = _solve_position(tangents, coords, alpha)
    if sol[2] <= 0 or not np.all(np.isfinite(sol)):
        return PoseEstimate(sensor_prior, True, len(matches))
    return PoseEstimate(SensorPose(float(sol[0]), float(sol[1]), float(sol[2]), alpha),
                        False, len(matches), res)


# ------------------------------------------------------- pipeline

@dataclass
class AlignmentResult:
    stable: list[StableGroup]
    globals: list[GlobalGroup]
    poses: dict[int, PoseEstimate]


def run_alignment(frames: Sequence[Frame], params: AlignmentParams, cam: CameraIntrinsics
                  ) -> AlignmentResult:
    """aggregate -> geolocate -> merge -> per-frame pose."""
    poses = {fr.frame_id: fr.pose for fr in frames}
    stable = aggregate_stable_groups(frames, params, cam)
    located = []
    for g in stable:
        try:
            g.coord = estimate_group_coord(g, poses, cam)
        except AlignmentError:
            continue
        located.append(g)
    globals_ = merge_global_groups(located, params)
    out = {fr.frame_id: estimate_frame_pose(fr.keypoints, globals_, fr.pose, cam, params)
           for fr in frames}
    return AlignmentResult(located, globals_, out)


# ------------------------------------------------------- keypoint log

def read_keypoint_log(path: str | Path) -> tuple[int, list[Frame]]:
    """Parse a keypoint log: a header line ``{"descriptor_dim": D}`` then one
    JSON object per frame."""
    frames: list[Frame] = []
    dim: Optional[int] = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogFormatError(lineno, f"malformed record ({e.msg})") from None
            if dim is None:
                if not isinstance(rec, dict) or "descriptor_dim" not in rec:
                    raise LogFormatError(lineno, "expected header with descriptor_dim")
                dim = int(rec["descriptor_dim"])
                continue
            try:
                x, y, h, alpha = (float(v) for v in rec["pose"])
                fid = int(rec["frame_id"])
                kps = []
                for px, py, desc in rec.get("keypoints", []):
                    if len(desc) != dim:
                        raise LogFormatError(lineno, f"descriptor of length {len(desc)}, expected {dim}")
                    kps.append(KeypointObservation(fid, float(px), float(py),
                                                   tuple(float(v) for v in desc)))
                frames.append(Frame(fid, int(rec["t_ms"]), SensorPose(x, y, h, alpha), kps))
            except LogFormatError:
                raise
            except (KeyError, TypeError, ValueError) as e:
                raise LogFormatError(lineno, f"malformed frame record ({e})") from None
            if len(frames) > 1 and frames[-1].frame_id <= frames[-2].frame_id:
                raise LogFormatError(lineno, "frame ids must increase")
    return (dim or 0), frames


def write_keypoint_log(path: str | Path, frames: Sequence[Frame], dim: int) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"descriptor_dim": dim}) + "\n")
        for fr in frames:
            p = fr.pose
            fh.write(json.dumps({
                "frame_id": fr.frame_id, "t_ms": fr.t_ms, "pose": [p.x, p.y, p.h, p.alpha],
                "keypoints": [[kp.px, kp.py, list(kp.descriptor)] for kp in fr.keypoints],
            }) + "\n")


# ------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticScene:
    cam: CameraIntrinsics
    points: np.ndarray  # (n, 3) ground truth
    descriptors: np.ndarray  # (n, D)
    frames: list[Frame]  # keypoints with sensor (noisy) poses
    true_poses: dict[int, SensorPose]
    flight_of: dict[int, int]


def synthetic_scene(seed: int = 0, n_points: int = 60, n_flights: int = 4, frames_per_flight: int = 50,
                    extent_m: float = 200.0, altitude_m: float = 100.0, gps_sigma: float = 2.0,
                    heading_sigma_deg: float = 1.0, jitter_m: float = 0.02, pixel_sigma: float = 0.0,
                    descriptor_dim: int = 32, descriptor_noise: float = 0.01,
                    cam: Optional[CameraIntrinsics] = None) -> SyntheticScene:
    """Straight overflights of a random point field.

    Sensor poses carry a per-flight GPS bias of ``gps_sigma`` meters per
    axis (and a heading bias) plus small per-frame jitter, the usual shape
    of consumer GPS error.
    """
    rng = np.random.default_rng(seed)
    cam = cam or CameraIntrinsics(1920, 1080, math.radians(90))
    pts = np.column_stack([rng.uniform(-extent_m / 2, extent_m / 2, n_points),
                           rng.uniform(-extent_m / 2, extent_m / 2, n_points),
                           rng.uniform(0.0, 5.0, n_points)])
    desc = rng.normal(size=(n_points, descriptor_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    frames: list[Frame] = []
    truth: dict[int, SensorPose] = {}
    flight_of: dict[int, int] = {}
    fid = 0
    t_ms = 0
    for fl in range(n_flights):
        heading = rng.uniform(0, 2 * math.pi)
        offset = rng.uniform(-extent_m / 4, extent_m / 4)
        direction = np.array([math.cos(heading), math.sin(heading)])
        normal = np.array([-direction[1], direction[0]])
        start = -direction * extent_m * 0.6 + normal * offset
        step = 1.2 * extent_m / max(frames_per_flight - 1, 1)
        alt = altitude_m + rng.uniform(-10, 10)
        bias = rng.normal(0, gps_sigma, 3)
        head_bias = math.radians(rng.normal(0, heading_sigma_deg))
        for k in range(frames_per_flight):
            xy = start + direction * step * k
            true = SensorPose(float(xy[0]), float(xy[1]), alt, heading)
            j = rng.normal(0, jitter_m, 3)
            sensor = SensorPose(true.x + bias[0] + j[0], true.y + bias[1] + j[1],
                                true.h + bias[2] + j[2], heading + head_bias)
            kps = []
            for i in range(n_points):
                p = project_point(true, pts[i], cam)
                if p is None:
                    continue
                px = p[0] + rng.normal(0, pixel_sigma) if pixel_sigma else p[0]
                py = p[1] + rng.normal(0, pixel_sigma) if pixel_sigma else p[1]
                if not cam.in_frame(px, py):
                    continue
                d = desc[i] + rng.normal(0, descriptor_noise, descriptor_dim)
                kps.append(KeypointObservation(fid, float(px), float(py), tuple(float(v) for v in d)))
            frames.append(Frame(fid, t_ms, sensor, kps))
            truth[fid] = true
            flight_of[fid] = fl
            fid += 1
            t_ms += 500
        fid += 10  # frame-id gap between flights
        t_ms += 60_000
    return SyntheticScene(cam, pts, desc, frames, truth, flight_of)
