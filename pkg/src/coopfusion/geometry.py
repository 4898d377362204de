"""Rigid transforms, pinhole cameras, categorical depth maps, rays, boxes.

Conventions:
  * Pose maps local coordinates into the parent frame: p_parent = R @ p + t.
  * Camera frame is x-right, y-down, z-forward; depth is the camera-frame z
    coordinate (projective depth), which is also what depth-map bins quantize.
  * Boxes are BEV-upright: size = (w, h, l), yaw about +z, velocity in the
    same frame as the center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-9


class PoseError(ValueError):
    """Rotation is not orthonormal / not right-handed."""


class DegenerateRayError(ValueError):
    """Ray endpoints coincide (instance center at the camera origin)."""


class ParallelRaysError(ValueError):
    """Rays are parallel; no unique nearest-point pair."""


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    def validate(self) -> "Pose":
        r = self.rotation
        err = np.abs(r.T @ r - np.eye(3)).max()
        if err >= ORTHONORMAL_TOL:
            raise PoseError(f"rotation not orthonormal, |R^T R - I|_inf = {err:.3e}")
        if np.linalg.det(r) < 0.0:
            raise PoseError("rotation is left-handed (det < 0)")
        return self

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Local -> parent. Accepts (3,) or (n,3)."""
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def invert_apply(self, p: np.ndarray) -> np.ndarray:
        """Parent -> local."""
        p = np.asarray(p, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.rotation.T

    def inverse_rotate(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.rotation


def identity_pose(timestamp: float = 0.0) -> Pose:
    return Pose(np.eye(3), np.zeros(3), timestamp)


def rotz(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def pose_from_yaw(x: float, y: float, z: float, yaw: float, timestamp: float = 0.0) -> Pose:
    return Pose(rotz(yaw), np.array([x, y, z]), timestamp)


def compose(outer: Pose, inner: Pose) -> Pose:
    """Pose mapping inner-local -> outer-parent."""
    return Pose(outer.rotation @ inner.rotation,
                outer.rotation @ inner.translation + outer.translation,
                outer.timestamp)


def transform_pose_chain(src: Pose, dst: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(R, T) such that x_dst = R @ x_src + T. Validates both poses."""
    src.validate()
    dst.validate()
    r = dst.rotation.T @ src.rotation
    t = dst.rotation.T @ (src.translation - dst.translation)
    return r, t


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # (3,3) pinhole K
    extrinsic: Pose  # camera in agent frame
    width: int
    height: int
    depth_bins: int
    d_min: float
    d_max: float

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3))
        if self.depth_bins < 2:
            raise ValueError(f"depth_bins must be >= 2, got {self.depth_bins}")
        if not (0.0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.depth_bins

    @property
    def bin_centers(self) -> np.ndarray:
        """Center depth of each of the D uniform bins on [d_min, d_max]."""
        w = self.bin_width
        return self.d_min + w * (np.arange(self.depth_bins) + 0.5)


@dataclass
class DepthMap:
    """Per-pixel categorical distribution over depth bins, shape (H, W, D)."""

    probs: np.ndarray
    camera_index: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError(f"depth map must be (H, W, D), got {self.probs.shape}")

    def validate(self, tol: float = 1e-9) -> "DepthMap":
        sums = self.probs.sum(axis=-1)
        err = np.abs(sums - 1.0).max()
        if err >= tol:
            raise ValueError(f"depth map rows must sum to 1, max err {err:.3e}")
        if (self.probs < 0).any():
            raise ValueError("depth map has negative mass")
        return self


@dataclass(frozen=True)
class Ray:
    """Camera-origin ray toward an instance center.

    origin/direction live in whatever frame the caller built them in
    (sender-local on the wire, ego frame after alignment). axis_angle is the
    angle between the ray and the camera's optical axis, invariant under
    rigid transforms.
    """

    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,) unit
    axis_angle: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))


@dataclass
class Box3D:
    center: np.ndarray  # (3,)
    size: np.ndarray  # (w, h, l)
    yaw: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)


def camera_pose_in_world(cam: CameraModel, agent_pose: Pose) -> Pose:
    return compose(agent_pose, cam.extrinsic)


def project_point(cam: CameraModel, agent_pose: Pose, p_world: np.ndarray):
    """Project a world point through agent and camera extrinsics.

    Returns (pixel (2,), depth, in_view). Depth within 1e-9 of zero flags a
    degenerate projection (in_view False, pixel NaN) rather than raising.
    """
    world_cam = camera_pose_in_world(cam, agent_pose)
    pc = world_cam.invert_apply(np.asarray(p_world, dtype=np.float64))
    depth = float(pc[2])
    if abs(depth) <= 1e-9:
        return np.array([np.nan, np.nan]), depth, False
    k = cam.intrinsics
    px = k[0, 0] * pc[0] / depth + k[0, 2]
    py = k[1, 1] * pc[1] / depth + k[1, 2]
    in_view = (depth > 0.0) and (0.0 <= px <= cam.width - 1) and (0.0 <= py <= cam.height - 1)
    return np.array([px, py]), depth, bool(in_view)


def bilinear_sample(depth_map: DepthMap, pixel: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate the bin distribution at a subpixel location.

    Coordinates clamp to the valid border; the result is renormalized to sum
    exactly to 1 in float64.
    """
    h, w, d = depth_map.probs.shape
    x = float(np.clip(pixel[0], 0.0, w - 1))
    y = float(np.clip(pixel[1], 0.0, h - 1))
    x0 = int(np.floor(x)); x1 = min(x0 + 1, w - 1)
    y0 = int(np.floor(y)); y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    p = depth_map.probs
    out = ((1 - fy) * (1 - fx) * p[y0, x0]
           + (1 - fy) * fx * p[y0, x1]
           + fy * (1 - fx) * p[y1, x0]
           + fy * fx * p[y1, x1])
    s = out.sum()
    if s <= 0.0:
        raise ValueError("bilinear sample has zero mass")
    return out / s


def ray_to_instance(cam: CameraModel, agent_pose: Pose, center: np.ndarray) -> Ray:
    """Ray from the camera's origin (in agent_pose's parent frame) to a center."""
    world_cam = camera_pose_in_world(cam, agent_pose)
    o = world_cam.translation
    delta = np.asarray(center, dtype=np.float64) - o
    dist = float(np.linalg.norm(delta))
    if dist <= 1e-6:
        raise DegenerateRayError("instance center coincides with camera origin")
    u = delta / dist
    axis = world_cam.rotation @ np.array([0.0, 0.0, 1.0])
    alpha = float(np.arccos(np.clip(u @ axis, -1.0, 1.0)))
    return Ray(o, u, alpha)


# -- rotated BEV IoU ----------------------------------------------------------


def box_bev_corners(box: Box3D) -> np.ndarray:
    """(4,2) footprint corners, counter-clockwise; length along local x."""
    w, _, l = box.size
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of `subject` left of directed edge a->b (convex clip)."""
    out = []
    n = len(subject)
    ex, ey = b[0] - a[0], b[1] - a[1]
    for i in range(n):
        p = subject[i]
        q = subject[(i + 1) % n]
        side_p = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        side_q = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        inside_p = side_p >= 0.0
        inside_q = side_q >= 0.0
        if inside_p:
            out.append(p)
        if inside_p != inside_q:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two BEV footprints via convex polygon clipping."""
    pa = box_bev_corners(a)
    pb = box_bev_corners(b)
    area_a = _polygon_area(pa)
    area_b = _polygon_area(pb)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = pa
    for i in range(4):
        inter = _clip_polygon(inter, pb[i], pb[(i + 1) % 4])
        if len(inter) == 0:
            return 0.0
    ai = _polygon_area(inter)
    union = area_a + area_b - ai
    if union <= 0.0:
        return 0.0
    return float(min(max(ai / union, 0.0), 1.0))


def nearest_point_two_rays(r1: Ray, r2: Ray):
    """Closest points between two rays (treated as infinite lines).

    Returns (p1, p2, gap, midpoint). Raises ParallelRaysError when the
    directions are parallel within 1e-9.
    """
    u1 = r1.direction / np.linalg.norm(r1.direction)
    u2 = r2.direction / np.linalg.norm(r2.direction)
    cross = np.cross(u1, u2)
    if np.linalg.norm(cross) < 1e-9:
        raise ParallelRaysError("rays are parallel")
    w0 = r1.origin - r2.origin
    b = float(u1 @ u2)
    d = float(u1 @ w0)
    e = float(u2 @ w0)
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    p1 = r1.origin + s * u1
    p2 = r2.origin + t * u2
    gap = float(np.linalg.norm(p1 - p2))
    return p1, p2, gap, 0.5 * (p1 + p2)


def box_to_frame(box: Box3D, frame: Pose) -> Box3D:
    """Express a parent-frame box in `frame`'s local coordinates."""
    center = frame.invert_apply(box.center)
    velocity = frame.inverse_rotate(box.velocity)
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    heading = frame.inverse_rotate(np.array([c, s, 0.0]))
    yaw = float(np.arctan2(heading[1], heading[0]))
    return Box3D(center, box.size.copy(), yaw, velocity)
