"""Inter-agent detection messages and their wire format.

A sender packages its top-scoring detections together with, for every onboard
camera, the viewing ray to each detection and the depth-bin distribution read
out of that camera's depth map at the detection's projected pixel. Everything
is expressed in the *sender's* body frame; the receiver re-expresses it (see
``align``). The byte layout is little-endian throughout: a fixed 74-byte header
followed by fixed-size instance records, with features and bin distributions
quantized to half precision.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G

MESSAGE_MAGIC = b"CMSG"
MESSAGE_VERSION = 1
CAPTURE_MAGIC = b"CFCP"

_HEADER = struct.Struct("<4sHIdH")  # magic, version, agent id, timestamp, count
_DIMS = struct.Struct("<HHH")  # channels, depth bins, cameras


class WireFormatError(ValueError):
    """Raised for malformed, truncated, or inconsistent message bytes."""


@dataclass
class RayObservation:
    """One camera's view of one instance, in the sender's body frame."""

    visible: bool
    origin: np.ndarray  # (3,) camera center
    direction: np.ndarray  # (3,) unit vector toward the instance
    axis_angle: float  # radians between the ray and the camera's optical axis
    occupancy: np.ndarray  # (D,) depth-bin distribution sampled on the ray


@dataclass
class InstanceMessage:
    confidence: float
    anchor: np.ndarray  # (11,) sender-frame box encoding
    feature: np.ndarray  # (C,)
    rays: list = field(default_factory=list)  # one RayObservation per camera


@dataclass
class CollabMessage:
    agent_id: int
    timestamp: float  # capture time of the sender's frame
    pose: G.Pose  # sender body in world at that time
    instances: list = field(default_factory=list)


def ray_observations(frame, anchor: np.ndarray) -> list:
    """Per-camera rays and sampled bin distributions for one sender-frame box.

    Cameras that do not see the center get a zeroed, ``visible=False`` record
    so the wire layout stays fixed-size.
    """
    center = np.asarray(anchor[:3], dtype=np.float64)
    local = G.identity_pose()  # anchors and extrinsics are both body-frame
    out = []
    for cam, dm in zip(frame.cameras, frame.depth_maps):
        pixel, _, in_view = G.project_point(cam, local, center)
        if not in_view:
            d = dm.probs.shape[-1]
            out.append(RayObservation(False, np.zeros(3), np.zeros(3), 0.0, np.zeros(d)))
            continue
        ray = G.ray_to_instance(cam, local, center)
        rho = G.bilinear_sample(dm, pixel)
        out.append(RayObservation(True, ray.origin, ray.direction, ray.axis_angle, rho))
    return out


def build_message(frame, max_instances: int) -> CollabMessage:
    """Package a frame's top detections (by confidence, ties by index)."""
    order = sorted(range(len(frame.detections)),
                   key=lambda i: (-frame.detections[i].confidence, i))
    picked = order[:max_instances]
    instances = []
    for i in picked:
        det = frame.detections[i]
        instances.append(InstanceMessage(det.confidence, det.anchor.copy(),
                                         det.feature.copy(),
                                         ray_observations(frame, det.anchor)))
    return CollabMessage(frame.agent_id, frame.pose.timestamp, frame.pose, instances)


# -- byte accounting ------------------------------------------------------------


def header_nbytes() -> int:
    return _HEADER.size + 48 + _DIMS.size  # + 12 pose floats


def instance_nbytes(channels: int, depth_bins: int, cameras: int) -> int:
    """4 (confidence) + 44 (anchor) + 2C (feature f16) + per camera 29 + 2D."""
    return 4 + 44 + 2 * channels + cameras * (1 + 28 + 2 * depth_bins)


def message_nbytes(channels: int, depth_bins: int, cameras: int, count: int) -> int:
    return header_nbytes() + count * instance_nbytes(channels, depth_bins, cameras)


# -- codec ------------------------------------------------------------------------


def _message_dims(msg: CollabMessage) -> tuple:
    first = msg.instances[0]
    c = first.feature.shape[0]
    d = first.rays[0].occupancy.shape[0] if first.rays else 0
    k = len(first.rays)
    for inst in msg.instances:
        if inst.feature.shape != (c,) or len(inst.rays) != k:
            raise WireFormatError("inconsistent feature width or camera count")
        if inst.anchor.shape != (11,):
            raise WireFormatError(f"anchor must have 11 entries, got {inst.anchor.shape}")
        for ray in inst.rays:
            if ray.occupancy.shape != (d,):
                raise WireFormatError("inconsistent depth-bin count across rays")
    return c, d, k


def serialize_message(msg: CollabMessage) -> bytes:
    c, d, k = _message_dims(msg) if msg.instances else (0, 0, 0)
    blob = bytearray()
    blob += _HEADER.pack(MESSAGE_MAGIC, MESSAGE_VERSION, msg.agent_id,
                         msg.timestamp, len(msg.instances))
    blob += msg.pose.rotation.astype("<f4").tobytes()
    blob += msg.pose.translation.astype("<f4").tobytes()
    blob += _DIMS.pack(c, d, k)
    for inst in msg.instances:
        blob += struct.pack("<f", inst.confidence)
        blob += np.asarray(inst.anchor, dtype="<f4").tobytes()
        blob += np.asarray(inst.feature, dtype="<f2").tobytes()
        for ray in inst.rays:
            blob += struct.pack("<B", 1 if ray.visible else 0)
            blob += np.asarray(ray.origin, dtype="<f4").tobytes()
            blob += np.asarray(ray.direction, dtype="<f4").tobytes()
            blob += struct.pack("<f", ray.axis_angle)
            blob += np.asarray(ray.occupancy, dtype="<f2").tobytes()
    return bytes(blob)


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Re-orthonormalize a float32-quantized rotation (closest proper rotation)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def deserialize_message(blob: bytes) -> CollabMessage:
    if len(blob) < header_nbytes():
        raise WireFormatError(f"message truncated: {len(blob)} bytes < header")
    magic, version, agent_id, timestamp, count = _HEADER.unpack_from(blob, 0)
    if magic != MESSAGE_MAGIC:
        raise WireFormatError(f"bad magic {magic!r}")
    if version != MESSAGE_VERSION:
        raise WireFormatError(f"unsupported message version {version}")
    off = _HEADER.size
    pose_vals = np.frombuffer(blob, dtype="<f4", count=12, offset=off).astype(np.float64)
    off += 48
    c, d, k = _DIMS.unpack_from(blob, off)
    off += _DIMS.size
    expected = header_nbytes() + count * instance_nbytes(c, d, k)
    if len(blob) != expected:
        raise WireFormatError(f"message length {len(blob)} != expected {expected}")
    pose = G.Pose(_nearest_rotation(pose_vals[:9].reshape(3, 3)), pose_vals[9:12],
                  float(timestamp))
    instances = []
    for _ in range(count):
        (conf,) = struct.unpack_from("<f", blob, off)
        off += 4
        anchor = np.frombuffer(blob, dtype="<f4", count=11, offset=off).astype(np.float64)
        off += 44
        feature = np.frombuffer(blob, dtype="<f2", count=c, offset=off).astype(np.float64)
        off += 2 * c
        rays = []
        for _ in range(k):
            visible = blob[off] != 0
            off += 1
            vals = np.frombuffer(blob, dtype="<f4", count=7, offset=off).astype(np.float64)
            off += 28
            rho = np.frombuffer(blob, dtype="<f2", count=d, offset=off).astype(np.float64)
            off += 2 * d
            total = rho.sum()
            if total > 0.0:
                rho = rho / total  # undo the half-float rounding of the sum
            direction = vals[3:6]
            norm = np.linalg.norm(direction)
            if norm > 0.0:
                direction = direction / norm
            rays.append(RayObservation(visible, vals[:3], direction, float(vals[6]), rho))
        instances.append(InstanceMessage(float(conf), anchor, feature, rays))
    return CollabMessage(int(agent_id), float(timestamp), pose, instances)


# -- capture files ------------------------------------------------------------------


def write_capture(path: str, blobs: list):
    """Length-prefixed message log for offline replay."""
    with open(path, "wb") as fh:
        fh.write(CAPTURE_MAGIC)
        for blob in blobs:
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)


def append_capture(path: str, blob: bytes):
    with open(path, "ab") as fh:
        if fh.tell() == 0:
            fh.write(CAPTURE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def read_capture(path: str) -> list:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CAPTURE_MAGIC:
        raise WireFormatError(f"bad capture magic in {path}")
    out = []
    off = 4
    while off < len(raw):
        if off + 4 > len(raw):
            raise WireFormatError(f"truncated capture record header in {path}")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise WireFormatError(f"truncated capture record in {path}")
        out.append(raw[off:off + n])
        off += n
    return out
