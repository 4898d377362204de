"""Bringing collaborator detections into the ego body frame at fusion time.

Two compensations happen in order. First, each box is rolled forward from the
sender's capture time to the fusion time along its own velocity (constant-
velocity assumption). Second, the box and its viewing rays are re-expressed
from the sender's body frame into the ego body frame through the relative
pose. Both steps can be disabled independently so their contribution can be
measured. The published transform adds the relative translation to the
velocity as well; ``velocity_rotate_only=True`` switches to the rotation-only
variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from .message import CollabMessage, RayObservation


class AlignmentError(ValueError):
    """Raised for unusable message timing or duplicate senders."""


def compensate_instance_motion(anchor: np.ndarray, t: float, tau: float) -> np.ndarray:
    """Advance a box from capture time tau to fusion time t at its velocity."""
    dt = t - tau
    if dt < 0:
        raise AlignmentError(f"message captured {-dt:.3f}s after fusion time")
    out = np.array(anchor, dtype=np.float64, copy=True)
    out[:3] = out[:3] + out[8:11] * dt
    return out


def compensate_ego_motion(anchor: np.ndarray, rotation: np.ndarray,
                          translation: np.ndarray,
                          velocity_rotate_only: bool = False) -> np.ndarray:
    """Re-express a box encoding under a rigid frame change (R, T).

    Position maps affinely; the heading sin/cos pair is rotated as the unit
    vector (cos, sin, 0) and renormalized; velocity follows the published
    affine form unless ``velocity_rotate_only``.
    """
    out = np.array(anchor, dtype=np.float64, copy=True)
    out[:3] = rotation @ anchor[:3] + translation
    heading = rotation @ np.array([anchor[7], anchor[6], 0.0])
    norm = float(np.hypot(heading[0], heading[1]))
    if norm > 0.0:
        out[7] = heading[0] / norm
        out[6] = heading[1] / norm
    vel = rotation @ anchor[8:11]
    if not velocity_rotate_only:
        vel = vel + translation
    out[8:11] = vel
    return out


def align_rays(rays: list, rotation: np.ndarray, translation: np.ndarray) -> list:
    """Rigidly map per-camera ray observations; occupancies ride along."""
    out = []
    for ray in rays:
        if not ray.visible:
            out.append(RayObservation(False, np.zeros(3), np.zeros(3), 0.0,
                                      ray.occupancy.copy()))
            continue
        out.append(RayObservation(True, rotation @ ray.origin + translation,
                                  rotation @ ray.direction, ray.axis_angle,
                                  ray.occupancy.copy()))
    return out


@dataclass
class AlignedInstance:
    confidence: float
    anchor: np.ndarray  # ego body frame at fusion time (when enabled)
    feature: np.ndarray
    rays: list  # RayObservation, ego body frame (when enabled)
    delay: float  # staleness in seconds at fusion time
    source_agent: int


@dataclass
class MergedSet:
    t: float  # fusion time
    instances: list  # ego's instances first, collaborators in ascending id order
    counts: list  # (agent_id, n_instances) in layout order


def align_and_merge(ego_msg: CollabMessage, collab_msgs: list, t: float, *,
                    spatial: bool = True, motion: bool = True,
                    velocity_rotate_only: bool = False) -> MergedSet:
    """One fused instance list in the ego frame, deterministic source order."""
    seen = {ego_msg.agent_id}
    for m in collab_msgs:
        if m.agent_id in seen:
            raise AlignmentError(f"duplicate sender id {m.agent_id}")
        seen.add(m.agent_id)
    ordered = [ego_msg] + sorted(collab_msgs, key=lambda m: m.agent_id)

    instances = []
    counts = []
    for msg in ordered:
        delay = t - msg.timestamp
        if delay < 0:
            raise AlignmentError(f"message from agent {msg.agent_id} is "
                                 f"{-delay:.3f}s ahead of fusion time")
        is_ego = msg is ego_msg
        if not is_ego and spatial:
            rot, tra = G.transform_pose_chain(msg.pose, ego_msg.pose)
        else:
            rot, tra = np.eye(3), np.zeros(3)
        for inst in msg.instances:
            anchor = inst.anchor
            if motion:
                anchor = compensate_instance_motion(anchor, t, msg.timestamp)
            if not is_ego and spatial:
                anchor = compensate_ego_motion(anchor, rot, tra, velocity_rotate_only)
                rays = align_rays(inst.rays, rot, tra)
            else:
                rays = [RayObservation(r.visible, r.origin.copy(), r.direction.copy(),
                                       r.axis_angle, r.occupancy.copy())
                        for r in inst.rays]
            instances.append(AlignedInstance(inst.confidence, anchor, inst.feature,
                                             rays, delay, msg.agent_id))
        counts.append((msg.agent_id, len(msg.instances)))
    return MergedSet(t, instances, counts)
