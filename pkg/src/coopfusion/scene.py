"""Synthetic desk-scale multi-agent driving scenes.

A scene holds ground-truth vehicles on a plane (constant velocity, no BEV
overlap at the ego timestamp) plus a set of static camera rigs ("agents").
Each agent frame contains categorical depth maps rendered from the geometry
it can see and an emulated detection list: one true positive per visible
vehicle, perturbed along the viewing ray, plus Poisson-distributed duplicate
false positives displaced along the same ray. Duplicates are what the fusion
stack has to learn to reject; the depth maps carry the evidence to do it.

Everything is a pure function of (config, seed): regenerating a scene gives
bit-identical results, which the determinism tests rely on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as G
from .anchor import ANCHOR_DIM, ANCHOR_SCALE, anchor_encode
from .rng import seeded

SCENE_FORMAT_VERSION = 1
DEPTH_BLOB_MAGIC = b"CFDM"


class SceneDataError(ValueError):
    """Scene file failed validation on load."""


@dataclass(frozen=True)
class CameraRigConfig:
    count: int = 2
    width: int = 64
    height: int = 48
    focal: float = 28.0
    yaw_offsets: tuple = (-0.2, 0.2)  # radians, per-camera heading
    # Per-camera (x, y) mount points in the body frame. The default is a
    # slightly divergent stereo pair at the ends of a 4 m sensor bar: the
    # lateral baseline makes a fabricated along-ray box project into the
    # *other* camera at a pixel that misses the real surface, so its sampled
    # bin distribution betrays it. Co-located cameras (all offsets equal)
    # cannot do this: a point displaced along one camera's ray stays on every
    # camera's ray through their common origin.
    mount_offsets: tuple = ((0.0, 2.0), (0.0, -2.0))
    mount_height: float = 1.7
    depth_bins: int = 32
    d_min: float = 0.5
    d_max: float = 48.5
    sigma_bins: float = 1.0
    tail_weight: float = 0.05

    def __post_init__(self):
        if len(self.yaw_offsets) != self.count:
            raise ValueError("yaw_offsets length must equal camera count")
        if len(self.mount_offsets) != self.count:
            raise ValueError("mount_offsets length must equal camera count")


@dataclass(frozen=True)
class AmbiguityConfig:
    duplicate_rate: float = 1.0  # Poisson mean per true positive
    along_sigma: float = 0.35  # meters, depth error along the viewing ray
    lateral_sigma: float = 0.12  # meters, per perpendicular axis
    dup_offset: tuple = (6.0, 16.0)  # |signed| along-ray duplicate displacement
    size_log_sigma: float = 0.03
    yaw_sigma: float = 0.03
    velocity_sigma: float = 0.15
    tp_confidence: tuple = (0.55, 0.95)
    dup_confidence: tuple = (0.15, 0.7)


@dataclass(frozen=True)
class FeatureConfig:
    channels: int = 64  # C
    noise_sigma: float = 0.3

    @property
    def token_dim(self) -> int:
        # channels minus the box encoding and the confidence channel
        return self.channels - ANCHOR_DIM - 1

    def __post_init__(self):
        if self.channels <= ANCHOR_DIM + 1:
            raise ValueError(f"feature channels must exceed {ANCHOR_DIM + 1}")


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    num_agents: int = 3  # ego + collaborators, 2..5
    num_vehicles: int = 12
    extent: float = 20.0  # half-size of the square vehicle area, meters
    comm_range: float = 70.0
    width_range: tuple = (1.8, 2.1)
    length_range: tuple = (4.0, 5.0)
    height_range: tuple = (1.4, 1.8)
    speed_range: tuple = (0.0, 8.0)
    delay_range: tuple = (0.0, 0.5)  # seconds, collaborator message staleness
    rig: CameraRigConfig = field(default_factory=CameraRigConfig)
    ambiguity: AmbiguityConfig = field(default_factory=AmbiguityConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if not (2 <= self.num_agents <= 5):
            raise ValueError(f"num_agents must be in [2, 5], got {self.num_agents}")
        if self.extent > 51.2:
            raise ValueError("extent exceeds the supported perception range of 51.2 m")


@dataclass
class Detection:
    anchor: np.ndarray  # (11,) in the agent's local frame
    confidence: float
    feature: np.ndarray  # (C,)
    gt_index: int = -1  # provenance for diagnostics; -1 unknown
    is_duplicate: bool = False


@dataclass
class AgentFrame:
    agent_id: int
    pose: G.Pose  # agent in world, timestamp = capture time tau
    cameras: list
    depth_maps: list  # list[G.DepthMap], one per camera
    detections: list  # list[Detection]


@dataclass
class Scene:
    config: SceneConfig
    gt_boxes: list  # list[G.Box3D], world frame at time t
    tokens: np.ndarray  # (num_vehicles_actual, token_dim) shared appearance tokens
    frames: list  # list[AgentFrame], index 0 is ego
    t: float = 0.0


# -- camera rigs ---------------------------------------------------------------

# camera z (forward) -> agent +x, camera x (right) -> agent -y, camera y (down) -> agent -z
_CAM_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def build_rig(rig: CameraRigConfig) -> list:
    k = np.array([[rig.focal, 0.0, (rig.width - 1) / 2],
                  [0.0, rig.focal, (rig.height - 1) / 2],
                  [0.0, 0.0, 1.0]])
    cams = []
    for yaw, (mx, my) in zip(rig.yaw_offsets, rig.mount_offsets):
        ext = G.Pose(G.rotz(yaw) @ _CAM_BASE, np.array([mx, my, rig.mount_height]))
        cams.append(G.CameraModel(k, ext, rig.width, rig.height, rig.depth_bins, rig.d_min, rig.d_max))
    return cams


# -- depth synthesis -----------------------------------------------------------


def _rasterize(cam: G.CameraModel, agent_pose: G.Pose, boxes: list):
    """Z-buffered box rasterization.

    Returns (depth (H,W) with +inf where free, ids (H,W) int with -1 free).
    Depth is camera-frame z of the nearest box surface along each pixel ray.
    """
    h, w = cam.height, cam.width
    k = cam.intrinsics
    px, py = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack([(px - k[0, 2]) / k[0, 0], (py - k[1, 2]) / k[1, 1], np.ones_like(px)], axis=-1)
    world_cam = G.camera_pose_in_world(cam, agent_pose)
    dirs_w = dirs_cam @ world_cam.rotation.T  # (H,W,3); ray param equals z-depth
    origin = world_cam.translation
    depth = np.full((h, w), np.inf)
    ids = np.full((h, w), -1, dtype=np.int64)
    for bi, box in enumerate(boxes):
        rot = G.rotz(box.yaw)
        o_b = rot.T @ (origin - box.center)
        d_b = dirs_w @ rot  # rotate each direction into the box frame
        half = np.array([box.size[2] / 2, box.size[0] / 2, box.size[1] / 2])  # l, w, h
        t_lo = np.full((h, w), -np.inf)
        t_hi = np.full((h, w), np.inf)
        ok = np.ones((h, w), dtype=bool)
        for ax in range(3):
            d = d_b[..., ax]
            o = o_b[ax]
            par = np.abs(d) < 1e-12
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-half[ax] - o) / d
                t1 = (half[ax] - o) / d
            lo = np.minimum(t0, t1)
            hi = np.maximum(t0, t1)
            t_lo = np.where(par, t_lo, np.maximum(t_lo, lo))
            t_hi = np.where(par, t_hi, np.minimum(t_hi, hi))
            ok &= ~par | (np.abs(o) <= half[ax])
        hit = ok & (t_hi >= t_lo) & (t_lo > 1e-9)
        t_entry = np.where(hit, t_lo, np.inf)
        closer = t_entry < depth
        depth = np.where(closer, t_entry, depth)
        ids = np.where(closer, bi, ids)
    return depth, ids


def _bin_distribution(depth: np.ndarray, cam: G.CameraModel, sigma_bins: float,
                      tail_weight: float) -> np.ndarray:
    """Categorical distributions over depth bins for a (H,W) depth image.

    Occupied pixels get a Gaussian bump around the surface bin; free pixels
    (+inf depth) peak at the last bin with a uniform tail. sigma_bins == 0
    degenerates to exact one-hot everywhere (tail suppressed).
    """
    h, w = depth.shape
    d = cam.depth_bins
    free = ~np.isfinite(depth)
    b_cont = (np.where(free, cam.d_max, depth) - cam.d_min) / cam.bin_width - 0.5
    b_cont = np.clip(b_cont, 0.0, d - 1.0)
    b_cont = np.where(free, float(d - 1), b_cont)
    bins = np.arange(d, dtype=np.float64)
    if sigma_bins <= 0.0:
        idx = np.rint(b_cont).astype(np.int64)
        probs = np.zeros((h, w, d))
        np.put_along_axis(probs, idx[..., None], 1.0, axis=-1)
        return probs
    bump = np.exp(-0.5 * ((bins[None, None, :] - b_cont[..., None]) / sigma_bins) ** 2)
    bump /= bump.sum(axis=-1, keepdims=True)
    tail = np.where(free[..., None], tail_weight, 0.0)
    probs = (1.0 - tail) * bump + tail / d
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def synthesize_depth_map(cam: G.CameraModel, agent_pose: G.Pose, boxes: list,
                         sigma_bins: float = 1.0, tail_weight: float = 0.05,
                         camera_index: int = 0) -> G.DepthMap:
    depth, _ = _rasterize(cam, agent_pose, boxes)
    return G.DepthMap(_bin_distribution(depth, cam, sigma_bins, tail_weight), camera_index)


# -- emulated detections ---------------------------------------------------------


def _perp_basis(u: np.ndarray):
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    n1 = np.cross(u, ref)
    n1 /= np.linalg.norm(n1)
    return n1, np.cross(u, n1)


def _occlusion_ok(ids: np.ndarray, pixel: np.ndarray, gt_index: int) -> bool:
    py = int(np.clip(np.rint(pixel[1]), 0, ids.shape[0] - 1))
    px = int(np.clip(np.rint(pixel[0]), 0, ids.shape[1] - 1))
    return ids[py, px] == gt_index


def _make_detection(center_w, gt_box, agent_pose, amb, feat, token, rng,
                    gt_index, is_dup, conf_range):
    size = np.exp(np.log(gt_box.size) + rng.normal(size=3) * amb.size_log_sigma)
    yaw = gt_box.yaw + rng.normal() * amb.yaw_sigma
    vel = gt_box.velocity + rng.normal(size=3) * amb.velocity_sigma
    world_box = G.Box3D(center_w, size, yaw, vel)
    local = G.box_to_frame(world_box, agent_pose)
    vec = anchor_encode(local)
    conf = float(rng.uniform(*conf_range))
    # A detector's instance feature encodes everything its heads read out:
    # geometry, appearance, and its own confidence.
    feature = (np.concatenate([vec * ANCHOR_SCALE, [conf], token])
               + rng.normal(size=feat.channels) * feat.noise_sigma)
    return Detection(vec, conf, feature, gt_index, is_dup)


def emulate_detections(cameras: list, agent_pose: G.Pose, boxes: list, tokens: np.ndarray,
                       amb: AmbiguityConfig, feat: FeatureConfig,
                       rng: np.random.Generator, id_buffers: list) -> list:
    """One agent's detection list: occluded-aware TPs plus along-ray duplicates."""
    detections: list[Detection] = []
    for gi, box in enumerate(boxes):
        visible = []
        for ci, cam in enumerate(cameras):
            pix, _, in_view = G.project_point(cam, agent_pose, box.center)
            if in_view and _occlusion_ok(id_buffers[ci], pix, gi):
                visible.append(ci)
        if not visible:
            continue
        src = cameras[visible[0]]
        ray = G.ray_to_instance(src, agent_pose, box.center)
        n1, n2 = _perp_basis(ray.direction)
        # Perturb the TP center; redraw if the noise pushed it out of every
        # camera's view, falling back to the exact center (always visible).
        center = box.center.copy()
        for _ in range(8):
            cand = (box.center + rng.normal() * amb.along_sigma * ray.direction
                    + rng.normal() * amb.lateral_sigma * n1 + rng.normal() * amb.lateral_sigma * n2)
            if any(G.project_point(c, agent_pose, cand)[2] for c in cameras):
                center = cand
                break
        detections.append(_make_detection(center, box, agent_pose, amb, feat,
                                          tokens[gi], rng, gi, False, amb.tp_confidence))
        n_dup = int(rng.poisson(amb.duplicate_rate))
        for _ in range(n_dup):
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            mag = rng.uniform(*amb.dup_offset)
            cand = (box.center + sign * mag * ray.direction
                    + rng.normal() * amb.along_sigma * ray.direction
                    + rng.normal() * amb.lateral_sigma * n1 + rng.normal() * amb.lateral_sigma * n2)
            pix, depth, in_view = G.project_point(src, agent_pose, cand)
            if not in_view or depth < src.d_min:
                continue
            detections.append(_make_detection(cand, box, agent_pose, amb, feat,
                                              tokens[gi], rng, gi, True, amb.dup_confidence))
    return detections

# -- scene generation ------------------------------------------------------------


def _place_vehicles(cfg: SceneConfig, rng: np.random.Generator) -> list:
    """Rejection-sample boxes until BEV footprints are pairwise disjoint."""
    boxes: list[G.Box3D] = []
    margin = 2.5
    for _ in range(cfg.num_vehicles):
        for _try in range(200):
            w = rng.uniform(*cfg.width_range)
            l = rng.uniform(*cfg.length_range)
            h = rng.uniform(*cfg.height_range)
            cx, cy = rng.uniform(-cfg.extent + margin, cfg.extent - margin, size=2)
            yaw = rng.uniform(-np.pi, np.pi)
            speed = rng.uniform(*cfg.speed_range)
            vel = speed * np.array([np.cos(yaw), np.sin(yaw), 0.0])
            cand = G.Box3D(np.array([cx, cy, h / 2]), np.array([w, h, l]), yaw, vel)
            # inflate during the check so footprints never touch
            grown = G.Box3D(cand.center, cand.size + np.array([0.6, 0.0, 0.6]), yaw)
            if all(G.rotated_bev_iou(grown,
                                     G.Box3D(b.center, b.size + np.array([0.6, 0.0, 0.6]), b.yaw)) == 0.0
                   for b in boxes):
                boxes.append(cand)
                break
    return boxes


def _place_agents(cfg: SceneConfig, rng: np.random.Generator) -> list:
    """Static rig poses: ego (id 0) plus collaborators, mutually separated.

    Rigs point roughly at the monitored square (with heading jitter), the way
    fixed perception units are installed to watch an intersection.
    """
    poses: list[G.Pose] = []
    pad = 4.0
    while len(poses) < cfg.num_agents:
        x, y = rng.uniform(-cfg.extent - pad, cfg.extent + pad, size=2)
        yaw = float(np.arctan2(-y, -x)) + rng.uniform(-0.6, 0.6)
        cand = G.pose_from_yaw(x, y, 0.0, yaw)
        if poses:
            ego = poses[0]
            if np.linalg.norm(cand.translation - ego.translation) > cfg.comm_range:
                continue
        if all(np.linalg.norm(cand.translation - p.translation) > 5.0 for p in poses):
            poses.append(cand)
    return poses


def gt_at(boxes: list, dt: float) -> list:
    """Constant-velocity propagation of every box by dt seconds."""
    return [G.Box3D(b.center + b.velocity * dt, b.size.copy(), b.yaw, b.velocity.copy())
            for b in boxes]


def _render_frame(cfg: SceneConfig, agent_id: int, pose_xy_yaw: G.Pose, tau: float,
                  boxes_at_tau: list, tokens: np.ndarray, rng: np.random.Generator) -> AgentFrame:
    cams = build_rig(cfg.rig)
    pose = G.Pose(pose_xy_yaw.rotation, pose_xy_yaw.translation, tau)
    depth_maps = []
    id_buffers = []
    for ci, cam in enumerate(cams):
        depth, ids = _rasterize(cam, pose, boxes_at_tau)
        probs = _bin_distribution(depth, cam, cfg.rig.sigma_bins, cfg.rig.tail_weight)
        depth_maps.append(G.DepthMap(probs, ci))
        id_buffers.append(ids)
    dets = emulate_detections(cams, pose, boxes_at_tau, tokens, cfg.ambiguity,
                              cfg.feature, rng, id_buffers)
    return AgentFrame(agent_id, pose, cams, depth_maps, dets)


def generate_scene(cfg: SceneConfig) -> Scene:
    rng_world = seeded(cfg.seed, "world")
    boxes = _place_vehicles(cfg, rng_world)
    tokens = seeded(cfg.seed, "tokens").normal(size=(len(boxes), cfg.feature.token_dim))
    agent_poses = _place_agents(cfg, seeded(cfg.seed, "agents"))
    frames = []
    for aid, pose in enumerate(agent_poses):
        if aid == 0:
            tau = 0.0
        else:
            lo, hi = cfg.delay_range
            tau = -float(seeded(cfg.seed, "delay", aid).uniform(lo, hi))
        frames.append(_render_frame(cfg, aid, pose, tau, gt_at(boxes, tau), tokens,
                                    seeded(cfg.seed, "emulate", aid)))
    return Scene(cfg, boxes, tokens, frames, 0.0)


def regenerate_frame(scene: Scene, agent_id: int, delay: float, seed_tag: object = "sweep") -> AgentFrame:
    """Re-observe the world at tau = t - delay for one agent (delay sweeps)."""
    cfg = scene.config
    tau = scene.t - float(delay)
    pose = scene.frames[agent_id].pose
    rng = seeded(cfg.seed, "regen", agent_id, seed_tag)
    return _render_frame(cfg, agent_id, pose, tau, gt_at(scene.gt_boxes, tau - scene.t),
                         scene.tokens, rng)


def noise_free(cfg: SceneConfig) -> SceneConfig:
    """Copy of cfg with every emulation noise source disabled."""
    from dataclasses import replace
    amb = replace(cfg.ambiguity, duplicate_rate=0.0, along_sigma=0.0, lateral_sigma=0.0,
                  size_log_sigma=0.0, yaw_sigma=0.0, velocity_sigma=0.0,
                  tp_confidence=(0.9, 0.9), dup_confidence=(0.1, 0.1))
    feat = replace(cfg.feature, noise_sigma=0.0)
    return replace(cfg, ambiguity=amb, feature=feat)


# -- serialization ----------------------------------------------------------------


def _pose_to_json(p: G.Pose) -> dict:
    return {"rotation": p.rotation.ravel().tolist(),
            "translation": p.translation.tolist(),
            "timestamp": p.timestamp}


def _pose_from_json(d: dict) -> G.Pose:
    return G.Pose(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]),
                  float(d["timestamp"]))


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)


def scene_config_from_dict(d: dict) -> SceneConfig:
    d = dict(d)
    rig = dict(d.get("rig", {}))
    if "yaw_offsets" in rig:
        rig["yaw_offsets"] = tuple(rig["yaw_offsets"])
    if "mount_offsets" in rig:
        rig["mount_offsets"] = tuple(tuple(m) for m in rig["mount_offsets"])
    d["rig"] = CameraRigConfig(**rig)
    d["ambiguity"] = AmbiguityConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in d.get("ambiguity", {}).items()})
    d["feature"] = FeatureConfig(**d.get("feature", {}))
    for key in ("width_range", "length_range", "height_range", "speed_range", "delay_range"):
        if key in d and isinstance(d[key], list):
            d[key] = tuple(d[key])
    return SceneConfig(**d)


def save_scene(scene: Scene, path: str):
    """Versioned structured-text scene file (depth maps regenerate on load)."""
    doc = {
        "format_version": SCENE_FORMAT_VERSION,
        "t": scene.t,
        "config": scene_config_to_dict(scene.config),
        "gt": [{"center": b.center.tolist(), "size": b.size.tolist(), "yaw": b.yaw,
                "velocity": b.velocity.tolist()} for b in scene.gt_boxes],
        "tokens": scene.tokens.tolist(),
        "agents": [{
            "agent_id": f.agent_id,
            "pose": _pose_to_json(f.pose),
            "detections": [{"anchor": det.anchor.tolist(), "confidence": det.confidence,
                            "feature": det.feature.tolist(), "gt_index": det.gt_index,
                            "is_duplicate": det.is_duplicate} for det in f.detections],
        } for f in scene.frames],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_scene(path: str) -> Scene:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != SCENE_FORMAT_VERSION:
        raise SceneDataError(f"unsupported scene format {doc.get('format_version')!r} in {path}")
    try:
        cfg = scene_config_from_dict(doc["config"])
        boxes = [G.Box3D(np.array(g["center"]), np.array(g["size"]), float(g["yaw"]),
                         np.array(g["velocity"])) for g in doc["gt"]]
        tokens = np.array(doc["tokens"], dtype=np.float64).reshape(len(boxes), cfg.feature.token_dim)
        frames = []
        for a in doc["agents"]:
            pose = _pose_from_json(a["pose"]).validate()
            cams = build_rig(cfg.rig)
            tau = pose.timestamp
            maps = []
            boxes_tau = gt_at(boxes, tau)
            for ci, cam in enumerate(cams):
                maps.append(synthesize_depth_map(cam, pose, boxes_tau, cfg.rig.sigma_bins,
                                                 cfg.rig.tail_weight, ci))
            dets = [Detection(np.array(d["anchor"], dtype=np.float64), float(d["confidence"]),
                              np.array(d["feature"], dtype=np.float64), int(d["gt_index"]),
                              bool(d["is_duplicate"])) for d in a["detections"]]
            for det in dets:
                if det.anchor.shape != (ANCHOR_DIM,) or det.feature.shape != (cfg.feature.channels,):
                    raise SceneDataError(f"malformed detection in {path}")
            frames.append(AgentFrame(int(a["agent_id"]), pose, cams, maps, dets))
    except (KeyError, ValueError) as e:
        if isinstance(e, SceneDataError):
            raise
        raise SceneDataError(f"malformed scene file {path}: {e}") from e
    return Scene(cfg, boxes, tokens, frames, float(doc["t"]))


def save_depth_blob(scene: Scene, path: str):
    """Sidecar binary with every depth map: little-endian f32, headered."""
    blob = bytearray()
    blob += DEPTH_BLOB_MAGIC
    maps = [(f.agent_id, dm.camera_index, dm) for f in scene.frames for dm in f.depth_maps]
    blob += struct.pack("<I", len(maps))
    for aid, ci, dm in maps:
        h, w, d = dm.probs.shape
        blob += struct.pack("<HHHHH", aid, ci, h, w, d)
        blob += dm.probs.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_depth_blob(path: str) -> dict:
    """Returns {(agent_id, camera_index): probs float32 (H,W,D)}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DEPTH_BLOB_MAGIC:
        raise SceneDataError(f"bad depth blob magic in {path}")
    (count,) = struct.unpack_from("<I", blob, 4)
    off = 8
    out = {}
    for _ in range(count):
        aid, ci, h, w, d = struct.unpack_from("<HHHHH", blob, off)
        off += 10
        n = h * w * d
        end = off + 4 * n
        if end > len(blob):
            raise SceneDataError(f"truncated depth blob {path}")
        out[(aid, ci)] = np.frombuffer(blob[off:end], dtype="<f4").reshape(h, w, d).copy()
        off = end
    return out
