"""End-to-end collaborative detector: scene frames in, box residuals out.

The full path per scene: each agent packages its top detections (optionally
passing through the actual wire codec, so quantization is part of training),
the receiver aligns everything into its own frame at fusion time, and the
merged instance list is laid out in fixed slot blocks (ego first, then one
block per collaborator in id order, padded with invalid rows). The network
itself is the instance positional encoder followed by windowed fusion and the
detection head; every ablation switch lives in the config so variants differ
only by construction arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import align as A
from . import geometry as G
from . import message as M
from . import tensor as T
from .anchor import anchor_encode
from .fusion import HEAD_OUT, FusionConfig, PyramidFusion
from .rayenc import EncoderConfig, InstanceEncoder, project_depth_bins, ray_feature_dim, ray_input_features

PAD_POSITION = 1.0e9  # parks padding rows far outside every window


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64  # C
    depth_bins: int = 32  # D
    cameras: int = 2  # per agent
    ego_slots: int = 64  # max ego instances kept
    collab_slots: int = 32  # max instances per collaborator message
    origin_freqs: int = 10
    direction_freqs: int = 4
    window_radii: tuple = (4.0, 8.0, 16.0)
    per_row_mixing: bool = True
    use_ray_occupancy: bool = True
    use_ray: bool = True
    use_occupancy: bool = True
    sta_spatial: bool = True
    sta_motion: bool = True
    velocity_rotate_only: bool = False
    seed: int = 0


def single_window(cfg: ModelConfig) -> ModelConfig:
    """Same model with one unbounded attention branch (single-scale baseline)."""
    return replace(cfg, window_radii=())


@dataclass
class SceneInputs:
    """Everything one scene contributes to a training/eval step (all numpy)."""

    anchors: np.ndarray  # (R, 11) ego-frame box encodings
    features: np.ndarray  # (R, C)
    valid: np.ndarray  # (R,) bool
    visible: np.ndarray  # (R, K) bool, which cameras saw each instance
    ray_feats: np.ndarray  # (R, K, F) frequency features of each viewing ray
    depth_proj: np.ndarray  # (R, K, D) bin ranges projected on the ray, meters
    occupancy: np.ndarray  # (R, K, D) sampled depth-bin distributions
    delays: np.ndarray  # (R,) staleness seconds
    positions: np.ndarray  # (R, 3) box centers; PAD_POSITION on padding
    gt_enc: np.ndarray  # (G, 11) targets in the ego frame at fusion time
    gt_boxes: list  # list[Box3D], same frame, for matching/scoring


def build_scene_inputs(scene, cfg: ModelConfig, *, through_wire: bool = True,
                       pose_noise_sigma: float = 0.0, noise_rng=None,
                       frames: list = None, sta_spatial: bool = None,
                       sta_motion: bool = None, counters: dict = None) -> SceneInputs:
    """Package one scene for the network; flags default to the model config."""
    frames = scene.frames if frames is None else frames
    spatial = cfg.sta_spatial if sta_spatial is None else sta_spatial
    motion = cfg.sta_motion if sta_motion is None else sta_motion

    ego_msg = M.build_message(frames[0], cfg.ego_slots)
    collab_msgs = []
    for f in frames[1:]:
        msg = M.build_message(f, cfg.collab_slots)
        if through_wire:
            msg = M.deserialize_message(M.serialize_message(msg))
        if pose_noise_sigma > 0.0:
            shifted = msg.pose.translation + noise_rng.normal(size=3) * pose_noise_sigma
            msg.pose = G.Pose(msg.pose.rotation, shifted, msg.pose.timestamp)
        collab_msgs.append(msg)
    merged = A.align_and_merge(ego_msg, collab_msgs, scene.t, spatial=spatial,
                               motion=motion,
                               velocity_rotate_only=cfg.velocity_rotate_only)

    k, d = cfg.cameras, cfg.depth_bins
    rfd = ray_feature_dim(cfg.origin_freqs, cfg.direction_freqs)
    rows = cfg.ego_slots + (len(frames) - 1) * cfg.collab_slots
    anchors = np.zeros((rows, 11))
    features = np.zeros((rows, cfg.channels))
    valid = np.zeros(rows, dtype=bool)
    visible = np.zeros((rows, k), dtype=bool)
    origins = np.zeros((rows, k, 3))
    directions = np.zeros((rows, k, 3))
    axis_angles = np.zeros((rows, k))
    occupancy = np.zeros((rows, k, d))
    delays = np.zeros(rows)
    positions = np.full((rows, 3), PAD_POSITION)

    row = 0
    block_starts = []
    for bi, (_, n) in enumerate(merged.counts):
        start = 0 if bi == 0 else cfg.ego_slots + (bi - 1) * cfg.collab_slots
        block_starts.append(start)
        row = start
        width = cfg.ego_slots if bi == 0 else cfg.collab_slots
        assert n <= width, "message exceeded its slot block"
    idx = 0
    for bi, (_, n) in enumerate(merged.counts):
        for j in range(n):
            inst = merged.instances[idx]
            idx += 1
            r = block_starts[bi] + j
            anchors[r] = inst.anchor
            features[r] = inst.feature
            valid[r] = True
            delays[r] = inst.delay
            positions[r] = inst.anchor[:3]
            for ci, ray in enumerate(inst.rays):
                visible[r, ci] = ray.visible
                origins[r, ci] = ray.origin
                directions[r, ci] = ray.direction
                axis_angles[r, ci] = ray.axis_angle
                occupancy[r, ci] = ray.occupancy

    ray_feats = ray_input_features(origins, directions, cfg.origin_freqs,
                                   cfg.direction_freqs)
    assert ray_feats.shape == (rows, k, rfd)
    bin_centers = frames[0].cameras[0].bin_centers
    depth_proj = project_depth_bins(bin_centers, axis_angles, counters=counters)

    ego_pose = frames[0].pose
    gt_local = [G.box_to_frame(b, G.Pose(ego_pose.rotation, ego_pose.translation, scene.t))
                for b in scene.gt_boxes]
    gt_enc = (np.stack([anchor_encode(b) for b in gt_local])
              if gt_local else np.zeros((0, 11)))
    return SceneInputs(anchors, features, valid, visible, ray_feats, depth_proj,
                       occupancy, delays, positions, gt_enc, gt_local)


class CollabDetector:
    """Instance positional encoder + windowed fusion + detection head."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        enc_cfg = EncoderConfig(cfg.channels, cfg.depth_bins, cfg.cameras,
                                cfg.origin_freqs, cfg.direction_freqs,
                                use_ray=cfg.use_ray, use_occupancy=cfg.use_occupancy,
                                use_ray_occupancy=cfg.use_ray_occupancy)
        self.encoder = InstanceEncoder(enc_cfg, cfg.seed)
        self.fusion = PyramidFusion(FusionConfig(cfg.channels, cfg.window_radii,
                                                 cfg.per_row_mixing), cfg.seed)

    def params(self) -> list:
        return self.encoder.params() + self.fusion.params()

    def named_arrays(self) -> dict:
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, arrays: dict):
        for p in self.params():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name}")
            src = arrays[p.name]
            if src.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {p.name}: "
                                 f"{src.shape} vs {p.data.shape}")
            p.tensor.data = np.array(src, dtype=np.float64)

    # -- forward ----------------------------------------------------------------

    def forward_batch(self, batch: list) -> T.Tensor:
        """Stack scene inputs and run the network once: (B, R, 12) raw outputs.

        Slot arrays are mostly padding (row capacity R is sized for worst-case
        crowds), so the network runs on a compacted view holding only each
        scene's occupied rows, then scatters results back to the slot layout.
        Masked attention makes this exact: a padded lane's weight is exactly
        zero for every real query, and its own output is zeroed by validity,
        so compaction changes cost, not values.
        """
        anchors = np.stack([s.anchors for s in batch])
        features = np.stack([s.features for s in batch])
        valid = np.stack([s.valid for s in batch])
        visible = np.stack([s.visible for s in batch])
        ray_feats = np.stack([s.ray_feats for s in batch])
        depth_proj = np.stack([s.depth_proj for s in batch])
        occupancy = np.stack([s.occupancy for s in batch])
        delays = np.stack([s.delays for s in batch])
        positions = np.stack([s.positions for s in batch])

        n_scenes, slots = valid.shape
        width = max(1, int(valid.sum(axis=1).max()))
        sel = np.zeros((n_scenes, width), dtype=np.int64)
        lane_valid = np.zeros((n_scenes, width), dtype=bool)
        full_index = np.full((n_scenes, slots), n_scenes * width, dtype=np.int64)
        for b in range(n_scenes):
            rows = np.flatnonzero(valid[b])
            sel[b, :rows.size] = rows
            lane_valid[b, :rows.size] = True
            full_index[b, rows] = b * width + np.arange(rows.size)
        pick = (np.arange(n_scenes)[:, None], sel)
        cpositions = np.where(lane_valid[..., None], positions[pick], PAD_POSITION)

        pe = self.encoder.positional_encoding(
            anchors[pick], delays[pick], visible[pick] & lane_valid[..., None],
            ray_feats[pick], depth_proj[pick], occupancy[pick])
        codes = T.concat([T.Tensor(features[pick]), pe], axis=-1)
        masks = self.fusion.window_masks(cpositions, lane_valid)
        compact = self.fusion.predict(codes, masks, lane_valid)

        flat = T.reshape(compact, (n_scenes * width, HEAD_OUT))
        flat = T.concat([flat, T.Tensor(np.zeros((1, HEAD_OUT)))], axis=0)
        out = T.gather_rows(flat, full_index.reshape(-1))
        return T.reshape(out, (n_scenes, slots, HEAD_OUT))

    def predict_scene(self, inputs: SceneInputs) -> tuple:
        """(box encodings (R, 11), scores (R,), valid (R,)) without gradients."""
        from .fusion import decode_head
        with T.no_grad():
            out = self.forward_batch([inputs]).data[0]
        enc, scores = decode_head(inputs.anchors, out)
        return enc, scores, inputs.valid
