"""Instance positional encoding from viewing rays and depth-bin occupancy.

Every fused instance gets a C-dim positional code built from three additive
parts: an embedding of its box encoding, a camera-pooled descriptor of *where
along its viewing rays mass actually sits* (this is what disambiguates a true
box from a ghost displaced along the ray), and a staleness embedding. The ray
geometry enters through multi-frequency sin/cos features; the depth evidence
enters as the sampled bin distribution next to the bin ranges projected onto
the ray. Per-camera descriptors are pooled with a tiny attention layer that
ignores cameras that never saw the instance and falls back to a learned token
when none did.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .anchor import ANCHOR_SCALE
from .nn import Mlp, MlpSpec, Parameter, init_uniform
from .rng import seeded

ORIGIN_SCALE = 0.05  # meters -> low-single-digit range before learned layers
DELAY_SCALE = 0.01  # milliseconds -> roughly unit range


def frequency_encode(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """Per component: (a, sin(2^0 pi a), cos(2^0 pi a), ..., 2^(L-1)).

    Maps (..., k) to (..., k*(2L+1)), identity first, octave-spaced harmonics
    after, grouped per input component.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x[..., None]]
    for j in range(n_freqs):
        arg = (2.0 ** j) * np.pi * x[..., None]
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    stacked = np.concatenate(parts, axis=-1)  # (..., k, 2L+1)
    return stacked.reshape(x.shape[:-1] + (x.shape[-1] * (2 * n_freqs + 1),))


def ray_feature_dim(origin_freqs: int, direction_freqs: int) -> int:
    return 3 * (2 * origin_freqs + 1) + 3 * (2 * direction_freqs + 1)


def ray_input_features(origins: np.ndarray, directions: np.ndarray,
                       origin_freqs: int, direction_freqs: int) -> np.ndarray:
    """Frequency features of (scaled origin, unit direction), concatenated."""
    return np.concatenate([
        frequency_encode(np.asarray(origins) * ORIGIN_SCALE, origin_freqs),
        frequency_encode(directions, direction_freqs),
    ], axis=-1)


def project_depth_bins(bin_centers: np.ndarray, axis_angle: np.ndarray,
                       min_cos: float = 0.1, counters: dict = None) -> np.ndarray:
    """Bin-center ranges divided by cos(angle to the optical axis).

    Turns each camera's along-axis bin grid into distances along the actual
    viewing ray. The cosine is floored at ``min_cos`` to keep extreme
    off-axis rays finite; ``counters['clamped_axis_cos']`` tallies how often
    the floor engaged.
    """
    cos = np.cos(np.asarray(axis_angle, dtype=np.float64))
    clamped = np.maximum(cos, min_cos)
    if counters is not None:
        counters["clamped_axis_cos"] = counters.get("clamped_axis_cos", 0) + \
            int((cos < min_cos).sum())
    return np.asarray(bin_centers, dtype=np.float64) / clamped[..., None]


def delay_embedding(delay_s: np.ndarray, channels: int) -> np.ndarray:
    """Sinusoidal embedding of message staleness, (…,) seconds -> (…, C)."""
    if channels % 2:
        raise ValueError(f"delay embedding needs an even width, got {channels}")
    x = np.asarray(delay_s, dtype=np.float64) * 1000.0 * DELAY_SCALE
    i = np.arange(channels // 2, dtype=np.float64)
    rate = 1.0 / np.power(10000.0, 2.0 * i / channels)
    arg = x[..., None] * rate
    out = np.empty(x.shape + (channels,), dtype=np.float64)
    out[..., 0::2] = np.sin(arg)
    out[..., 1::2] = np.cos(arg)
    return out


@dataclass(frozen=True)
class EncoderConfig:
    channels: int  # C, width of every instance code
    depth_bins: int  # D, bins per camera depth map
    cameras: int  # cameras per agent
    origin_freqs: int = 10
    direction_freqs: int = 4
    use_ray: bool = True  # ray-geometry half of the descriptor
    use_occupancy: bool = True  # depth-evidence half of the descriptor
    use_ray_occupancy: bool = True  # the whole camera-pooled term
    min_axis_cos: float = 0.1


class InstanceEncoder:
    """Builds the additive positional code for every fused instance."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        c, d = cfg.channels, cfg.depth_bins
        # gelu hidden layers: distance tests need product features
        # (claimed range against occupancy mass), which a smooth gate forms
        # far more readily than piecewise-linear units
        self.anchor_mlp = Mlp("enc.anchor", MlpSpec((11, c, c), "gelu"), seed)
        self.ray_mlp = None
        self.depth_mlp = None
        self.occupancy_mlp = None
        self.cam_query = None
        self.cam_key = None
        self.reduce_mlp = None
        self.null_token = None
        if cfg.use_ray_occupancy:
            if cfg.use_ray:
                rfd = ray_feature_dim(cfg.origin_freqs, cfg.direction_freqs)
                self.ray_mlp = Mlp("enc.ray", MlpSpec((rfd, c, c), "gelu"), seed)
            if cfg.use_occupancy:
                self.depth_mlp = Mlp("enc.depth", MlpSpec((d, d, d), "gelu"), seed)
                self.occupancy_mlp = Mlp("enc.occupancy",
                                         MlpSpec((2 * d, c, c), "gelu"), seed)
            self.cam_query = Mlp("enc.cam_query", MlpSpec((2 * c, c)), seed)
            self.cam_key = Mlp("enc.cam_key", MlpSpec((2 * c, c)), seed)
            # a hidden layer here lets the pooled descriptor combine its
            # geometry half with its depth-evidence half (e.g. place the
            # occupancy peak at a point along the ray) before the sum
            self.reduce_mlp = Mlp("enc.reduce", MlpSpec((2 * c, 2 * c, c), "gelu"),
                                  seed)
            self.null_token = Parameter("enc.null_token",
                                        init_uniform((c,), c, seeded(seed, "enc.null_token")))

    def params(self) -> list:
        out = list(self.anchor_mlp.params())
        for mlp in (self.ray_mlp, self.depth_mlp, self.occupancy_mlp,
                    self.cam_query, self.cam_key, self.reduce_mlp):
            if mlp is not None:
                out.extend(mlp.params())
        if self.null_token is not None:
            out.append(self.null_token)
        return out

    # -- pieces -------------------------------------------------------------

    def camera_descriptors(self, ray_feats: np.ndarray, depth_proj: np.ndarray,
                           occupancy: np.ndarray) -> T.Tensor:
        """Per-camera 2C code: depth-evidence half next to ray-geometry half.

        ray_feats (..., K, F), depth_proj (..., K, D) in meters,
        occupancy (..., K, D). Disabled halves contribute exact zeros.
        """
        c = self.cfg.channels
        lead = np.asarray(ray_feats).shape[:-1]
        if self.cfg.use_ray:
            gamma = self.ray_mlp(T.Tensor(ray_feats))
        else:
            gamma = T.Tensor(np.zeros(lead + (c,)))
        if self.cfg.use_occupancy:
            chi = self.depth_mlp(T.Tensor(depth_proj * ORIGIN_SCALE))
            occ = self.occupancy_mlp(T.concat([chi, T.Tensor(occupancy)], axis=-1))
        else:
            occ = T.Tensor(np.zeros(lead + (c,)))
        return T.concat([occ, gamma], axis=-1)

    def fuse_cameras(self, descriptors: T.Tensor, visible: np.ndarray) -> T.Tensor:
        """Attention-pool camera descriptors into one C-dim code per instance.

        ``visible`` (..., K) bool. Hidden cameras get exactly zero weight;
        instances no camera saw get the learned null token instead.
        """
        c = self.cfg.channels
        q = self.cam_query(descriptors)  # (..., K, C)
        k = self.cam_key(descriptors)
        logits = T.tmean(T.matmul(q, T.swap_last2(k)) * (1.0 / np.sqrt(c)), axis=-1)
        none_seen = ~visible.any(axis=-1)  # (...)
        additive = np.where(visible, 0.0, -np.inf)
        # rows nobody saw would have a fully masked softmax; give them a
        # uniform (discarded) row instead and substitute the null token after
        additive[none_seen] = 0.0
        weights = T.softmax(logits + T.Tensor(additive), axis=-1)
        w1 = weights.reshape(weights.data.shape + (1,))
        pooled = T.tsum(w1 * descriptors, axis=-2)  # (..., 2C)
        fused = self.reduce_mlp(pooled)
        return T.where(none_seen[..., None], self.null_token.tensor, fused)

    # -- the full additive code ----------------------------------------------

    def positional_encoding(self, anchors: np.ndarray, delay_s: np.ndarray,
                            visible: np.ndarray, ray_feats: np.ndarray,
                            depth_proj: np.ndarray, occupancy: np.ndarray) -> T.Tensor:
        """(…, R, 11) anchors + per-camera evidence -> (…, R, C) code."""
        pe = self.anchor_mlp(T.Tensor(anchors * ANCHOR_SCALE))
        if self.cfg.use_ray_occupancy:
            desc = self.camera_descriptors(ray_feats, depth_proj, occupancy)
            pe = pe + self.fuse_cameras(desc, visible)
        return pe + T.Tensor(delay_embedding(delay_s, self.cfg.channels))
