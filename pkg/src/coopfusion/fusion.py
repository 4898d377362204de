"""Multi-scale instance fusion and the detection head.

All instances in the merged set attend to one another, but only within
distance windows: several attention branches share one set of query/key/value
projections and differ only in how far apart two instances may sit before
their logit is masked out. A per-instance softmax then mixes the branch
outputs, so each instance chooses how local its evidence should be. An empty
radius tuple degenerates to a single unbounded branch (every valid instance
attends to every other), which serves as the single-scale baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .nn import Mlp, MlpSpec, Parameter

HEAD_OUT = 12  # 11 box-encoding deltas + 1 objectness logit


@dataclass(frozen=True)
class FusionConfig:
    channels: int  # C
    window_radii: tuple = (4.0, 8.0, 16.0)  # meters; () -> one unbounded branch
    per_row_mixing: bool = True  # False: one branch softmax for the whole scene


class PyramidFusion:
    """Windowed self-attention over instance codes plus the box/score head."""

    def __init__(self, cfg: FusionConfig, seed: int):
        self.cfg = cfg
        c = cfg.channels
        self.n_branches = max(len(cfg.window_radii), 1)
        # normalize incoming codes so attention logits start in the soft
        # region of the softmax regardless of upstream feature scales
        self.in_gain = Parameter("fus.in_gain", np.ones(2 * c))
        self.in_bias = Parameter("fus.in_bias", np.zeros(2 * c))
        self.query = Mlp("fus.query", MlpSpec((2 * c, c)), seed)
        self.key = Mlp("fus.key", MlpSpec((2 * c, c)), seed)
        self.value = Mlp("fus.value", MlpSpec((2 * c, c)), seed)
        self.mix = None
        if self.n_branches > 1:
            self.mix = Mlp("fus.mix", MlpSpec((self.n_branches * c, self.n_branches)),
                           seed)
        self.ffn = Mlp("fus.ffn", MlpSpec((c, 4 * c, c), "gelu"), seed)
        self.ln_gain = Parameter("fus.ln_gain", np.ones(c))
        self.ln_bias = Parameter("fus.ln_bias", np.zeros(c))
        self.head = Mlp("fus.head", MlpSpec((c, c, HEAD_OUT), "gelu"), seed)

    def params(self) -> list:
        out = [self.in_gain, self.in_bias]
        for mlp in (self.query, self.key, self.value, self.mix, self.ffn):
            if mlp is not None:
                out.extend(mlp.params())
        out.extend((self.ln_gain, self.ln_bias))
        out.extend(self.head.params())
        return out

    # -- masks ----------------------------------------------------------------

    def window_masks(self, positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Additive masks (..., B, R, R): 0 keeps a pair, -inf drops it.

        A pair survives branch b when both instances are valid and their
        centers sit closer (3D Euclidean) than that branch's radius.
        Self-attention is always kept so no row ever degenerates; invalid
        rows are zeroed downstream.
        """
        ctr = np.asarray(positions, dtype=np.float64)
        diff = ctr[..., :, None, :] - ctr[..., None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))  # (..., R, R)
        pair_ok = valid[..., :, None] & valid[..., None, :]
        branches = []
        radii = self.cfg.window_radii or (None,)
        for r in radii:
            ok = pair_ok if r is None else pair_ok & (dist < r)
            branches.append(ok)
        ok = np.stack(branches, axis=-3)  # (..., B, R, R)
        n = ok.shape[-1]
        eye = np.eye(n, dtype=bool)
        ok = ok | eye
        return np.where(ok, 0.0, -np.inf)

    # -- forward ---------------------------------------------------------------

    def fuse(self, codes: T.Tensor, masks: np.ndarray, valid: np.ndarray) -> T.Tensor:
        """(…, R, 2C) instance codes -> (…, R, C) fused features."""
        c = self.cfg.channels
        codes = T.layernorm(codes, self.in_gain.tensor, self.in_bias.tensor)
        q = self.query(codes)
        k = self.key(codes)
        v = self.value(codes)
        kt = T.swap_last2(k)
        valid_col = valid[..., None].astype(np.float64)
        base = T.matmul(q, kt) * (1.0 / np.sqrt(c))  # shared across branches
        outs = []
        for b in range(self.n_branches):
            logits = base + T.Tensor(masks[..., b, :, :])
            att = T.softmax(logits, axis=-1)
            outs.append(T.matmul(att, v) * T.Tensor(valid_col))
        if self.n_branches == 1:
            fused = outs[0]
        else:
            mix_logits = self.mix(T.concat(outs, axis=-1))  # (..., R, B)
            if not self.cfg.per_row_mixing:
                mix_logits = T.tmean(mix_logits, axis=-2, keepdims=True)
            w = T.softmax(mix_logits, axis=-1)
            fused = None
            for b in range(self.n_branches):
                pick = np.zeros(self.n_branches)
                pick[b] = 1.0
                wb = T.tsum(w * T.Tensor(pick), axis=-1, keepdims=True)
                term = wb * outs[b]
                fused = term if fused is None else fused + term
        hidden = fused + self.ffn(fused)
        return T.layernorm(hidden, self.ln_gain.tensor, self.ln_bias.tensor)

    def predict(self, codes: T.Tensor, masks: np.ndarray, valid: np.ndarray) -> T.Tensor:
        """Fused codes -> (…, R, 12) raw head outputs, invalid rows zeroed."""
        fused = self.fuse(codes, masks, valid)
        return self.head(fused) * T.Tensor(valid[..., None].astype(np.float64))


# -- decoding -------------------------------------------------------------------


def decode_head(anchors: np.ndarray, head_out: np.ndarray) -> tuple:
    """Raw head outputs -> (box encodings, scores), residuals off the anchors."""
    enc = np.asarray(anchors, dtype=np.float64) + head_out[..., :11]
    scores = 1.0 / (1.0 + np.exp(-head_out[..., 11]))
    return enc, scores


def deduplicate(boxes: list, scores: np.ndarray, iou_threshold: float = 0.15) -> list:
    """Greedy suppression: keep by descending score, drop BEV overlaps."""
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    kept = []
    for i in order:
        if all(G.rotated_bev_iou(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept
