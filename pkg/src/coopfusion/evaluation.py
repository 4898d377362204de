"""Scoring, robustness sweeps, ablation orchestration, and report artifacts.

Average precision follows the usual detection recipe: detections across all
scenes are ranked by score, greedily matched one-to-one against ground truth
at a BEV IoU threshold, and the precision envelope is integrated over recall
(all-point interpolation). Sweeps re-run evaluation under controlled stress
(pose noise on collaborators, message staleness) and report seed-averaged
results. All artifact writers emit byte-stable output.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as G
from . import message as M
from . import scene as S
from .anchor import anchor_decode
from .fusion import deduplicate
from .model import build_scene_inputs
from .rng import seeded


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. no ground truth)."""


@dataclass
class PRCurve:
    recalls: np.ndarray  # cumulative, one entry per ranked detection
    precisions: np.ndarray
    ap: float
    n_gt: int
    n_det: int

    def precision_at(self, recall_grid: np.ndarray) -> np.ndarray:
        """Interpolated precision envelope at each grid recall (0 beyond reach)."""
        out = np.zeros_like(np.asarray(recall_grid, dtype=np.float64))
        for i, r in enumerate(np.asarray(recall_grid)):
            ok = self.recalls >= r - 1e-12
            out[i] = self.precisions[ok].max() if ok.any() else 0.0
        return out


def scene_detections(model, inputs, dedup_iou: float = 0.15) -> tuple:
    """Decoded, suppressed detections for one scene: (boxes, scores)."""
    enc, scores, valid = model.predict_scene(inputs)
    idx = np.flatnonzero(valid)
    boxes = [anchor_decode(enc[i]) for i in idx]
    kept = deduplicate(boxes, scores[idx], dedup_iou)
    return [boxes[j] for j in kept], np.array([scores[idx[j]] for j in kept])


def average_precision(detections: list, ground_truths: list,
                      iou_threshold: float = 0.7) -> PRCurve:
    """All-point interpolated AP over a list of scenes.

    ``detections`` holds one (boxes, scores) pair per scene; ``ground_truths``
    one box list per scene. Ties rank by (scene, detection) order so the
    result never depends on sort instability.
    """
    n_gt = sum(len(g) for g in ground_truths)
    if n_gt == 0:
        raise UndefinedMetricError("no ground-truth boxes: AP is undefined")
    ranked = []
    for si, (boxes, scores) in enumerate(detections):
        for di, (box, score) in enumerate(zip(boxes, scores)):
            ranked.append((-float(score), si, di, box))
    ranked.sort(key=lambda t: t[:3])
    taken = [np.zeros(len(g), dtype=bool) for g in ground_truths]
    tp = np.zeros(len(ranked))
    for r, (_, si, _, box) in enumerate(ranked):
        gts = ground_truths[si]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[si][j]:
                continue
            iou = G.rotated_bev_iou(box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[si][best_j] = True
            tp[r] = 1.0
    cum_tp = np.cumsum(tp)
    recalls = cum_tp / n_gt
    precisions = cum_tp / np.arange(1, len(ranked) + 1)
    ap = 0.0
    prev_r = 0.0
    for r in np.unique(recalls[tp > 0]):
        ap += (r - prev_r) * precisions[recalls >= r - 1e-12].max()
        prev_r = r
    return PRCurve(recalls, precisions, float(ap), n_gt, len(ranked))


def evaluate_model(model, inputs_list: list, iou_threshold: float = 0.7,
                   dedup_iou: float = 0.15) -> PRCurve:
    dets = [scene_detections(model, si, dedup_iou) for si in inputs_list]
    gts = [si.gt_boxes for si in inputs_list]
    return average_precision(dets, gts, iou_threshold)


# -- robustness sweeps ---------------------------------------------------------------


def noise_sweep(model, scenes: list, model_cfg, sigmas: list, n_seeds: int = 3,
                iou_threshold: float = 0.7) -> list:
    """Seed-averaged AP while collaborator poses drift by Gaussian noise.

    Returns rows of {"sigma", "ap_mean", "ap_per_seed"}.
    """
    rows = []
    for k, sigma in enumerate(sigmas):
        aps = []
        for s in range(1 if sigma == 0.0 else n_seeds):
            inputs = [build_scene_inputs(sc, model_cfg, pose_noise_sigma=sigma,
                                         noise_rng=seeded(s, "pose-noise", k, i))
                      for i, sc in enumerate(scenes)]
            aps.append(evaluate_model(model, inputs, iou_threshold).ap)
        rows.append({"sigma": float(sigma), "ap_mean": float(np.mean(aps)),
                     "ap_per_seed": [float(a) for a in aps]})
    return rows


def delay_sweep(model, scenes: list, model_cfg, delays: list,
                iou_threshold: float = 0.7) -> list:
    """AP under re-observed collaborator staleness, with and without the
    constant-velocity roll-forward."""
    rows = []
    for k, delay in enumerate(delays):
        inputs_on, inputs_off = [], []
        for sc in scenes:
            frames = [sc.frames[0]] + [
                S.regenerate_frame(sc, f.agent_id, delay, seed_tag=f"delay{k}")
                for f in sc.frames[1:]]
            inputs_on.append(build_scene_inputs(sc, model_cfg, frames=frames,
                                                sta_motion=True))
            inputs_off.append(build_scene_inputs(sc, model_cfg, frames=frames,
                                                 sta_motion=False))
        rows.append({"delay": float(delay),
                     "ap_compensated": evaluate_model(model, inputs_on,
                                                      iou_threshold).ap,
                     "ap_stale": evaluate_model(model, inputs_off,
                                                iou_threshold).ap})
    return rows


# -- communication accounting -----------------------------------------------------------


def comm_table(channels: int, depth_bins: int, cameras: int, counts: list) -> list:
    rows = []
    for n in counts:
        payload = n * M.instance_nbytes(channels, depth_bins, cameras)
        rows.append({"instances": int(n), "header_bytes": M.header_nbytes(),
                     "payload_bytes": int(payload),
                     "total_bytes": M.header_nbytes() + int(payload)})
    return rows


def comm_report(channels: int, depth_bins: int, cameras: int,
                counts: list = (0, 1, 2, 5, 10, 25, 50, 100, 200)) -> dict:
    """Affine byte model (fit + residual check) and the 200:5 payload ratio."""
    rows = comm_table(channels, depth_bins, cameras, list(counts))
    ns = np.array([r["instances"] for r in rows], dtype=np.int64)
    totals = np.array([r["total_bytes"] for r in rows], dtype=np.int64)
    # the byte law is affine in integers, so fit it from two exact points and
    # report the worst residual over the whole table
    slope = (totals[-1] - totals[0]) / (ns[-1] - ns[0])
    intercept = float(totals[0] - slope * ns[0])
    residual = float(np.abs(totals - (slope * ns + intercept)).max())
    per = M.instance_nbytes(channels, depth_bins, cameras)
    ratio = (200 * per) / (5 * per)
    return {"rows": rows, "slope": float(slope), "intercept": float(intercept),
            "max_residual": residual, "bytes_per_instance": per,
            "header_bytes": M.header_nbytes(), "payload_ratio_200_to_5": ratio}


# -- ablation orchestration --------------------------------------------------------------


ABLATION_VARIANTS = ("full", "no_roe", "no_ray", "no_occupancy",
                     "no_high_freq", "single_window", "no_sta")


def variant_config(base, name: str):
    """Model config for a named ablation of the full system."""
    if name == "full":
        return base
    if name == "no_roe":
        return replace(base, use_ray_occupancy=False)
    if name == "no_ray":
        return replace(base, use_ray=False)
    if name == "no_occupancy":
        return replace(base, use_occupancy=False)
    if name == "no_high_freq":
        return replace(base, origin_freqs=0, direction_freqs=0)
    if name == "single_window":
        return replace(base, window_radii=())
    if name == "no_sta":
        return replace(base, sta_spatial=False, sta_motion=False)
    raise ValueError(f"unknown ablation variant {name!r}")


def input_signature(cfg) -> tuple:
    """Scene inputs depend only on these fields; variants sharing them can
    share the (expensive) packaging step."""
    return (cfg.channels, cfg.depth_bins, cfg.cameras, cfg.ego_slots,
            cfg.collab_slots, cfg.origin_freqs, cfg.direction_freqs,
            cfg.sta_spatial, cfg.sta_motion, cfg.velocity_rotate_only)


# -- artifact writers ----------------------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_csv(path: str, header: list, rows: list):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_json(path: str, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_pr_svg(path: str, curves: dict, title: str = "precision vs recall"):
    """Byte-stable SVG plot of one or more PR curves."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "coopfusion"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for name in sorted(curves):
        c = curves[name]
        ax.plot(c.recalls, c.precisions, label=f"{name} (AP={c.ap:.3f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_pr_curves_csv(path: str, curves: dict):
    rows = []
    for name in sorted(curves):
        c = curves[name]
        for r, p in zip(c.recalls, c.precisions):
            rows.append([name, float(r), float(p)])
    write_csv(path, ["variant", "recall", "precision"], rows)
