"""Set-matched detection training.

Each scene's predictions are assigned to ground-truth boxes one-to-one by a
Hungarian solve over a classification + box-distance cost, gated so nothing
matches across more than a fixed center distance. Matched rows regress their
target encodings under an L1 loss; every valid row contributes to a focal
objectness loss. The loop is fully deterministic: shuffling derives from named
seed streams, the metrics file carries no wall-clock state (timings go to a
separate log), and checkpoints serialize in sorted-key order.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .nn import AdamW, cosine_lr, load_checkpoint, save_checkpoint
from .rng import seeded

GATE_COST = 1.0e6  # sentinel for forbidden assignments


class TrainingDivergedError(ArithmeticError):
    """Raised when the loss or a parameter stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_scenes: int = 4
    lr: float = 3e-3
    weight_decay: float = 1e-4
    class_weight: float = 4.0
    box_weight: float = 1.0
    gate_distance: float = 2.0  # meters, matching cutoff
    ignore_distance: float = 2.0  # meters, unmatched-but-near rows skip the class loss
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    seed: int = 0  # shuffling stream, independent of model init


# -- matching --------------------------------------------------------------------


def match_scene(pred_enc: np.ndarray, scores: np.ndarray, valid: np.ndarray,
                gt_enc: np.ndarray, cfg: TrainConfig) -> tuple:
    """One-to-one assignment of valid rows to ground-truth boxes.

    Cost per pair: class_weight * (1 - score) + box_weight * mean |enc diff|;
    pairs with centers farther than the gate can never match. Returns
    (row_indices, gt_indices), possibly empty.
    """
    rows = np.flatnonzero(valid)
    if rows.size == 0 or len(gt_enc) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pe = pred_enc[rows]
    cls_cost = cfg.class_weight * (1.0 - scores[rows])[:, None]
    box_cost = cfg.box_weight * np.abs(pe[:, None, :] - gt_enc[None, :, :]).mean(-1)
    dist = np.linalg.norm(pe[:, None, :3] - gt_enc[None, :, :3], axis=-1)
    cost = np.where(dist > cfg.gate_distance, GATE_COST, cls_cost + box_cost)
    if not np.isfinite(cost).all():
        raise TrainingDivergedError("non-finite prediction reached the matcher")
    ri, gi = linear_sum_assignment(cost)
    keep = cost[ri, gi] < GATE_COST / 2
    return rows[ri[keep]], gi[keep]


# -- losses ----------------------------------------------------------------------


def focal_loss_scalar(p: float, y: int, alpha: float = 0.25,
                      gamma: float = 2.0) -> float:
    """Reference implementation on plain floats (oracle for the tensor path)."""
    p = min(max(p, 1e-7), 1.0 - 1e-7)
    pt = p if y == 1 else 1.0 - p
    at = alpha if y == 1 else 1.0 - alpha
    return -at * (1.0 - pt) ** gamma * float(np.log(pt))


def focal_loss(scores: T.Tensor, labels: np.ndarray, valid: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> T.Tensor:
    """Mean focal objectness loss over the valid rows.

    `scores` (…, R) are post-sigmoid; `labels` is 1 on matched rows.
    """
    p = T.clamp(scores, 1e-7, 1.0 - 1e-7)
    pos = labels.astype(bool)
    pt = T.where(pos, p, 1.0 - p)
    at = np.where(pos, alpha, 1.0 - alpha)
    per_row = T.Tensor(-at) * (1.0 - pt) ** gamma * T.log(pt)
    weights = valid.astype(np.float64)
    n = max(weights.sum(), 1.0)
    return T.tsum(per_row * T.Tensor(weights)) * (1.0 / n)


def regression_loss(pred_enc: T.Tensor, targets: np.ndarray,
                    matched: np.ndarray) -> T.Tensor:
    """Mean absolute encoding error over matched rows (all 11 components)."""
    weights = matched.astype(np.float64)[..., None]
    n = max(weights.sum() * targets.shape[-1], 1.0)
    diff = T.absolute(pred_enc - T.Tensor(targets)) * T.Tensor(weights)
    return T.tsum(diff) * (1.0 / n)


# -- head splitting ----------------------------------------------------------------


def split_head(head_out: T.Tensor, anchors: np.ndarray) -> tuple:
    """(…, R, 12) raw outputs -> (box encodings tensor, score tensor)."""
    sel_enc = np.zeros((12, 11))
    sel_enc[:11, :11] = np.eye(11)
    sel_logit = np.zeros((12, 1))
    sel_logit[11, 0] = 1.0
    enc = T.matmul(head_out, T.Tensor(sel_enc)) + T.Tensor(anchors)
    logit = T.matmul(head_out, T.Tensor(sel_logit))
    scores = T.sigmoid(logit.reshape(logit.data.shape[:-1]))
    return enc, scores


def batch_targets(pred_enc: np.ndarray, scores: np.ndarray, batch: list,
                  cfg: TrainConfig) -> tuple:
    """Matching for a whole batch.

    Returns (labels (B,R), targets (B,R,11), class-loss mask (B,R), n_matched).
    One-to-one matching leaves extra true views of an already-claimed vehicle
    unmatched; rows whose anchor sits within ignore_distance of some vehicle
    center are therefore masked out of the class loss instead of being pushed
    toward zero. Rows farther than that from every vehicle stay negatives.
    """
    b, r = scores.shape
    labels = np.zeros((b, r))
    targets = np.zeros((b, r, pred_enc.shape[-1]))
    cls_mask = np.zeros((b, r))
    total = 0
    for i, si in enumerate(batch):
        rows, gts = match_scene(pred_enc[i], scores[i], si.valid, si.gt_enc, cfg)
        labels[i, rows] = 1.0
        targets[i, rows] = si.gt_enc[gts]
        total += len(rows)
        mask = si.valid.astype(np.float64)
        if len(si.gt_enc):
            near = np.linalg.norm(
                si.anchors[:, None, :3] - si.gt_enc[None, :, :3], axis=-1
            ).min(axis=1) < cfg.ignore_distance
            unmatched = np.ones(r, dtype=bool)
            unmatched[rows] = False
            mask[near & unmatched] = 0.0
        cls_mask[i] = mask
    return labels, targets, cls_mask, total


def batch_loss(model, batch: list, cfg: TrainConfig) -> tuple:
    """Forward + match + loss for one scene batch.

    Returns (loss tensor, stats dict). The match runs on detached values so
    the gradient flows only through the losses, as in standard set matching.
    """
    anchors = np.stack([s.anchors for s in batch])
    out = model.forward_batch(batch)
    enc, scores = split_head(out, anchors)
    labels, targets, cls_mask, n_matched = batch_targets(enc.data, scores.data,
                                                         batch, cfg)
    cls = focal_loss(scores, labels, cls_mask, cfg.focal_alpha, cfg.focal_gamma)
    box = regression_loss(enc, targets, labels)
    loss = cfg.class_weight * cls + cfg.box_weight * box
    stats = {"cls": float(cls.data), "box": float(box.data),
             "matched": int(n_matched),
             "gt": int(sum(len(s.gt_enc) for s in batch))}
    return loss, stats


# -- the loop ---------------------------------------------------------------------


def train_run(model, train_inputs: list, out_dir: str, cfg: TrainConfig,
              resume: bool = False, quiet: bool = True,
              stop_after: int = None) -> list:
    """Train in place; returns the per-epoch history that went to metrics.jsonl.

    Writes three artifacts under out_dir: ``metrics.jsonl`` (deterministic,
    one line per epoch), ``timing.log`` (wall-clock, excluded from the
    determinism surface), and ``checkpoint.bin`` (model + optimizer + epoch).
    ``stop_after`` interrupts the schedule after that many epochs (the cosine
    schedule still spans cfg.epochs, so a later ``resume=True`` completes the
    run exactly as if it had never stopped).
    """
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    timing_path = os.path.join(out_dir, "timing.log")
    ckpt_path = os.path.join(out_dir, "checkpoint.bin")

    opt = AdamW(model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start_epoch = 0
    history = []
    if resume and os.path.exists(ckpt_path):
        arrays = load_checkpoint(ckpt_path)
        model.load_arrays({k: v for k, v in arrays.items()
                           if not k.startswith(("opt.", "meta."))})
        opt.load_state_arrays({k: v for k, v in arrays.items()
                               if k.startswith("opt.")})
        start_epoch = int(arrays["meta.epoch"].ravel()[0]) + 1
        if os.path.exists(metrics_path):
            with open(metrics_path) as fh:
                history = [json.loads(line) for line in fh
                           if json.loads(line)["epoch"] < start_epoch]
    mode = "a" if start_epoch else "w"
    n = len(train_inputs)
    last = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    with open(metrics_path, mode) as mfh, open(timing_path, mode) as tfh:
        for epoch in range(start_epoch, last):
            t0 = time.perf_counter()
            lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
            order = seeded(cfg.seed, "epoch", epoch).permutation(n)
            sums = {"loss": 0.0, "cls": 0.0, "box": 0.0}
            matched = 0
            batches = 0
            for lo in range(0, n, cfg.batch_scenes):
                batch = [train_inputs[i] for i in order[lo:lo + cfg.batch_scenes]]
                loss, stats = batch_loss(model, batch, cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}: {value}")
                for p in model.params():
                    p.tensor.zero_grad()
                loss.backward()
                opt.step(lr=lr)
                sums["loss"] += value
                sums["cls"] += stats["cls"]
                sums["box"] += stats["box"]
                matched += stats["matched"]
                batches += 1
            row = {"epoch": epoch,
                   "loss": sums["loss"] / batches,
                   "cls": sums["cls"] / batches,
                   "box": sums["box"] / batches,
                   "matched": matched,
                   "lr": lr}
            history.append(row)
            mfh.write(json.dumps(row, sort_keys=True) + "\n")
            mfh.flush()
            tfh.write(f"epoch {epoch}: {time.perf_counter() - t0:.3f}s\n")
            tfh.flush()
            arrays = dict(model.named_arrays())
            arrays.update(opt.state_arrays())
            arrays["meta.epoch"] = np.array(epoch)
            save_checkpoint(ckpt_path, arrays)
            if not quiet:
                print(f"epoch {epoch}: loss={row['loss']:.4f} "
                      f"cls={row['cls']:.4f} box={row['box']:.4f}")
    if last == start_epoch and not os.path.exists(ckpt_path):
        # zero-epoch run: the checkpoint is the initialization (epoch -1
        # completed, so a later resume starts from epoch 0)
        arrays = dict(model.named_arrays())
        arrays.update(opt.state_arrays())
        arrays["meta.epoch"] = np.array(-1)
        save_checkpoint(ckpt_path, arrays)
    return history
