"""Matching, losses, and the training loop."""
import json

import numpy as np
import pytest

import coopfusion.scene as S
import coopfusion.tensor as T
from coopfusion.model import CollabDetector, ModelConfig, build_scene_inputs
from coopfusion.nn import grad_check, load_checkpoint
from coopfusion.training import (TrainConfig, TrainingDivergedError, batch_loss,
                                 focal_loss, focal_loss_scalar, match_scene,
                                 regression_loss, split_head, train_run)


def tiny_setup(n_scenes=4, channels=16, seed=0):
    cfg = ModelConfig(channels=channels, ego_slots=12, collab_slots=6,
                      origin_freqs=2, direction_freqs=1, seed=seed)
    scenes = [S.generate_scene(S.SceneConfig(seed=100 + i, num_vehicles=8,
                                             feature=S.FeatureConfig(channels=channels)))
              for i in range(n_scenes)]
    inputs = [build_scene_inputs(sc, cfg) for sc in scenes]
    return cfg, inputs


# -- focal loss -----------------------------------------------------------------


def test_focal_scalar_reference_value():
    # [DERIVED] p=0.5, y=1: -0.25 * (0.5)^2 * ln(0.5)
    want = 0.25 * 0.25 * np.log(2.0)
    assert abs(focal_loss_scalar(0.5, 1) - want) < 1e-15
    assert abs(focal_loss_scalar(0.5, 1) - 0.04332169878499658) < 1e-15


def test_focal_tensor_matches_scalar_reference():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.001, 0.999, size=(2, 5))
    labels = (rng.uniform(size=(2, 5)) < 0.5).astype(float)
    valid = np.ones((2, 5), dtype=bool)
    got = float(focal_loss(T.Tensor(p), labels, valid).data)
    want = np.mean([focal_loss_scalar(p[i, j], int(labels[i, j]))
                    for i in range(2) for j in range(5)])
    assert abs(got - want) < 1e-12


def test_focal_ignores_invalid_rows():
    p = np.array([[0.9, 0.123]])
    labels = np.array([[1.0, 0.0]])
    valid = np.array([[True, False]])
    got = float(focal_loss(T.Tensor(p), labels, valid).data)
    assert abs(got - focal_loss_scalar(0.9, 1)) < 1e-15


def test_focal_saturated_scores_stay_finite():
    p = np.array([[0.0, 1.0]])
    labels = np.array([[1.0, 0.0]])
    valid = np.ones((1, 2), dtype=bool)
    got = float(focal_loss(T.Tensor(p), labels, valid).data)
    assert np.isfinite(got) and got > 0


def test_focal_gradient():
    rng = np.random.default_rng(5)
    raw = rng.normal(size=(3, 4))
    labels = (rng.uniform(size=(3, 4)) < 0.4).astype(float)
    valid = rng.uniform(size=(3, 4)) < 0.8
    from coopfusion.nn import Parameter
    theta = Parameter("theta", raw)

    def loss_fn():
        return focal_loss(T.sigmoid(theta.tensor), labels, valid)

    report = grad_check(loss_fn, [theta], n_samples=12, seed=2)
    assert report.max_rel_err < 1e-4, report.worst


# -- regression loss ---------------------------------------------------------------


def test_regression_hand_value():
    pred = np.zeros((1, 2, 11))
    pred[0, 0, 0] = 0.5
    targets = np.zeros((1, 2, 11))
    matched = np.array([[1.0, 0.0]])
    got = float(regression_loss(T.Tensor(pred), targets, matched).data)
    assert abs(got - 0.5 / 11.0) < 1e-15


def test_regression_empty_match_is_zero():
    pred = np.ones((1, 3, 11))
    got = float(regression_loss(T.Tensor(pred), np.zeros((1, 3, 11)),
                                np.zeros((1, 3))).data)
    assert got == 0.0


# -- matching -------------------------------------------------------------------------


def enc_at(x, y, score_slot=0.0):
    e = np.zeros(11)
    e[0], e[1] = x, y
    e[7] = 1.0  # cos(yaw)=1
    return e


def test_match_prefers_near_boxes():
    pred = np.stack([enc_at(0.0, 0.0), enc_at(5.0, 0.0)])
    gt = np.stack([enc_at(4.9, 0.0), enc_at(0.1, 0.0)])
    scores = np.array([0.5, 0.5])
    valid = np.ones(2, dtype=bool)
    rows, gts = match_scene(pred, scores, valid, gt, TrainConfig())
    pairs = dict(zip(rows.tolist(), gts.tolist()))
    assert pairs == {0: 1, 1: 0}


def test_match_gate_blocks_distant_pairs():
    pred = np.stack([enc_at(0.0, 0.0)])
    gt = np.stack([enc_at(50.0, 0.0)])
    rows, gts = match_scene(pred, np.array([0.9]), np.ones(1, dtype=bool), gt,
                            TrainConfig())
    assert rows.size == 0 and gts.size == 0


def test_match_prefers_confident_when_boxes_tie():
    pred = np.stack([enc_at(0.0, 0.0), enc_at(0.0, 0.0)])
    gt = np.stack([enc_at(0.0, 0.0)])
    scores = np.array([0.2, 0.9])
    rows, gts = match_scene(pred, scores, np.ones(2, dtype=bool), gt, TrainConfig())
    assert rows.tolist() == [1]


def test_match_respects_validity():
    pred = np.stack([enc_at(0.0, 0.0), enc_at(0.0, 0.0)])
    gt = np.stack([enc_at(0.0, 0.0)])
    valid = np.array([False, True])
    rows, _ = match_scene(pred, np.array([0.9, 0.1]), valid, gt, TrainConfig())
    assert rows.tolist() == [1]


def test_match_empty_inputs():
    rows, gts = match_scene(np.zeros((0, 11)), np.zeros(0),
                            np.zeros(0, dtype=bool), np.zeros((0, 11)),
                            TrainConfig())
    assert rows.size == 0 and gts.size == 0


# -- head splitting ---------------------------------------------------------------------


def test_split_head_exact():
    rng = np.random.default_rng(1)
    head = rng.normal(size=(2, 3, 12))
    anchors = rng.normal(size=(2, 3, 11))
    enc, scores = split_head(T.Tensor(head), anchors)
    assert np.abs(enc.data - (anchors + head[..., :11])).max() < 1e-15
    want = 1.0 / (1.0 + np.exp(-head[..., 11]))
    assert np.abs(scores.data - want).max() < 1e-15


# -- end-to-end loss --------------------------------------------------------------------


def test_batch_loss_runs_and_differentiates():
    cfg, inputs = tiny_setup(n_scenes=2)
    model = CollabDetector(cfg)
    loss, stats = batch_loss(model, inputs, TrainConfig())
    assert np.isfinite(loss.data)
    assert stats["matched"] > 0
    assert stats["gt"] == sum(len(s.gt_enc) for s in inputs)
    for p in model.params():
        p.tensor.zero_grad()
    loss.backward()
    grads = [p.tensor.grad for p in model.params()]
    assert any(g is not None and np.abs(g).max() > 0 for g in grads)


def test_training_reduces_loss(tmp_path):
    cfg, inputs = tiny_setup(n_scenes=4)
    model = CollabDetector(cfg)
    hist = train_run(model, inputs, str(tmp_path / "run"),
                     TrainConfig(epochs=8, batch_scenes=2, lr=2e-3))
    assert len(hist) == 8
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_training_artifacts_and_determinism(tmp_path):
    cfg, inputs = tiny_setup(n_scenes=3)
    tcfg = TrainConfig(epochs=3, batch_scenes=2)
    m1 = CollabDetector(cfg)
    m2 = CollabDetector(cfg)
    train_run(m1, inputs, str(tmp_path / "a"), tcfg)
    train_run(m2, inputs, str(tmp_path / "b"), tcfg)
    a_metrics = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b_metrics = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a_metrics == b_metrics
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == \
        (tmp_path / "b" / "checkpoint.bin").read_bytes()
    assert (tmp_path / "a" / "timing.log").exists()
    lines = [json.loads(l) for l in a_metrics.decode().splitlines()]
    assert [l["epoch"] for l in lines] == [0, 1, 2]
    assert all(np.isfinite(l["loss"]) for l in lines)


def test_resume_continues_from_checkpoint(tmp_path):
    cfg, inputs = tiny_setup(n_scenes=3)
    out = str(tmp_path / "run")
    tcfg = TrainConfig(epochs=4, batch_scenes=2)
    model = CollabDetector(cfg)
    train_run(model, inputs, out, tcfg, stop_after=2)  # interrupted mid-schedule
    arrays = load_checkpoint(out + "/checkpoint.bin")
    assert int(arrays["meta.epoch"].ravel()[0]) == 1
    resumed = CollabDetector(cfg)
    hist = train_run(resumed, inputs, out, tcfg, resume=True)
    assert [h["epoch"] for h in hist] == [0, 1, 2, 3]
    with open(out + "/metrics.jsonl") as fh:
        epochs = [json.loads(l)["epoch"] for l in fh]
    assert epochs == [0, 1, 2, 3]
    # a resumed run must match an uninterrupted one bit for bit
    straight = CollabDetector(cfg)
    train_run(straight, inputs, str(tmp_path / "straight"), tcfg)
    for name, arr in straight.named_arrays().items():
        assert np.array_equal(arr, resumed.named_arrays()[name]), name
    assert (tmp_path / "straight" / "metrics.jsonl").read_bytes() == \
        (tmp_path / "run" / "metrics.jsonl").read_bytes()


def test_non_finite_loss_raises(tmp_path):
    cfg, inputs = tiny_setup(n_scenes=2)
    inputs[0].features[0, 0] = np.nan
    model = CollabDetector(cfg)
    with pytest.raises(TrainingDivergedError):
        train_run(model, inputs, str(tmp_path / "bad"),
                  TrainConfig(epochs=1, batch_scenes=2))
