"""Synthetic scene generator contracts: determinism, geometry, depth maps, files."""
import dataclasses

import numpy as np
import pytest

import coopfusion.geometry as G
from coopfusion import scene as S
from coopfusion.anchor import ANCHOR_DIM, anchor_decode
from coopfusion.rng import seeded


def small_cfg(seed=0, **kw):
    return S.SceneConfig(seed=seed, **kw)


# -- determinism ----------------------------------------------------------------


def test_generation_bit_identical(tmp_path):
    a = S.generate_scene(small_cfg(seed=7))
    b = S.generate_scene(small_cfg(seed=7))
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    S.save_scene(a, str(pa))
    S.save_scene(b, str(pb))
    assert pa.read_bytes() == pb.read_bytes()


def test_different_seeds_differ():
    a = S.generate_scene(small_cfg(seed=1))
    b = S.generate_scene(small_cfg(seed=2))
    assert not np.allclose(a.gt_boxes[0].center, b.gt_boxes[0].center)


def test_regenerate_frame_deterministic():
    sc = S.generate_scene(small_cfg(seed=3))
    f1 = S.regenerate_frame(sc, 1, 0.25)
    f2 = S.regenerate_frame(sc, 1, 0.25)
    assert f1.pose.timestamp == -0.25
    assert len(f1.detections) == len(f2.detections)
    for d1, d2 in zip(f1.detections, f2.detections):
        assert np.array_equal(d1.anchor, d2.anchor)
        assert np.array_equal(d1.feature, d2.feature)


# -- world layout -----------------------------------------------------------------


def test_vehicles_never_overlap_in_bev():
    for seed in range(6):
        sc = S.generate_scene(small_cfg(seed=seed))
        n = len(sc.gt_boxes)
        for i in range(n):
            for j in range(i + 1, n):
                assert G.rotated_bev_iou(sc.gt_boxes[i], sc.gt_boxes[j]) == 0.0


def test_agent_layout_constraints():
    for seed in range(4):
        sc = S.generate_scene(small_cfg(seed=seed))
        ego = sc.frames[0].pose.translation
        for f in sc.frames[1:]:
            t = f.pose.translation
            assert np.linalg.norm(t - ego) <= sc.config.comm_range
            assert f.pose.timestamp <= 0.0
        assert sc.frames[0].pose.timestamp == 0.0


def test_collab_delay_within_range():
    sc = S.generate_scene(small_cfg(seed=11, delay_range=(0.1, 0.4)))
    for f in sc.frames[1:]:
        assert 0.1 <= -f.pose.timestamp <= 0.4


# -- depth maps --------------------------------------------------------------------


def test_depth_maps_are_distributions():
    sc = S.generate_scene(small_cfg(seed=0))
    for f in sc.frames:
        for dm in f.depth_maps:
            sums = dm.probs.sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-9
            assert dm.probs.min() >= 0.0


def test_empty_world_peaks_in_last_bin():
    sc = S.generate_scene(small_cfg(seed=5, num_vehicles=0))
    assert sc.gt_boxes == []
    for dm in sc.frames[0].depth_maps:
        assert np.all(dm.probs.argmax(axis=-1) == dm.probs.shape[-1] - 1)


def test_zero_spread_gives_one_hot():
    rig = S.CameraRigConfig(sigma_bins=0.0)
    sc = S.generate_scene(small_cfg(seed=4, rig=rig))
    for f in sc.frames:
        for dm in f.depth_maps:
            assert np.all((dm.probs == 0.0) | (dm.probs == 1.0))
            assert np.abs(dm.probs.sum(-1) - 1.0).max() == 0.0


def test_single_box_peaks_at_entry_depth():
    # One forward camera; a 2 m cube centered 10 m ahead. Rays enter the front
    # face exactly 9 m out (the forward component of every pixel ray is one
    # meter of x per meter of camera depth), so the peak bin is the one whose
    # continuous index is nearest (9 - d_min)/bin_width - 0.5.
    rig = S.CameraRigConfig(count=1, yaw_offsets=(0.0,), mount_offsets=((0.0, 0.0),))
    cams = S.build_rig(rig)
    cam = cams[0]
    pose = G.identity_pose()
    box = G.Box3D(np.array([10.0, 0.0, 1.0]), np.array([2.0, 2.0, 2.0]), 0.0,
                  np.zeros(3))
    dm = S.synthesize_depth_map(cam, pose, [box], rig.sigma_bins, rig.tail_weight, 0)
    pix, depth, ok = G.project_point(cam, pose, box.center)
    assert ok and abs(depth - 10.0) < 1e-12
    u, v = int(round(pix[0])), int(round(pix[1]))
    expected_bin = int(round((9.0 - cam.d_min) / cam.bin_width - 0.5))
    assert dm.probs[v, u].argmax() == expected_bin


# -- emulated detections ---------------------------------------------------------


def test_every_tp_projects_into_some_camera():
    for seed in range(5):
        sc = S.generate_scene(small_cfg(seed=seed))
        for f in sc.frames:
            for det in f.detections:
                if det.is_duplicate:
                    continue
                center_w = f.pose.apply(det.anchor[:3])
                flags = [G.project_point(c, f.pose, center_w)[2] for c in f.cameras]
                assert any(flags)


def test_confidence_bands():
    sc = S.generate_scene(small_cfg(seed=6))
    amb = sc.config.ambiguity
    for f in sc.frames:
        for det in f.detections:
            lo, hi = amb.dup_confidence if det.is_duplicate else amb.tp_confidence
            assert lo <= det.confidence <= hi


def test_duplicates_sit_on_a_camera_ray():
    # With lateral noise switched off a duplicate lies exactly on the line from
    # one of the observing agent's cameras through the true center.
    amb = S.AmbiguityConfig(along_sigma=0.0, lateral_sigma=0.0)
    sc = S.generate_scene(small_cfg(seed=9, ambiguity=amb))
    checked = 0
    for f in sc.frames:
        taus = S.gt_at(sc.gt_boxes, f.pose.timestamp)
        for det in f.detections:
            if not det.is_duplicate:
                continue
            dup_w = f.pose.apply(det.anchor[:3])
            gt_w = taus[det.gt_index].center
            best = np.inf
            for cam in f.cameras:
                o = G.camera_pose_in_world(cam, f.pose).translation
                u = gt_w - o
                u = u / np.linalg.norm(u)
                r = dup_w - o
                best = min(best, np.linalg.norm(r - (r @ u) * u))
            assert best < 1e-9
            checked += 1
    assert checked >= 3


def test_duplicate_offsets_leave_the_true_center():
    amb = S.AmbiguityConfig(along_sigma=0.0, lateral_sigma=0.0)
    sc = S.generate_scene(small_cfg(seed=9, ambiguity=amb))
    lo = amb.dup_offset[0]
    for f in sc.frames:
        taus = S.gt_at(sc.gt_boxes, f.pose.timestamp)
        for det in f.detections:
            if det.is_duplicate:
                d = np.linalg.norm(f.pose.apply(det.anchor[:3]) - taus[det.gt_index].center)
                assert d >= lo - 1e-9


def test_duplicate_count_is_poisson():
    # [DERIVED] controlled layout where the in-view filters almost never fire:
    # boxes straight ahead, offsets ~1 m. Sample mean of a Poisson(2) over
    # ~1200 draws should land within 0.15 of 2.
    rig = S.CameraRigConfig(count=1, yaw_offsets=(0.0,), mount_offsets=((0.0, 0.0),))
    cams = S.build_rig(rig)
    pose = G.identity_pose()
    amb = S.AmbiguityConfig(duplicate_rate=2.0, along_sigma=0.0, lateral_sigma=0.0,
                            dup_offset=(1.0, 1.2))
    feat = S.FeatureConfig()
    # distinct bearings so no box shadows another one's line of sight
    boxes = [G.Box3D(np.array([x, y, 0.8]), np.array([1.8, 1.6, 4.2]), 0.0, np.zeros(3))
             for x, y in ((9.0, -3.27), (13.0, 2.29), (17.0, -3.0), (21.0, 7.64))]
    tokens = seeded(0, "poisson-tokens").normal(size=(4, feat.token_dim))
    depth, ids = S._rasterize(cams[0], pose, boxes)
    n_tp = n_dup = 0
    for trial in range(300):
        dets = S.emulate_detections(cams, pose, boxes, tokens, amb, feat,
                                    seeded(77, "poisson", trial), [ids])
        n_tp += sum(1 for d in dets if not d.is_duplicate)
        n_dup += sum(1 for d in dets if d.is_duplicate)
    assert n_tp == 1200
    assert abs(n_dup / n_tp - 2.0) < 0.15


def test_occlusion_suppresses_hidden_boxes():
    # Two boxes dead ahead of one camera, one behind the other: only the near
    # one may yield a true positive.
    rig = S.CameraRigConfig(count=1, yaw_offsets=(0.0,), mount_offsets=((0.0, 0.0),))
    cams = S.build_rig(rig)
    pose = G.identity_pose()
    amb = S.AmbiguityConfig(duplicate_rate=0.0, along_sigma=0.0, lateral_sigma=0.0)
    feat = S.FeatureConfig()
    near = G.Box3D(np.array([8.0, 0.0, 1.0]), np.array([2.5, 2.0, 2.5]), 0.0, np.zeros(3))
    far = G.Box3D(np.array([14.0, 0.0, 1.0]), np.array([2.0, 1.8, 2.0]), 0.0, np.zeros(3))
    tokens = np.zeros((2, feat.token_dim))
    _, ids = S._rasterize(cams[0], pose, [near, far])
    dets = S.emulate_detections(cams, pose, [near, far], tokens, amb, feat,
                                seeded(5, "occ"), [ids])
    assert [d.gt_index for d in dets] == [0]


def test_noise_free_detections_match_ground_truth():
    cfg = S.noise_free(small_cfg(seed=10))
    sc = S.generate_scene(cfg)
    for f in sc.frames:
        taus = S.gt_at(sc.gt_boxes, f.pose.timestamp)
        for det in f.detections:
            assert not det.is_duplicate
            local = G.box_to_frame(taus[det.gt_index], f.pose)
            want = np.concatenate([local.center, np.log(local.size),
                                   [np.sin(local.yaw), np.cos(local.yaw)], local.velocity])
            assert np.abs(det.anchor - want).max() < 1e-9
            assert det.confidence == 0.9


def test_noise_free_anchor_decode_round_trip():
    cfg = S.noise_free(small_cfg(seed=12))
    sc = S.generate_scene(cfg)
    f = sc.frames[0]
    assert f.detections, "expected at least one ego detection"
    det = f.detections[0]
    box = anchor_decode(det.anchor)
    gt_local = G.box_to_frame(S.gt_at(sc.gt_boxes, f.pose.timestamp)[det.gt_index], f.pose)
    assert np.abs(box.center - gt_local.center).max() < 1e-9
    assert np.abs(box.size - gt_local.size).max() < 1e-9
    assert np.abs(box.velocity - gt_local.velocity).max() < 1e-9


def test_feature_prefix_is_scaled_anchor_when_noiseless():
    cfg = S.noise_free(small_cfg(seed=13))
    sc = S.generate_scene(cfg)
    from coopfusion.anchor import ANCHOR_SCALE
    for det in sc.frames[0].detections:
        assert np.abs(det.feature[:ANCHOR_DIM] - det.anchor * ANCHOR_SCALE).max() < 1e-12


def test_shared_appearance_tokens():
    # All detections of one vehicle carry that vehicle's token in the feature
    # suffix once noise is off, no matter which agent produced them; the slot
    # between box encoding and token is the detector's own confidence.
    cfg = S.noise_free(small_cfg(seed=14))
    sc = S.generate_scene(cfg)
    for f in sc.frames:
        for det in f.detections:
            assert abs(det.feature[ANCHOR_DIM] - det.confidence) < 1e-12
            assert np.abs(det.feature[ANCHOR_DIM + 1:] - sc.tokens[det.gt_index]).max() < 1e-12


# -- files -------------------------------------------------------------------------


def test_scene_json_round_trip(tmp_path):
    sc = S.generate_scene(small_cfg(seed=21))
    path = tmp_path / "scene.json"
    S.save_scene(sc, str(path))
    back = S.load_scene(str(path))
    assert back.config == sc.config
    assert back.t == sc.t
    assert np.array_equal(back.tokens, sc.tokens)
    for b1, b2 in zip(back.gt_boxes, sc.gt_boxes):
        assert np.array_equal(b1.center, b2.center) and b1.yaw == b2.yaw
        assert np.array_equal(b1.velocity, b2.velocity)
    for f1, f2 in zip(back.frames, sc.frames):
        assert f1.agent_id == f2.agent_id
        assert np.array_equal(f1.pose.rotation, f2.pose.rotation)
        assert f1.pose.timestamp == f2.pose.timestamp
        assert len(f1.detections) == len(f2.detections)
        for d1, d2 in zip(f1.detections, f2.detections):
            assert np.array_equal(d1.anchor, d2.anchor)
            assert np.array_equal(d1.feature, d2.feature)
            assert (d1.confidence, d1.gt_index, d1.is_duplicate) == \
                   (d2.confidence, d2.gt_index, d2.is_duplicate)
        for m1, m2 in zip(f1.depth_maps, f2.depth_maps):
            assert np.array_equal(m1.probs, m2.probs)


def test_scene_file_version_gate(tmp_path):
    import json
    sc = S.generate_scene(small_cfg(seed=1))
    path = tmp_path / "scene.json"
    S.save_scene(sc, str(path))
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(S.SceneDataError):
        S.load_scene(str(path))


def test_scene_file_malformed(tmp_path):
    import json
    sc = S.generate_scene(small_cfg(seed=1))
    path = tmp_path / "scene.json"
    S.save_scene(sc, str(path))
    doc = json.loads(path.read_text())
    del doc["agents"][0]["pose"]
    path.write_text(json.dumps(doc))
    with pytest.raises(S.SceneDataError):
        S.load_scene(str(path))


def test_depth_blob_round_trip(tmp_path):
    sc = S.generate_scene(small_cfg(seed=22))
    path = tmp_path / "depth.bin"
    S.save_depth_blob(sc, str(path))
    blob = S.load_depth_blob(str(path))
    for f in sc.frames:
        for dm in f.depth_maps:
            got = blob[(f.agent_id, dm.camera_index)]
            assert got.shape == dm.probs.shape
            assert np.array_equal(got, dm.probs.astype(np.float32))


def test_depth_blob_truncation(tmp_path):
    sc = S.generate_scene(small_cfg(seed=22))
    path = tmp_path / "depth.bin"
    S.save_depth_blob(sc, str(path))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(S.SceneDataError):
        S.load_depth_blob(str(path))


def test_depth_blob_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(S.SceneDataError):
        S.load_depth_blob(str(path))


# -- config validation ---------------------------------------------------------------


def test_config_rejects_bad_agent_count():
    with pytest.raises(ValueError):
        S.SceneConfig(num_agents=1)
    with pytest.raises(ValueError):
        S.SceneConfig(num_agents=6)


def test_config_rejects_oversized_extent():
    with pytest.raises(ValueError):
        S.SceneConfig(extent=60.0)


def test_feature_channels_floor():
    with pytest.raises(ValueError):
        S.FeatureConfig(channels=11)


def test_noise_free_is_pure():
    cfg = small_cfg(seed=2)
    quiet = S.noise_free(cfg)
    assert cfg.ambiguity.duplicate_rate == 1.0
    assert quiet.ambiguity.duplicate_rate == 0.0
    assert quiet.feature.noise_sigma == 0.0
    assert quiet.seed == cfg.seed
    assert dataclasses.asdict(cfg.rig) == dataclasses.asdict(quiet.rig)
