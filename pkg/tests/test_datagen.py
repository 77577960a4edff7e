import json

import numpy as np
import pytest

from ditracker import datagen as dg
from ditracker.datagen import (
    GeneratorConfig,
    GroundTruthTrack,
    Scene,
    Shape,
    Texture,
    clip_from_scene,
    corrupt,
    generate_clip,
    generate_clip_with_scene,
    load_clip,
    save_clip,
    stratify,
)


def flat_texture(value):
    return Texture(np.full(3, value), np.zeros((1, 3)), np.zeros((1, 2)), np.zeros(1))


def test_same_seed_is_bit_identical():
    cfg = GeneratorConfig()
    a, b = generate_clip(cfg, 7), generate_clip(cfg, 7)
    assert a.video.tobytes() == b.video.tobytes()
    xa, va = a.track_arrays()
    xb, vb = b.track_arrays()
    assert xa.tobytes() == xb.tobytes() and va.tobytes() == vb.tobytes()
    assert generate_clip(cfg, 8).video.tobytes() != a.video.tobytes()


def test_clip_invariants():
    cfg = GeneratorConfig()
    for seed in range(5):
        clip = generate_clip(cfg, seed)
        assert clip.video.shape == (cfg.frames, cfg.height, cfg.width, 3)
        assert clip.video.min() >= 0 and clip.video.max() <= 1
        assert len(clip.tracks) > 0
        for tr in clip.tracks:
            assert tr.visible.any()
            assert np.all(np.isfinite(tr.positions))
            px = np.floor(tr.positions + 0.5)
            outside = (px[:, 0] < 0) | (px[:, 0] >= cfg.width) | (px[:, 1] < 0) | (px[:, 1] >= cfg.height)
            assert not np.any(tr.visible & outside)


def test_degenerate_config_rejected():
    with pytest.raises(ValueError):
        generate_clip(GeneratorConfig(height=0), 0)
    with pytest.raises(ValueError):
        generate_clip(GeneratorConfig(frames=1), 0)


def test_static_object_tracks_are_constant_and_visible():
    scene = Scene(24, 32, 8, flat_texture(0.2))
    scene.shapes.append(Shape("rect", (6.0, 5.0), np.tile([16.0, 12.0], (8, 1)), 1, flat_texture(0.8)))
    clip = clip_from_scene(scene, [(1, (1.0, -2.0)), (1, (-3.0, 2.5)), (0, (2.0, 2.0))])
    for tr in clip.tracks:
        assert np.all(tr.positions == tr.positions[0])
        assert tr.visible.all()


def test_crossing_behind_occluder_reappears_once():
    F = 8
    scene = Scene(16, 32, F, flat_texture(0.1))
    centers = np.stack([np.linspace(4, 28, F), np.full(F, 8.0)], axis=1)
    scene.shapes.append(Shape("rect", (2.0, 2.0), centers, 1, flat_texture(0.5)))
    scene.shapes.append(Shape("rect", (3.0, 16.0), np.tile([16.0, 8.0], (F, 1)), 2, flat_texture(0.9)))
    clip = clip_from_scene(scene, [(1, (0.0, 0.0))])
    vis = clip.tracks[0].visible
    # centre x per frame: 4, 7.43, 10.86, 14.29, 17.71, 21.14, 24.57, 28; bar covers |x - 16| <= 3
    np.testing.assert_array_equal(vis, [1, 1, 1, 0, 0, 1, 1, 1])
    assert stratify(clip.tracks[0], np.hypot(16, 32)).reappearances == 1


def _depth_test_visibility(scene, track, owner):
    """Independent re-render: topmost shape at the rounded pixel of each frame."""
    vis = []
    for f, (x, y) in enumerate(track.positions):
        px, py = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        if not (0 <= px < scene.width and 0 <= py < scene.height):
            vis.append(False)
            continue
        top, top_depth = 0, -1
        for k, s in enumerate(scene.shapes):
            du, dv = px - s.centers[f, 0], py - s.centers[f, 1]
            if s.contains(du, dv) and s.depth > top_depth:
                top, top_depth = k + 1, s.depth
        vis.append(top == owner)
    return np.asarray(vis)


def test_visibility_matches_depth_test_on_50_clips():
    cfg = GeneratorConfig()
    for seed in range(50):
        clip, scene = generate_clip_with_scene(cfg, 1000 + seed)
        for tr, owner in zip(clip.tracks, clip.owners):
            np.testing.assert_array_equal(tr.visible, _depth_test_visibility(scene, tr, owner))


def test_gaussian_noise_std_matches_table():
    v = np.full((4, 50, 50, 3), 0.5, dtype=np.float32)
    for s, sigma in enumerate(dg.SEVERITY_TABLE["gaussian_noise"], start=1):
        out = corrupt(v, "gaussian_noise", s, seed=s)
        assert abs(out.std() - sigma) / sigma < 0.05


def test_motion_blur_of_constant_is_constant():
    v = np.full((2, 20, 30, 3), 0.3, dtype=np.float32)
    np.testing.assert_allclose(corrupt(v, "motion_blur", 1, seed=0), v, atol=1e-6)


def test_brightness_shift_grows_with_severity():
    ramp = np.tile(np.linspace(0, 0.6, 30, dtype=np.float32)[None, None, :, None], (2, 10, 1, 3))
    shifts = [float((corrupt(ramp, "brightness", s) - ramp).mean()) for s in range(1, 6)]
    assert all(a < b for a, b in zip(shifts, shifts[1:]))


def test_corruption_deviation_monotone_and_clipped():
    clip = generate_clip(GeneratorConfig(), 3)
    for kind in ("gaussian_noise", "motion_blur"):
        dev = []
        for s in range(1, 6):
            out = corrupt(clip.video, kind, s, seed=11)
            assert out.min() >= 0 and out.max() <= 1
            dev.append(np.abs(out - clip.video).mean())
        assert all(a <= b + 1e-7 for a, b in zip(dev, dev[1:])), (kind, dev)
    for kind in ("brightness", "contrast"):
        out = corrupt(clip.video, kind, 5)
        assert out.min() >= 0 and out.max() <= 1


def test_corrupt_rejects_bad_args():
    v = np.zeros((1, 4, 4, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        corrupt(v, "fog", 1)
    with pytest.raises(ValueError):
        corrupt(v, "brightness", 6)
    with pytest.raises(ValueError):
        corrupt(v, "brightness", 0)


def test_corrupt_is_deterministic():
    v = generate_clip(GeneratorConfig(), 0).video
    for kind in dg.CORRUPTIONS:
        assert corrupt(v, kind, 3, seed=5).tobytes() == corrupt(v, kind, 3, seed=5).tobytes()


def test_stratify_examples():
    static = GroundTruthTrack(np.tile([5.0, 5.0], (6, 1)), np.ones(6, bool))
    lab = stratify(static, 100.0)
    assert lab.motion_bin == "[0%,0.5%)" and lab.reappearance_bin == "[0,1)"

    pos = np.stack([np.arange(5.0), np.zeros(5)], axis=1)  # 1 px per frame
    moving = GroundTruthTrack(pos, np.ones(5, bool))
    assert stratify(moving, 100.0).motion_bin == "[0.5%,1.5%)"

    flicker = GroundTruthTrack(np.zeros((5, 2)), np.array([1, 0, 1, 0, 1], bool))
    lab = stratify(flicker, 50.0)
    assert lab.reappearances == 2 and lab.reappearance_bin == "[1,3)"

    fast = GroundTruthTrack(pos * 10, np.ones(5, bool))
    assert stratify(fast, 100.0).motion_bin is None

    with pytest.raises(ValueError):
        stratify(GroundTruthTrack(np.zeros((1, 2)), [True]), 10.0)


def test_stratify_bin_edges_are_half_open():
    for pct, expected in ((0.0, "[0%,0.5%)"), (0.5, "[0.5%,1.5%)"), (1.5, "[1.5%,5%)"), (4.999, "[1.5%,5%)"), (5.0, None)):
        pos = np.stack([np.array([0.0, pct]), np.zeros(2)], axis=1)
        assert stratify(GroundTruthTrack(pos, [True, True]), 100.0).motion_bin == expected


def test_stratify_partitions_in_range_tracks():
    cfg = GeneratorConfig()
    for seed in range(10):
        clip = generate_clip(cfg, seed)
        for tr in clip.tracks:
            lab = stratify(tr, np.hypot(cfg.height, cfg.width))
            assert sum(lab.reappearance_bin == b for b in dg.REAPPEAR_BINS) == 1
            if np.isfinite(lab.motion_pct) and lab.motion_pct < 5:
                assert sum(lab.motion_bin == b for b in dg.MOTION_BINS) == 1


def test_clip_directory_round_trip(tmp_path):
    clip = generate_clip(GeneratorConfig(), 4)
    save_clip(clip, tmp_path / "c")
    assert sorted(p.name for p in (tmp_path / "c" / "frames").iterdir())[0] == "00000.png"
    meta = json.loads((tmp_path / "c" / "meta.json").read_text())
    assert meta == {"F": 8, "H": 32, "W": 48, "seed": 4}
    rec = json.loads((tmp_path / "c" / "tracks.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"id", "xy", "visible"}
    back = load_clip(tmp_path / "c")
    assert np.abs(back.video - clip.video).max() <= 0.5 / 255 + 1e-6
    for a, b in zip(back.tracks, clip.tracks):
        np.testing.assert_array_equal(a.positions, b.positions)
        np.testing.assert_array_equal(a.visible, b.visible)


def test_config_from_json(tmp_path):
    p = tmp_path / "gen.json"
    p.write_text(json.dumps({"frames": 4, "speed_range": [0, 1]}))
    cfg = GeneratorConfig.from_json(p)
    assert cfg.frames == 4 and cfg.speed_range == (0, 1)
