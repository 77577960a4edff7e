import json

import numpy as np
import pytest

from conftest import micro_tracker, randomise
from ditracker import evalkit as ek
from ditracker.datagen import GeneratorConfig, generate_clip, save_clip
from ditracker.refiner import write_predictions


# --- independent brute-force oracles: explicit loops over tracks, frames, thresholds ---


def sq(p, g):
    dx, dy = p[0] - g[0], p[1] - g[1]
    return dx * dx + dy * dy


def bf_delta(pred, gt, vis):
    per = []
    for thr in (1, 2, 4, 8, 16):
        hit = tot = 0
        for n in range(len(gt)):
            for f in range(len(gt[n])):
                if vis[n][f]:
                    tot += 1
                    hit += sq(pred[n][f], gt[n][f]) <= thr * thr
        per.append(100.0 * hit / tot if tot else float("nan"))
    return per, sum(per) / 5


def bf_oa(pvis, vis):
    good = tot = 0
    for n in range(len(vis)):
        for f in range(len(vis[n])):
            tot += 1
            good += (pvis[n][f] > 0.5) == bool(vis[n][f])
    return 100.0 * good / tot


def bf_aj(pred, pvis, gt, vis):
    per = []
    for thr in (1, 2, 4, 8, 16):
        tp = fp = fn = 0
        for n in range(len(gt)):
            for f in range(len(gt[n])):
                close = sq(pred[n][f], gt[n][f]) <= thr * thr
                pv, gv = pvis[n][f] > 0.5, bool(vis[n][f])
                if gv and pv and close:
                    tp += 1
                if gv and not (pv and close):
                    fn += 1
                if pv and (not gv or not close):
                    fp += 1
        per.append(100.0 * tp / (tp + fp + fn) if tp + fp + fn else float("nan"))
    return sum(per) / 5


def random_instance(rng):
    n, f = int(rng.integers(1, 4)), int(rng.integers(1, 7))
    gt = rng.uniform(0, 40, (n, f, 2))
    # errors land on both sides of every threshold, including exact boundary hits
    err = rng.choice([0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 7.9, 8.0, 12.0, 16.0, 20.0], (n, f))
    ang = rng.uniform(0, 2 * np.pi, (n, f))
    axis = rng.random((n, f)) < 0.5
    ang = np.where(axis, 0.0, ang)
    pred = gt + np.stack([err * np.cos(ang), err * np.sin(ang)], -1)
    vis = rng.random((n, f)) < 0.7
    vis[0, 0] = True
    pvis = rng.choice([0.0, 0.3, 0.5, 0.50001, 0.9, 1.0], (n, f))
    return pred, pvis, gt, vis


def test_metrics_match_brute_force_on_100_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, pvis, gt, vis = random_instance(rng)
        per, davg = ek.delta_avg(pred, gt, vis)
        bper, bavg = bf_delta(pred.tolist(), gt.tolist(), vis.tolist())
        assert list(per.values()) == bper and davg == bavg
        assert ek.occlusion_accuracy(pvis, vis) == bf_oa(pvis.tolist(), vis.tolist())
        assert ek.average_jaccard(pred, pvis, gt, vis)[1] == bf_aj(pred.tolist(), pvis.tolist(), gt.tolist(), vis.tolist())


def test_delta_avg_hand_case():
    gt = np.zeros((1, 2, 2))
    pred = np.array([[[0.5, 0.0], [0.0, 3.0]]])
    per, avg = ek.delta_avg(pred, gt, np.ones((1, 2), bool))
    assert list(per.values()) == [50.0, 50.0, 100.0, 100.0, 100.0] and avg == 80.0


def test_average_jaccard_hand_case():
    gt = np.zeros((1, 2, 2))
    pred = np.array([[[3.0, 0.0], [0.0, 0.0]]])
    per, aj = ek.average_jaccard(pred, np.ones((1, 2)), gt, np.array([[True, False]]))
    assert list(per.values()) == [0.0, 0.0, 50.0, 50.0, 50.0] and aj == 30.0


def test_perfect_and_degenerate_predictions():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 50, (3, 5, 2))
    vis = rng.random((3, 5)) < 0.6
    vis[:, 0] = True
    m = ek.compute_metrics(gt, vis.astype(float), gt, vis)
    assert m["aj"] == m["delta_avg"] == m["oa"] == 100.0
    assert ek.average_jaccard(gt, np.zeros((3, 5)), gt, vis)[1] == 0.0
    assert ek.occlusion_accuracy(np.full((3, 5), 0.5), vis) == 100.0 * int((~vis).sum()) / vis.size
    oa = ek.occlusion_accuracy(vis.astype(float) * 0.8 + 0.1, vis)
    assert ek.occlusion_accuracy(1 - (vis.astype(float) * 0.8 + 0.1), vis) == 100.0 - oa


def test_occluded_predictions_do_not_affect_delta():
    gt = np.zeros((1, 3, 2))
    vis = np.array([[True, False, True]])
    a = np.zeros((1, 3, 2))
    b = a.copy()
    b[0, 1] = [100.0, 100.0]
    assert ek.delta_avg(a, gt, vis) == ek.delta_avg(b, gt, vis)


def test_aj_equals_delta_with_perfect_visibility_and_no_fp():
    # all GT-visible, visibility predicted perfectly, all errors within the smallest threshold
    gt = np.zeros((2, 4, 2))
    pred = gt + 0.5
    vis = np.ones((2, 4), bool)
    assert ek.average_jaccard(pred, np.ones((2, 4)), gt, vis)[1] == ek.delta_avg(pred, gt, vis)[1]


def test_metrics_are_order_independent_over_tracks():
    rng = np.random.default_rng(3)
    pred, pvis, gt, vis = random_instance(rng)
    while len(gt) < 3:
        pred, pvis, gt, vis = random_instance(rng)
    perm = [2, 0, 1]
    a = ek.compute_metrics(pred, pvis, gt, vis)
    b = ek.compute_metrics(pred[perm], pvis[perm], gt[perm], vis[perm])
    assert a == b


def test_misaligned_inputs_raise():
    with pytest.raises(ValueError):
        ek.delta_avg(np.zeros((1, 3, 2)), np.zeros((1, 2, 2)), np.ones((1, 2), bool))
    with pytest.raises(ValueError):
        ek.occlusion_accuracy(np.zeros((1, 3)), np.ones((1, 2), bool))
    with pytest.raises(ValueError):
        ek.average_jaccard(np.zeros((1, 2, 2)), np.zeros((2, 2)), np.zeros((1, 2, 2)), np.ones((1, 2), bool))


def test_query_first_mask():
    vis = np.array([[False, True, True, False], [True, True, True, True]])
    np.testing.assert_array_equal(ek.query_first_mask(vis), [[0, 0, 1, 1], [0, 1, 1, 1]])


@pytest.fixture(scope="module")
def eval_setup():
    cfg = GeneratorConfig(frames=3, height=16, width=24, num_tracks=8)
    clips = [generate_clip(cfg, s) for s in range(3)]
    tr = micro_tracker(seed=0)
    randomise(tr, scale=0.05)
    return tr, clips


def test_evaluate_report_consistency(eval_setup):
    tr, clips = eval_setup
    opts = ek.EvalOptions(corruptions=[("gaussian_noise", 1), ("gaussian_noise", 5)])
    rep = ek.evaluate(tr, clips, opts)
    assert rep.delta_avg == pytest.approx(np.mean(list(rep.per_threshold.values())), abs=1e-9)
    for v in (rep.aj, rep.delta_avg, rep.oa):
        assert 0 <= v <= 100
    total = sum(len(c.tracks) for c in clips)
    assert rep.count == total
    motion = sum(rep.strata[f"motion:{b}"]["count"] for b in ("[0%,0.5%)", "[0.5%,1.5%)", "[1.5%,5%)"))
    reapp = sum(rep.strata[f"reappearance:{b}"]["count"] for b in ("[0,1)", "[1,3)", "[3,1000)"))
    assert reapp == total and motion <= total
    assert set(rep.corruption_curves) == {"gaussian_noise:1", "gaussian_noise:5"}
    assert "256" in str(rep.header["coordinate_scaling"]) or rep.header["eval_size"] == 256


def test_evaluate_is_deterministic(eval_setup):
    tr, clips = eval_setup
    a = ek.evaluate(tr, clips, ek.EvalOptions(stratify=False))
    b = ek.evaluate(tr, clips, ek.EvalOptions(stratify=False))
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)


def test_report_files(tmp_path, eval_setup):
    tr, clips = eval_setup
    rep = ek.evaluate(tr, clips[:1], ek.EvalOptions(corruptions=[("motion_blur", 2)]))
    ek.write_report(rep, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert {"aj", "delta_avg", "oa", "per_threshold", "strata", "corruption_curves"} <= set(data)
    md = (tmp_path / "report.md").read_text()
    assert "motion bins" in md and "reappearance bins" in md and "motion_blur" in md


def test_metrics_from_files_perfect_predictions(tmp_path):
    clip = generate_clip(GeneratorConfig(), 2)
    save_clip(clip, tmp_path / "clip")
    xy, vis = clip.track_arrays()
    t = vis.argmax(1)
    q = np.concatenate([t[:, None], xy[np.arange(len(xy)), t]], 1)
    write_predictions(tmp_path / "pred.jsonl", q, {"xy": xy, "vis": vis.astype(float), "conf": np.ones(vis.shape)})
    rep = ek.metrics_from_files(tmp_path / "pred.jsonl", tmp_path / "clip" / "tracks.jsonl")
    assert rep.aj == rep.delta_avg == rep.oa == 100.0
    with pytest.raises(FileNotFoundError):
        ek.metrics_from_files(tmp_path / "missing.jsonl", tmp_path / "clip" / "tracks.jsonl")
