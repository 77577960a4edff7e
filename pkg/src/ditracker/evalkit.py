"""TAP-Vid style metrics (AJ, delta_avg, OA), stratified and corrupted evaluation,
and report emission.

Metric inputs are aligned arrays over tracks and frames:
pred_xy / gt_xy (N, F, 2), pred_vis probabilities (N, F), gt_vis bool (N, F),
and an optional evaluation mask (N, F). Counts are pooled over all tracks.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import MOTION_BINS, REAPPEAR_BINS, SyntheticClip, corrupt, stratify

THRESHOLDS = (1, 2, 4, 8, 16)
EVAL_SIZE = 256


def _prep(pred_xy, gt_xy, gt_vis, mask):
    pred_xy = np.asarray(pred_xy, dtype=np.float64)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if pred_xy.shape != gt_xy.shape or gt_xy.shape[:-1] != gt_vis.shape:
        raise ValueError(f"misaligned inputs: pred {pred_xy.shape}, gt {gt_xy.shape}, vis {gt_vis.shape}")
    mask = np.ones(gt_vis.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != gt_vis.shape:
        raise ValueError(f"mask shape {mask.shape} does not match {gt_vis.shape}")
    return pred_xy, gt_xy, gt_vis, mask


def _sq_dist(a, b):
    # squared distances against squared thresholds keep boundary hits exact
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]


def query_first_mask(gt_vis: np.ndarray) -> np.ndarray:
    """Evaluate only frames strictly after each track's first visible frame."""
    gt_vis = np.asarray(gt_vis, dtype=bool)
    t = gt_vis.argmax(axis=1)
    return np.arange(gt_vis.shape[1])[None, :] > t[:, None]


def delta_avg(pred_xy, gt_xy, gt_vis, mask=None) -> tuple[dict[int, float], float]:
    """Percent of GT-visible frames within each threshold (inclusive), and their mean."""
    pred_xy, gt_xy, gt_vis, mask = _prep(pred_xy, gt_xy, gt_vis, mask)
    d2 = _sq_dist(pred_xy, gt_xy)
    sel = gt_vis & mask
    n = int(sel.sum())
    per = {}
    for thr in THRESHOLDS:
        per[thr] = 100.0 * float(((d2 <= thr * thr) & sel).sum()) / n if n else float("nan")
    return per, float(np.mean(list(per.values())))


def occlusion_accuracy(pred_vis, gt_vis, mask=None, vis_threshold: float = 0.5) -> float:
    pred = np.asarray(pred_vis, dtype=np.float64) > vis_threshold
    gt_vis = np.asarray(gt_vis, dtype=bool)
    if pred.shape != gt_vis.shape:
        raise ValueError(f"misaligned inputs: pred {pred.shape}, gt {gt_vis.shape}")
    mask = np.ones(gt_vis.shape, bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    return 100.0 * float(((pred == gt_vis) & mask).sum()) / n if n else float("nan")


def average_jaccard(pred_xy, pred_vis, gt_xy, gt_vis, mask=None, vis_threshold: float = 0.5):
    """Mean over thresholds of TP / (TP + FP + FN). Returns (per-threshold dict, AJ)."""
    pred_xy, gt_xy, gt_vis, mask = _prep(pred_xy, gt_xy, gt_vis, mask)
    pv = np.asarray(pred_vis, dtype=np.float64) > vis_threshold
    if pv.shape != gt_vis.shape:
        raise ValueError("pred_vis misaligned with gt_vis")
    d2 = _sq_dist(pred_xy, gt_xy)
    per = {}
    for thr in THRESHOLDS:
        close = d2 <= thr * thr
        tp = (gt_vis & pv & close & mask).sum()
        fn = (gt_vis & ~(pv & close) & mask).sum()
        fp = (pv & (~gt_vis | ~close) & mask).sum()
        denom = int(tp + fp + fn)
        per[thr] = 100.0 * float(tp) / denom if denom else float("nan")
    return per, float(np.mean(list(per.values())))


def compute_metrics(pred_xy, pred_vis, gt_xy, gt_vis, mask=None) -> dict:
    per, davg = delta_avg(pred_xy, gt_xy, gt_vis, mask)
    _, aj = average_jaccard(pred_xy, pred_vis, gt_xy, gt_vis, mask)
    return {
        "aj": aj,
        "delta_avg": davg,
        "per_threshold": {str(k): v for k, v in per.items()},
        "oa": occlusion_accuracy(pred_vis, gt_vis, mask),
        "count": int(np.asarray(gt_vis).shape[0]),
    }


# --- evaluation protocol ------------------------------------------------------


@dataclass
class EvalOptions:
    stratify: bool = True
    corruptions: list[tuple[str, int]] = field(default_factory=list)
    iters: int | None = None
    eval_size: int = EVAL_SIZE
    corruption_seed: int = 0


@dataclass
class EvalReport:
    aj: float
    delta_avg: float
    per_threshold: dict
    oa: float
    count: int
    strata: dict = field(default_factory=dict)
    corruption_curves: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _resize_video(video: np.ndarray, h: int, w: int) -> np.ndarray:
    v = torch.as_tensor(video).permute(0, 3, 1, 2)
    if v.shape[-2:] != (h, w):
        v = F.interpolate(v, size=(h, w), mode="bilinear", align_corners=False)
    return v.permute(0, 2, 3, 1).clamp(0, 1).numpy()


def predict_clip(tracker, video: np.ndarray, queries: np.ndarray, native_hw: tuple[int, int],
                 eval_size: int = EVAL_SIZE, iters: int | None = None) -> dict:
    """Protocol: clip -> eval_size^2 -> model-native size -> predict -> back to eval_size^2.

    `video` is the clip at its own resolution, `queries` are (t, x, y) in
    eval_size coordinates. Coordinates are rescaled by plain scale factors.
    """
    from .refiner import track

    nh, nw = native_hw
    v256 = _resize_video(video, eval_size, eval_size)
    vnat = _resize_video(v256, nh, nw)
    sx, sy = nw / eval_size, nh / eval_size
    q = np.asarray(queries, dtype=np.float32).copy()
    q[:, 1] *= sx
    q[:, 2] *= sy
    out = track(vnat, tracker, q, iters)
    out["xy"] = out["xy"] / np.asarray([sx, sy], dtype=np.float32)
    return out


def evaluate(tracker, clips: list[SyntheticClip], options: EvalOptions = EvalOptions(),
             native_hw: tuple[int, int] | None = None) -> EvalReport:
    from .training import first_visible_queries

    if not clips:
        raise ValueError("empty evaluation set")
    if native_hw is None:
        native_hw = clips[0].video.shape[1:3]
    size = options.eval_size

    def run(videos):
        px, pv = [], []
        for clip, video in zip(clips, videos):
            xy, vis = clip.track_arrays()
            h, w = clip.video.shape[1:3]
            gt = xy * np.asarray([size / w, size / h], dtype=np.float32)
            out = predict_clip(tracker, video, first_visible_queries(gt, vis), native_hw, size, options.iters)
            px.append(out["xy"])
            pv.append(out["vis"])
        return np.concatenate(px), np.concatenate(pv)

    gts, viss, labels = [], [], []
    for clip in clips:
        xy, vis = clip.track_arrays()
        h, w = clip.video.shape[1:3]
        gts.append(xy * np.asarray([size / w, size / h]))
        viss.append(vis)
        diag = float(np.hypot(h, w))
        labels += [stratify(t, diag) for t in clip.tracks]
    gt_xy, gt_vis = np.concatenate(gts), np.concatenate(viss)
    mask = query_first_mask(gt_vis)

    pred_xy, pred_vis = run([c.video for c in clips])
    m = compute_metrics(pred_xy, pred_vis, gt_xy, gt_vis, mask)
    report = EvalReport(m["aj"], m["delta_avg"], m["per_threshold"], m["oa"], m["count"])
    report.header = {
        "eval_size": size,
        "native_hw": list(native_hw),
        "coordinate_scaling": "x_eval = x * eval_size / W, y_eval = y * eval_size / H",
        "query_mode": "first visible frame; frames after the query frame are scored",
        "clips": len(clips),
    }
    if options.stratify:
        strata = {}
        for axis, names, attr in (("motion", MOTION_BINS, "motion_bin"), ("reappearance", REAPPEAR_BINS, "reappearance_bin")):
            for name in names:
                sel = np.asarray([getattr(lab, attr) == name for lab in labels])
                if sel.any():
                    strata[f"{axis}:{name}"] = compute_metrics(pred_xy[sel], pred_vis[sel], gt_xy[sel], gt_vis[sel], mask[sel])
                else:
                    strata[f"{axis}:{name}"] = {"aj": None, "delta_avg": None, "oa": None, "count": 0}
        report.strata = strata
    for kind, sev in options.corruptions:
        vids = [corrupt(c.video, kind, sev, seed=options.corruption_seed + c.rng_seed) for c in clips]
        px, pv = run(vids)
        report.corruption_curves[f"{kind}:{sev}"] = delta_avg(px, gt_xy, gt_vis, mask)[1]
    return report


def metrics_from_files(pred_path, gt_path, eval_size: int | None = EVAL_SIZE) -> EvalReport:
    """Score a tracks_pred.jsonl against a ground-truth tracks.jsonl.

    If a meta.json sits next to the ground truth, coordinates are rescaled to
    eval_size x eval_size first.
    """
    from .datagen import read_tracks_jsonl
    from .refiner import read_predictions

    preds = read_predictions(pred_path)
    gts = read_tracks_jsonl(gt_path)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions but {len(gts)} ground-truth tracks")
    gt_xy = np.stack([g.positions for g in gts])
    gt_vis = np.stack([g.visible for g in gts])
    pred_xy = np.asarray([p["xy"] for p in preds], dtype=np.float64)
    pred_vis = np.asarray([p["vis"] for p in preds], dtype=np.float64)
    meta = Path(gt_path).parent / "meta.json"
    scale = np.ones(2)
    if eval_size and meta.exists():
        m = json.loads(meta.read_text())
        scale = np.asarray([eval_size / m["W"], eval_size / m["H"]])
    qf = np.asarray([int(p["query"][0]) for p in preds])
    mask = np.arange(gt_vis.shape[1])[None, :] > qf[:, None]
    r = compute_metrics(pred_xy * scale, pred_vis, gt_xy * scale, gt_vis, mask)
    return EvalReport(r["aj"], r["delta_avg"], r["per_threshold"], r["oa"], r["count"],
                      header={"eval_size": eval_size, "scale": scale.tolist()})


# --- reports ------------------------------------------------------------------


def _fmt(v):
    return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.1f}"


def report_markdown(report: EvalReport) -> str:
    lines = ["# Evaluation report", "", "| AJ | delta_avg | OA | tracks |", "|---|---|---|---|",
             f"| {_fmt(report.aj)} | {_fmt(report.delta_avg)} | {_fmt(report.oa)} | {report.count} |", ""]
    lines += ["| threshold | " + " | ".join(report.per_threshold) + " |",
              "|---|" + "---|" * len(report.per_threshold),
              "| within | " + " | ".join(_fmt(v) for v in report.per_threshold.values()) + " |", ""]
    for axis, names in (("motion", MOTION_BINS), ("reappearance", REAPPEAR_BINS)):
        cells = [report.strata.get(f"{axis}:{n}") for n in names]
        if not any(cells):
            continue
        lines += [f"## {axis} bins", "", "| bin | AJ | delta_avg | OA | tracks |", "|---|---|---|---|---|"]
        for n, c in zip(names, cells):
            lines.append(f"| {n} | {_fmt(c['aj'])} | {_fmt(c['delta_avg'])} | {_fmt(c['oa'])} | {c['count']} |")
        lines.append("")
    if report.corruption_curves:
        kinds = sorted({k.split(":")[0] for k in report.corruption_curves})
        lines += ["## corruptions (delta_avg)", "", "| kind | 1 | 2 | 3 | 4 | 5 |", "|---|---|---|---|---|---|"]
        for kind in kinds:
            row = [_fmt(report.corruption_curves.get(f"{kind}:{s}")) for s in range(1, 6)]
            lines.append(f"| {kind} | " + " | ".join(row) + " |")
        lines.append("")
    lines += ["## protocol", ""] + [f"- {k}: {v}" for k, v in report.header.items()]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "report.md").write_text(report_markdown(report))
    return out / "report.json"
