"""Desk-scale reproduction pipeline with an on-disk cache.

Stages: pretrain the toy DiT, sweep its layers/heads, compare zero-shot
tracking against a random initialisation, train the ablation arms and
measure the motion-blur curve. Every stage is keyed by a hash of the
settings it depends on, so reruns reuse finished work.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import datagen, dit, evalkit, matching, refiner, training

# (use_lora, fusion) per arm; the second table varies fusion on top of the LoRA model
TABLE7_ARMS = {
    "I": (False, "none"),
    "II": (False, "cost_concat"),
    "III": (True, "none"),
    "IV": (True, "cost_concat"),
}
TABLE8_ARMS = {
    "I": (True, "none"),
    "II": (True, "feature_concat"),
    "III": (True, "cost_sum"),
    "IV": (True, "cost_concat"),
}


def cache_root(path=None) -> Path:
    root = path or os.environ.get("DITRACKER_CACHE") or Path.home() / ".cache" / "ditracker"
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    return root


@dataclass(frozen=True)
class DeskProtocol:
    seed: int = 0
    train_clips: int = 512
    sweep_clips: int = 10
    zeroshot_clips: int = 20
    eval_clips: int = 24
    pretrain_steps: int = 2000
    pretrain_batch: int = 4
    pretrain_lr: float = 5e-4
    train_steps: int = 2000
    train_lr: float = 3e-4
    queries_per_clip: int = 16

    # disjoint seed ranges for each split
    TRAIN_SEED0 = 0
    SWEEP_SEED0 = 10_000
    ZEROSHOT_SEED0 = 20_000
    EVAL_SEED0 = 30_000

    def key(self, *fields) -> str:
        d = asdict(self)
        blob = json.dumps({f: d[f] for f in sorted(fields)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def clips(seed0: int, n: int, cfg: datagen.GeneratorConfig | None = None):
    cfg = cfg or datagen.GeneratorConfig()
    return [datagen.generate_clip(cfg, seed0 + i) for i in range(n)]


def _log(msg: str, log=None):
    if log:
        log(msg)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# --- pretraining and the layer/head sweep ------------------------------------


def fit_encoder(model: dit.VideoDiT, corpus) -> torch.Tensor:
    videos = torch.cat([dit.video_to_tensor(c.video) for c in corpus])
    model.encoder.fit(videos)
    return videos


def pretrained_dit(proto: DeskProtocol = DeskProtocol(), cache=None, log=None) -> tuple[dit.VideoDiT, dict]:
    """Pretrained toy DiT with (extract_layer, extract_head) set by the sweep."""
    key = proto.key("seed", "train_clips", "sweep_clips", "pretrain_steps", "pretrain_batch", "pretrain_lr")
    d = cache_root(cache) / f"dit-{key}"
    if (d / "manifest.json").exists():
        return dit.load_dit(d), json.loads((d / "manifest.json").read_text())
    torch.manual_seed(proto.seed)
    model = dit.VideoDiT(dit.DiTConfig())
    corpus = clips(DeskProtocol.TRAIN_SEED0, proto.train_clips)
    videos = fit_encoder(model, corpus)
    latents = dit.encode_corpus(model, videos)
    hold = 16
    t0 = time.time()
    res = dit.pretrain_flow_matching(
        model, latents[hold:], steps=proto.pretrain_steps, batch_size=proto.pretrain_batch, lr=proto.pretrain_lr,
        seed=proto.seed, holdout=latents[:hold], log_every=50,
        progress=lambda s, l: _log(f"pretrain step {s} loss {l:.4f} ({time.time() - t0:.0f}s)", log))
    grid, (layer, head) = matching.sweep_layers_heads(model, clips(DeskProtocol.SWEEP_SEED0, proto.sweep_clips))
    model.cfg.extract_layer, model.cfg.extract_head = layer, head
    extra = {
        "loss_curve": res.loss_curve,
        "holdout_before": res.holdout_before,
        "holdout_after": res.holdout_after,
        "sweep_grid": grid.tolist(),
        "selected": [layer, head],
        "seconds": time.time() - t0,
    }
    dit.save_dit(model, d, seed=proto.seed, steps=proto.pretrain_steps, corpus=dit.corpus_hash(videos.numpy()),
                 extra=extra)
    return model, json.loads((d / "manifest.json").read_text())


def random_dit(like: dit.VideoDiT, seed: int = 0) -> dit.VideoDiT:
    """Same architecture and fixed patch encoder, randomly initialised transformer."""
    torch.manual_seed(seed + 1)
    model = dit.VideoDiT(copy.deepcopy(like.cfg))
    model.encoder.load_state_dict(like.encoder.state_dict())
    return model.eval()


def zero_shot_scores(model: dit.VideoDiT, clip_list, layer: int, head: int, eval_size: int = evalkit.EVAL_SIZE) -> dict:
    """Pooled zero-shot argmax metrics at one (layer, head)."""
    preds, gts, viss, masks = [], [], [], []
    for clip in clip_list:
        xy, vis = clip.track_arrays()
        f, H, W, _ = clip.video.shape
        with torch.no_grad():
            z = dit.encode_frames(dit.video_to_tensor(clip.video), model)
            qk = dit.extract_qk(z, model, layer, head)
        qf = vis.argmax(axis=1)
        starts = xy[np.arange(len(xy)), qf]
        scale = np.asarray([eval_size / W, eval_size / H])
        preds.append(matching.zero_shot_tracks(qk.Q[0], qk.K[0], starts, H, W, qf) * scale)
        gts.append(xy * scale)
        viss.append(vis)
        masks.append(evalkit.query_first_mask(vis))
    per, avg = evalkit.delta_avg(np.concatenate(preds), np.concatenate(gts), np.concatenate(viss),
                                 np.concatenate(masks))
    return {"delta_avg": avg, "per_threshold": {str(k): v for k, v in per.items()}}


def zero_shot_comparison(proto: DeskProtocol = DeskProtocol(), cache=None, log=None) -> dict:
    d = cache_root(cache)
    key = proto.key("seed", "train_clips", "sweep_clips", "zeroshot_clips", "pretrain_steps", "pretrain_batch",
                    "pretrain_lr")
    out = d / f"zeroshot-{key}.json"
    if out.exists():
        return json.loads(out.read_text())
    model, manifest = pretrained_dit(proto, cache, log)
    rand = random_dit(model, proto.seed)
    held = clips(DeskProtocol.ZEROSHOT_SEED0, proto.zeroshot_clips)
    layer, head = model.cfg.extract_layer, model.cfg.extract_head
    rgrid, rbest = matching.sweep_layers_heads(rand, clips(DeskProtocol.SWEEP_SEED0, proto.sweep_clips))
    result = {
        "selected": [layer, head],
        "pretrained": zero_shot_scores(model, held, layer, head),
        "random_same_cell": zero_shot_scores(rand, held, layer, head),
        "random_best_cell": zero_shot_scores(rand, held, *rbest),
        "random_selected": list(rbest),
        "holdout_mse_before": manifest["holdout_before"],
        "holdout_mse_after": manifest["holdout_after"],
        "clips": proto.zeroshot_clips,
    }
    result["gain"] = result["pretrained"]["delta_avg"] - result["random_same_cell"]["delta_avg"]
    _write_json(out, result)
    return result


# --- tracker arms ---------------------------------------------------------------


def arm_config(use_lora: bool, fusion: str, **kw) -> refiner.TrackerConfig:
    return refiner.TrackerConfig(use_lora=use_lora, fusion=fusion, **kw)


def trained_arm(use_lora: bool, fusion: str, proto: DeskProtocol = DeskProtocol(), cache=None, log=None):
    """Tracker for one ablation arm trained for proto.train_steps on the synthetic corpus."""
    key = proto.key("seed", "train_clips", "sweep_clips", "pretrain_steps", "pretrain_batch", "pretrain_lr",
                    "train_steps", "train_lr", "queries_per_clip")
    d = cache_root(cache) / f"arm-{'lora' if use_lora else 'frozen'}-{fusion}-{key}"
    if (d / "tracker.pt").exists():
        return refiner.load_tracker(d), json.loads((d / "manifest.json").read_text())
    base, _ = pretrained_dit(proto, cache, log)
    tracker = refiner.build_tracker(base, arm_config(use_lora, fusion), seed=proto.seed)
    corpus = clips(DeskProtocol.TRAIN_SEED0, proto.train_clips)
    sched = training.TrainSchedule(steps=proto.train_steps, lr=proto.train_lr, queries_per_clip=proto.queries_per_clip)
    t0 = time.time()
    res = training.train(tracker, corpus, sched, seed=proto.seed,
                         progress=lambda s, l: _log(f"arm {use_lora}/{fusion} step {s} loss {l:.3f} "
                                                    f"({time.time() - t0:.0f}s)", log))
    extra = {"loss_curve": res.loss_curve, "probe_before": res.probe_before, "probe_after": res.probe_after,
             "seconds": time.time() - t0}
    refiner.save_tracker(tracker, d, seed=proto.seed, steps=proto.train_steps, extra=extra)
    return tracker, json.loads((d / "manifest.json").read_text())


def eval_clips(proto: DeskProtocol = DeskProtocol()):
    return clips(DeskProtocol.EVAL_SEED0, proto.eval_clips)


def ablation(proto: DeskProtocol = DeskProtocol(), cache=None, log=None) -> dict:
    """Metrics of every arm of the LoRA x fusion and fusion-strategy tables on the held-out evaluation clips."""
    key = proto.key(*[f for f in asdict(proto)])
    out = cache_root(cache) / f"ablation-{key}.json"
    if out.exists():
        return json.loads(out.read_text())
    held = eval_clips(proto)
    arms = {}
    for use_lora, fusion in sorted(set(TABLE7_ARMS.values()) | set(TABLE8_ARMS.values())):
        tracker, manifest = trained_arm(use_lora, fusion, proto, cache, log)
        rep = evalkit.evaluate(tracker, held, evalkit.EvalOptions(stratify=False))
        arms[f"{'lora' if use_lora else 'frozen'}/{fusion}"] = {
            "aj": rep.aj, "delta_avg": rep.delta_avg, "oa": rep.oa,
            "probe_before": manifest["probe_before"], "probe_after": manifest["probe_after"],
            **motion_split(tracker, held),
        }
        _log(f"arm {use_lora}/{fusion}: AJ {rep.aj:.1f} delta {rep.delta_avg:.1f} OA {rep.oa:.1f}", log)
    result = {
        "arms": arms,
        "table7": {k: arms[f"{'lora' if l else 'frozen'}/{f}"] for k, (l, f) in TABLE7_ARMS.items()},
        "table8": {k: arms[f"{'lora' if l else 'frozen'}/{f}"] for k, (l, f) in TABLE8_ARMS.items()},
        "eval_clips": proto.eval_clips,
        "stay_baseline": motion_split(None, held),
    }
    _write_json(out, result)
    return result


def motion_split(tracker, clip_list, min_travel: float = 2.0) -> dict:
    """delta_avg and median endpoint error separately for moving and static tracks.

    A track is moving when its first and last ground-truth positions are more than
    min_travel pixels apart. tracker=None scores the stay-at-query baseline.
    """
    parts = {"moving": ([], [], [], []), "static": ([], [], [], [])}
    for clip in clip_list:
        xy, vis = clip.track_arrays()
        q = training.first_visible_queries(xy, vis)
        if tracker is None:
            pred = np.broadcast_to(q[:, None, 1:], xy.shape)
        else:
            pred = refiner.track(clip.video, tracker, q)["xy"]
        moving = np.linalg.norm(xy[:, -1] - xy[:, 0], axis=-1) > min_travel
        _, h, w, _ = clip.video.shape
        scale = np.asarray([evalkit.EVAL_SIZE / w, evalkit.EVAL_SIZE / h])
        for name, sel in (("moving", moving), ("static", ~moving)):
            for acc, arr in zip(parts[name], (pred[sel] * scale, xy[sel] * scale, vis[sel],
                                              np.linalg.norm(pred - xy, axis=-1)[sel][:, 1:].ravel())):
                acc.append(arr)
    out = {}
    for name, (p, g, v, e) in parts.items():
        p, g, v, e = map(np.concatenate, (p, g, v, e))
        out[f"{name}_delta_avg"] = evalkit.delta_avg(p, g, v, evalkit.query_first_mask(v))[1]
        out[f"{name}_median_epe_px"] = float(np.median(e))
        out[f"{name}_tracks"] = len(p)
    return out


def blur_curve(proto: DeskProtocol = DeskProtocol(), cache=None, log=None) -> dict:
    """delta_avg of the arm-IV model over motion_blur severities 1..5."""
    key = proto.key(*[f for f in asdict(proto)])
    out = cache_root(cache) / f"blur-{key}.json"
    if out.exists():
        return json.loads(out.read_text())
    tracker, _ = trained_arm(*TABLE7_ARMS["IV"], proto, cache, log)
    opts = evalkit.EvalOptions(stratify=False, corruptions=[("motion_blur", s) for s in range(1, 6)],
                               corruption_seed=proto.seed)
    rep = evalkit.evaluate(tracker, eval_clips(proto), opts)
    curve = [rep.corruption_curves[f"motion_blur:{s}"] for s in range(1, 6)]
    base, _ = pretrained_dit(proto, cache, log)
    untrained = refiner.build_tracker(base, arm_config(*TABLE7_ARMS["IV"]), seed=proto.seed)
    # the zero-initialised output layer would make the untrained tracker exact on a static scene
    torch.manual_seed(proto.seed)
    untrained.refiner.out.reset_parameters()
    result = {"clean": rep.delta_avg, "curve": curve, "degradation": curve[0] - curve[-1],
              "static_epe": {"trained": static_epe(tracker), "untrained": static_epe(untrained)}}
    _write_json(out, result)
    return result


def static_epe(tracker, seed: int = 40_000) -> float:
    """Mean endpoint error (pixels, GT-visible frames) on a held-out clip where nothing moves."""
    clip = datagen.generate_clip(datagen.GeneratorConfig(speed_range=(0.0, 0.0)), seed)
    xy, vis = clip.track_arrays()
    out = refiner.track(clip.video, tracker, training.first_visible_queries(xy, vis))
    err = np.linalg.norm(out["xy"] - xy, axis=-1)
    return float(err[vis].mean())


def table_markdown(title: str, rows: dict, arms: dict) -> str:
    lines = [f"## {title}", "", "| arm | DiT LoRA | fusion | AJ | delta_avg | OA | delta_avg moving | delta_avg static |",
             "|---|---|---|---|---|---|---|---|"]
    for name, (use_lora, fusion) in arms.items():
        r = rows[name]
        lines.append(f"| {name} | {'yes' if use_lora else 'no'} | {fusion} | {r['aj']:.1f} | {r['delta_avg']:.1f} "
                     f"| {r['oa']:.1f} | {r['moving_delta_avg']:.1f} | {r['static_delta_avg']:.1f} |")
    return "\n".join(lines) + "\n"


def with_overrides(proto: DeskProtocol, **kw) -> DeskProtocol:
    return replace(proto, **{k: v for k, v in kw.items() if v is not None})
