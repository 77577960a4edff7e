"""Command-line entry point: ``ditracker <command> [flags]``.

Settings resolve as flags > ``--config`` JSON file > built-in defaults, and the
resolved settings are written to ``<out>/config.json``. Exit codes: 0 success,
2 configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import datagen, dit, evalkit, experiments, matching, refiner, training


class ConfigError(Exception):
    pass


COMMON = {"seed": 0, "out": None, "device": "cpu", "config": None}

DEFAULTS = {
    "gen-data": {"num_clips": 16, "frames": 8, "height": 32, "width": 48, "num_tracks": 24, "min_objects": 2,
                 "max_objects": 8, "max_occluders": 1},
    "pretrain-dit": {"data": None, "num_clips": 256, "steps": 2000, "batch_size": 4, "lr": 5e-4, "holdout": 16,
                     "layers": 6, "heads": 4, "d_head": 32},
    "sweep": {"dit": None, "data": None, "num_clips": 10, "clip_seed": 10_000},
    "train": {"dit": None, "data": None, "num_clips": 256, "steps": 2000, "lr": 3e-4, "batch_size": 1,
              "queries_per_clip": 16, "fusion": "cost_concat", "lora": True, "lora_rank": 16, "iters": 4},
    "track": {"ckpt": None, "clip": None, "queries": None, "iters": None},
    "eval": {"pred": None, "gt": None, "ckpt": None, "data": None, "corrupt": [], "stratify": False,
             "iters": None, "eval_size": 256, "overlays": False},
    "repro-ablation": {"train_clips": 512, "eval_clips": 24, "pretrain_steps": 2000, "train_steps": 2000,
                       "train_lr": 3e-4, "queries_per_clip": 16, "zero_shot": False},
}

REQUIRED = {"sweep": ("dit",), "train": ("dit",), "track": ("ckpt", "clip")}


# --- argument parsing -------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with settings (flags take precedence)")
    p.add_argument("--seed", type=int, help="seed for every RNG stream (default 0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--device", help="torch device (default cpu)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ditracker", description="Toy video-DiT point tracker experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    S = argparse.SUPPRESS

    p = sub.add_parser("gen-data", help="write a synthetic clip corpus", argument_default=S)
    _common(p)
    p.add_argument("--num-clips", type=int, help="clips to render; clip i uses seed + i")
    for name in ("frames", "height", "width", "num-tracks", "min-objects", "max-objects", "max-occluders"):
        p.add_argument(f"--{name}", type=int)

    p = sub.add_parser("pretrain-dit", help="flow-matching pretraining of the toy DiT", argument_default=S)
    _common(p)
    p.add_argument("--data", help="directory of clip directories (default: generate --num-clips clips)")
    p.add_argument("--num-clips", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--holdout", type=int, help="clips held out for the velocity-MSE check")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--d-head", type=int)

    p = sub.add_parser("sweep", help="zero-shot accuracy over every (layer, head)", argument_default=S)
    _common(p)
    p.add_argument("--dit", help="pretrained DiT checkpoint directory")
    p.add_argument("--data", help="directory of evaluation clips (default: generate --num-clips clips)")
    p.add_argument("--num-clips", type=int)
    p.add_argument("--clip-seed", type=int, help="first seed of generated evaluation clips")

    p = sub.add_parser("train", help="train the tracker with ablation switches", argument_default=S)
    _common(p)
    p.add_argument("--dit", help="pretrained DiT checkpoint directory (selected layer/head are used)")
    p.add_argument("--data", help="directory of training clips (default: generate --num-clips clips)")
    p.add_argument("--num-clips", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--queries-per-clip", type=int)
    p.add_argument("--fusion", choices=matching.FUSION_MODES)
    p.add_argument("--lora", action=argparse.BooleanOptionalAction, help="LoRA-adapt the DiT (default on)")
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--iters", type=int, help="refinement iterations T")

    p = sub.add_parser("track", help="track points through one clip directory", argument_default=S)
    _common(p)
    p.add_argument("--ckpt", help="tracker checkpoint directory")
    p.add_argument("--clip", help="clip directory (frames/ and optionally tracks.jsonl)")
    p.add_argument("--queries", help="JSON list of [t, x, y]; default: first visible point of each GT track")
    p.add_argument("--iters", type=int)

    p = sub.add_parser("eval", help="metrics report for predictions or a checkpoint", argument_default=S)
    _common(p)
    p.add_argument("--pred", help="tracks_pred.jsonl to score (with --gt)")
    p.add_argument("--gt", help="ground-truth tracks.jsonl")
    p.add_argument("--ckpt", help="tracker checkpoint to run on --data")
    p.add_argument("--data", help="clip directory or directory of clip directories")
    p.add_argument("--corrupt", action="append", metavar="KIND:SEVERITY",
                   help=f"corruption to evaluate, repeatable; kinds {', '.join(datagen.CORRUPTIONS)}")
    p.add_argument("--stratify", action=argparse.BooleanOptionalAction, help="motion and reappearance bins")
    p.add_argument("--iters", type=int)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--overlays", action=argparse.BooleanOptionalAction, help="trajectory overlay PNG per clip")

    p = sub.add_parser("repro-ablation", help="train and compare the ablation arms", argument_default=S)
    _common(p)
    p.add_argument("--train-clips", type=int)
    p.add_argument("--eval-clips", type=int)
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--train-steps", type=int)
    p.add_argument("--train-lr", type=float)
    p.add_argument("--queries-per-clip", type=int)
    p.add_argument("--zero-shot", action=argparse.BooleanOptionalAction,
                   help="also compare pretrained and random zero-shot tracking")
    return parser


def resolve(command: str, flags: dict) -> dict:
    defaults = {**COMMON, **DEFAULTS[command]}
    file_cfg = {}
    if flags.get("config"):
        path = Path(flags["config"])
        try:
            file_cfg = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown settings for {command}: {', '.join(unknown)}")
    cfg = {**defaults, **file_cfg, **flags}
    for key, default in defaults.items():
        val = cfg[key]
        if default is None or val is None:
            continue
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{key} must be true or false")
        if isinstance(default, int) and not isinstance(default, bool) and (
                isinstance(val, bool) or not isinstance(val, int)):
            raise ConfigError(f"{key} must be an integer")
        if isinstance(default, float) and not isinstance(val, (int, float)):
            raise ConfigError(f"{key} must be a number")
    if cfg["out"] is None:
        raise ConfigError("--out is required")
    for key in REQUIRED.get(command, ()):
        if cfg[key] is None:
            raise ConfigError(f"--{key} is required for {command}")
    dev = str(cfg["device"])
    try:
        device = torch.device(dev)
    except RuntimeError as e:
        raise ConfigError(f"bad device {dev!r}: {e}") from None
    if device.type != "cpu":
        raise ConfigError(f"device {dev!r} is not supported; this build runs on cpu")
    return cfg


def _positive(cfg, *keys):
    for k in keys:
        if cfg[k] is not None and cfg[k] < 1:
            raise ConfigError(f"{k} must be >= 1")


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _clip_dirs(path) -> list[Path]:
    p = _existing(path, "data directory")
    if (p / "meta.json").exists():
        return [p]
    dirs = sorted(d for d in p.iterdir() if (d / "meta.json").exists())
    if not dirs:
        raise ConfigError(f"no clip directories under {p}")
    return dirs


def _clips(cfg, seed0: int):
    if cfg.get("data"):
        return [datagen.load_clip(d) for d in _clip_dirs(cfg["data"])]
    return experiments.clips(seed0, cfg["num_clips"])


def _write_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _savefig(fig, path):
    fig.savefig(path, dpi=100, bbox_inches="tight", metadata={"Software": None})


# --- commands -----------------------------------------------------------------


def cmd_gen_data(cfg, out):
    _positive(cfg, "num_clips")
    keys = ("frames", "height", "width", "num_tracks", "min_objects", "max_objects", "max_occluders")
    gen = datagen.GeneratorConfig(**{k: cfg[k] for k in keys})
    try:
        gen.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for i in range(cfg["num_clips"]):
        datagen.save_clip(datagen.generate_clip(gen, cfg["seed"] + i), out / f"clip_{i:05d}")
    print(f"wrote {cfg['num_clips']} clips to {out}")


def cmd_pretrain_dit(cfg, out):
    _positive(cfg, "num_clips", "steps", "batch_size", "layers", "heads", "d_head")
    dcfg = dit.DiTConfig(layers=cfg["layers"], heads=cfg["heads"], d_head=cfg["d_head"],
                         extract_layer=min(4, cfg["layers"]))
    try:
        dcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    corpus = _clips(cfg, cfg["seed"])
    if len(corpus) <= cfg["holdout"]:
        raise ConfigError(f"need more than {cfg['holdout']} clips (holdout)")
    model = dit.VideoDiT(dcfg)
    videos = experiments.fit_encoder(model, corpus)
    latents = dit.encode_corpus(model, videos)
    h = cfg["holdout"]
    res = dit.pretrain_flow_matching(model, latents[h:], steps=cfg["steps"], batch_size=cfg["batch_size"],
                                     lr=cfg["lr"], seed=cfg["seed"], holdout=latents[:h],
                                     log_every=max(1, min(50, cfg["steps"])),
                                     progress=lambda s, l: print(f"step {s} loss {l:.4f}", file=sys.stderr))
    extra = {"loss_curve": res.loss_curve, "holdout_before": res.holdout_before, "holdout_after": res.holdout_after}
    dit.save_dit(model, out / "dit", seed=cfg["seed"], steps=cfg["steps"],
                 corpus=dit.corpus_hash(videos.numpy()), extra=extra)
    (out / "pretrain.json").write_text(json.dumps(extra, indent=1, sort_keys=True))
    print(f"held-out velocity MSE {res.holdout_before:.4f} -> {res.holdout_after:.4f}; checkpoint {out / 'dit'}")


def cmd_sweep(cfg, out):
    _positive(cfg, "num_clips")
    model = dit.load_dit(_existing(cfg["dit"], "DiT checkpoint"))
    grid, (layer, head) = matching.sweep_layers_heads(model, _clips(cfg, cfg["clip_seed"]))
    matching.write_sweep(grid, out)
    model.cfg.extract_layer, model.cfg.extract_head = layer, head
    src = json.loads((Path(cfg["dit"]) / "manifest.json").read_text())
    keep = {k: v for k, v in src.items() if k not in ("version", "config", "seed", "steps", "corpus_hash")}
    keep.update(sweep_grid=grid.tolist(), selected=[layer, head])
    dit.save_dit(model, out / "dit", seed=src.get("seed", 0), steps=src.get("steps", 0),
                 corpus=src.get("corpus_hash", ""), extra=keep)
    (out / "selection.json").write_text(json.dumps({"layer": layer, "head": head, "delta_avg": grid.max()}) + "\n")
    print(f"best layer {layer} head {head}: delta_avg {grid.max():.2f}; selected checkpoint {out / 'dit'}")


def cmd_train(cfg, out):
    _positive(cfg, "num_clips", "steps", "batch_size", "queries_per_clip", "lora_rank", "iters")
    base = dit.load_dit(_existing(cfg["dit"], "DiT checkpoint"))
    tcfg = refiner.TrackerConfig(fusion=cfg["fusion"], use_lora=cfg["lora"], lora_rank=cfg["lora_rank"],
                                 iters=cfg["iters"])
    try:
        tcfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    corpus = _clips(cfg, cfg["seed"])
    tracker = refiner.build_tracker(base, tcfg, seed=cfg["seed"])
    sched = training.TrainSchedule(steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                                   queries_per_clip=cfg["queries_per_clip"], log_every=max(1, min(50, cfg["steps"])))
    res = training.train(tracker, corpus, sched, seed=cfg["seed"],
                         progress=lambda s, l: print(f"step {s} loss {l:.3f}", file=sys.stderr))
    log = {"loss_curve": res.loss_curve, "probe_before": res.probe_before, "probe_after": res.probe_after}
    refiner.save_tracker(tracker, out / "tracker", seed=cfg["seed"], steps=cfg["steps"], extra=log)
    (out / "train.json").write_text(json.dumps(log, indent=1, sort_keys=True))
    print(f"probe loss {res.probe_before:.3f} -> {res.probe_after:.3f}; checkpoint {out / 'tracker'}")


def overlay_png(video, xy, vis, path, gt_xy=None) -> Path:
    """Frames in a row with predicted trajectories (filled = visible, hollow = occluded)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    f = len(video)
    fig, axes = plt.subplots(1, f, figsize=(2.0 * f, 2.0 * video.shape[1] / video.shape[2] + 0.3))
    axes = np.atleast_1d(axes)
    colors = plt.cm.tab20(np.arange(len(xy)) % 20)
    for j, ax in enumerate(axes):
        ax.imshow(video[j], interpolation="nearest")
        ax.set_axis_off()
        ax.set_title(f"t={j}", fontsize=7)
        for n in range(len(xy)):
            ax.plot(xy[n, : j + 1, 0], xy[n, : j + 1, 1], "-", color=colors[n], lw=0.6)
            on = vis[n, j] > 0.5
            ax.scatter([xy[n, j, 0]], [xy[n, j, 1]], s=9, edgecolors=[colors[n]],
                       facecolors=[colors[n]] if on else "none", linewidths=0.7)
            if gt_xy is not None:
                ax.scatter([gt_xy[n, j, 0]], [gt_xy[n, j, 1]], s=5, marker="x", c="white", linewidths=0.5)
    fig.subplots_adjust(wspace=0.05)
    _savefig(fig, path)
    plt.close(fig)
    return path


def _queries_for(cfg, clip) -> np.ndarray:
    if cfg.get("queries"):
        q = np.asarray(json.loads(_existing(cfg["queries"], "queries file").read_text()), dtype=np.float32)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ConfigError("queries file must hold a list of [t, x, y] triples")
        return q
    if not clip.tracks:
        raise ConfigError("clip has no tracks.jsonl; pass --queries")
    return training.first_visible_queries(*clip.track_arrays())


def cmd_track(cfg, out):
    clip_dir = _existing(cfg["clip"], "clip directory")
    tracker = refiner.load_tracker(_existing(cfg["ckpt"], "tracker checkpoint"))
    if (clip_dir / "tracks.jsonl").exists():
        clip = datagen.load_clip(clip_dir)
    else:
        meta = json.loads((clip_dir / "meta.json").read_text())
        from PIL import Image

        frames = [np.asarray(Image.open(clip_dir / "frames" / f"{i:05d}.png").convert("RGB"))
                  for i in range(meta["F"])]
        clip = datagen.SyntheticClip(np.stack(frames).astype(np.float32) / 255.0, [], int(meta.get("seed", 0)))
    queries = _queries_for(cfg, clip)
    result = refiner.track(clip.video, tracker, queries, cfg["iters"])
    refiner.write_predictions(out / "tracks_pred.jsonl", queries, result)
    overlay_png(clip.video, result["xy"], result["vis"], out / "overlay.png")
    print(f"tracked {len(queries)} points; wrote {out / 'tracks_pred.jsonl'}")


def _parse_corruptions(specs) -> list[tuple[str, int]]:
    out = []
    for spec in specs or []:
        kind, _, sev = str(spec).partition(":")
        if kind not in datagen.CORRUPTIONS or not sev.isdigit() or not 1 <= int(sev) <= 5:
            raise ConfigError(f"bad corruption {spec!r}; expected KIND:SEVERITY with KIND in "
                              f"{', '.join(datagen.CORRUPTIONS)} and SEVERITY 1..5")
        out.append((kind, int(sev)))
    return out


def corruption_plot(curves: dict, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    kinds = sorted({k.split(":")[0] for k in curves})
    for kind in kinds:
        sev = sorted(int(k.split(":")[1]) for k in curves if k.startswith(kind + ":"))
        ax.plot(sev, [curves[f"{kind}:{s}"] for s in sev], "o-", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("delta_avg")
    ax.legend(fontsize=7)
    _savefig(fig, path)
    plt.close(fig)
    return path


def cmd_eval(cfg, out):
    corruptions = _parse_corruptions(cfg["corrupt"])
    if cfg["pred"] or cfg["gt"]:
        if not (cfg["pred"] and cfg["gt"]):
            raise ConfigError("--pred and --gt go together")
        if cfg["ckpt"]:
            raise ConfigError("use either --pred/--gt or --ckpt/--data")
        if corruptions:
            raise ConfigError("--corrupt needs --ckpt/--data (predictions are re-run per corruption)")
        rep = evalkit.metrics_from_files(_existing(cfg["pred"], "prediction file"),
                                         _existing(cfg["gt"], "ground-truth file"), cfg["eval_size"])
    else:
        if not (cfg["ckpt"] and cfg["data"]):
            raise ConfigError("eval needs --pred/--gt or --ckpt/--data")
        tracker = refiner.load_tracker(_existing(cfg["ckpt"], "tracker checkpoint"))
        dirs = _clip_dirs(cfg["data"])
        clips = [datagen.load_clip(d) for d in dirs]
        opts = evalkit.EvalOptions(stratify=cfg["stratify"], corruptions=corruptions, iters=cfg["iters"],
                                   eval_size=cfg["eval_size"], corruption_seed=cfg["seed"])
        rep = evalkit.evaluate(tracker, clips, opts)
        if rep.corruption_curves:
            corruption_plot(rep.corruption_curves, out / "corruptions.png")
        if cfg["overlays"]:
            for d, clip in zip(dirs, clips):
                q = training.first_visible_queries(*clip.track_arrays())
                res = refiner.track(clip.video, tracker, q, cfg["iters"])
                overlay_png(clip.video, res["xy"], res["vis"], out / f"overlay_{d.name}.png",
                            gt_xy=clip.track_arrays()[0])
    evalkit.write_report(rep, out)
    print(f"AJ {rep.aj:.2f}  delta_avg {rep.delta_avg:.2f}  OA {rep.oa:.2f}  ({rep.count} tracks)")


def cmd_repro_ablation(cfg, out):
    _positive(cfg, "train_clips", "eval_clips", "pretrain_steps", "train_steps", "queries_per_clip")
    proto = experiments.DeskProtocol(seed=cfg["seed"], train_clips=cfg["train_clips"], eval_clips=cfg["eval_clips"],
                                     pretrain_steps=cfg["pretrain_steps"], train_steps=cfg["train_steps"],
                                     train_lr=cfg["train_lr"], queries_per_clip=cfg["queries_per_clip"])
    log = lambda m: print(m, file=sys.stderr)  # noqa: E731
    res = experiments.ablation(proto, log=log)
    t7 = experiments.table_markdown("LoRA and fusion", res["table7"], experiments.TABLE7_ARMS)
    t8 = experiments.table_markdown("fusion strategy", res["table8"], experiments.TABLE8_ARMS)
    (out / "table7.md").write_text(t7)
    (out / "table8.md").write_text(t8)
    summary = dict(res)
    if cfg["zero_shot"]:
        summary["zero_shot"] = experiments.zero_shot_comparison(proto, log=log)
    (out / "ablation.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(t7 + "\n" + t8)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-dit": cmd_pretrain_dit,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "repro-ablation": cmd_repro_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed usage
        return int(e.code or 0)
    if not ns.command:
        parser.print_usage(sys.stderr)
        print("ditracker: error: a command is required", file=sys.stderr)
        return 2
    flags = {k: v for k, v in vars(ns).items() if k != "command"}
    try:
        cfg = resolve(ns.command, flags)
        out = Path(cfg["out"])
        _seed_all(cfg["seed"])
        _write_config(out, {"command": ns.command, **cfg})
        COMMANDS[ns.command](cfg, out)
    except ConfigError as e:
        print(f"ditracker {ns.command}: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"ditracker {ns.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
