"""Run every desk-scale experiment and copy the summaries into results/.

Stages are cached under $DITRACKER_CACHE (default ~/.cache/ditracker), so an
interrupted run resumes where it stopped. A cold run takes about two hours
on one CPU core.
"""
import json
import time
from pathlib import Path

from ditracker import experiments

out = Path(__file__).resolve().parent.parent / "results"
out.mkdir(exist_ok=True)
proto = experiments.DeskProtocol()
t0 = time.time()


def log(msg):
    print(f"[{time.time() - t0:7.0f}s] {msg}", flush=True)


def dump(name, obj):
    (out / name).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


zs = experiments.zero_shot_comparison(proto, log=log)
log(f"zero-shot: pretrained {zs['pretrained']['delta_avg']:.1f} vs random {zs['random_same_cell']['delta_avg']:.1f}")
dump("zero_shot.json", zs)

_, manifest = experiments.pretrained_dit(proto)
keep = ("holdout_before", "holdout_after", "loss_curve", "sweep_grid", "selected", "seconds", "steps", "config")
dump("pretrain.json", {k: manifest[k] for k in keep})

ab = experiments.ablation(proto, log=log)
dump("ablation.json", ab)
(out / "tables.md").write_text(
    experiments.table_markdown("LoRA and fusion", ab["table7"], experiments.TABLE7_ARMS) + "\n"
    + experiments.table_markdown("fusion strategy", ab["table8"], experiments.TABLE8_ARMS)
    + "\nStay-at-query baseline: delta_avg moving {moving_delta_avg:.1f}, static {static_delta_avg:.1f}.\n"
    .format(**ab["stay_baseline"]))

bl = experiments.blur_curve(proto, log=log)
log(f"blur curve {[round(v, 1) for v in bl['curve']]}")
dump("motion_blur.json", bl)
