"""Train a tracker head on top of the pretrained DiT and evaluate it.

A short schedule by default; the ablation arms in reproduce_all.py use 2000
steps each. Writes demos/out/report/ and demos/out/overlay.png.
"""
import sys
from pathlib import Path

from ditracker import evalkit, experiments, refiner, training
from ditracker.cli import overlay_png

out = Path(__file__).parent / "out"
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100

base, _ = experiments.pretrained_dit(experiments.DeskProtocol(), log=print)  # cached by reproduce_all.py
tracker = refiner.build_tracker(base, refiner.TrackerConfig(use_lora=True, fusion="cost_concat"), seed=0)
clips = experiments.clips(0, 512)
res = training.train(tracker, clips, training.TrainSchedule(steps=steps, log_every=25), seed=0,
                     progress=lambda s, l: print(f"step {s}: loss {l:.2f}"))
print(f"probe loss {res.probe_before:.2f} -> {res.probe_after:.2f}")

held = experiments.clips(experiments.DeskProtocol.EVAL_SEED0, 8)
report = evalkit.evaluate(tracker, held, evalkit.EvalOptions(corruptions=[("motion_blur", s) for s in (1, 3, 5)]))
evalkit.write_report(report, out / "report")
print(f"AJ {report.aj:.1f}  delta_avg {report.delta_avg:.1f}  OA {report.oa:.1f}")
print("motion blur:", {k: round(v, 1) for k, v in report.corruption_curves.items()})

clip = held[0]
pred = refiner.track(clip.video, tracker, training.first_visible_queries(*clip.track_arrays()))
overlay_png(clip.video, pred["xy"], pred["vis"], out / "overlay.png", gt_xy=clip.track_arrays()[0])
print(f"wrote {out / 'report'} and {out / 'overlay.png'}")
