"""
Two-stage training on synthetic people
======================================

Stage 1 trains an STN next to a deliberately weak ReID extractor. Stage 2
then either fine-tunes a strong extractor behind the frozen STN (pipeline
mode) or bolts the frozen STN onto an extractor trained on its own (merge
mode). Every model is scored on partial probes of people it never saw.

Runs the desk schedule from configs/desk.cfg, cut to ``EPOCHS`` epochs so the
whole script takes a few minutes on one core. Pass a number to change it.
"""
import sys
import tempfile
import time
from pathlib import Path

from stnreid import (evaluate_protocol, load_config, make_partial_benchmark, merge_checkpoints,
                     pretrain_checkpoint, synth_dataset, table2_config, train_reid_only, train_stage1,
                     train_stage2_pm)

EPOCHS = int(sys.argv[1]) if len(sys.argv) > 1 else 12
root = Path(__file__).resolve().parents[1]
cfg = load_config(root / "configs" / "desk.cfg").replace(total_epochs=EPOCHS, decay_epoch=EPOCHS // 2)
work = Path(tempfile.mkdtemp(prefix="two_stage_"))

train = synth_dataset(10, 6, cfg.image_height, cfg.image_width, seed=0)
test = make_partial_benchmark(synth_dataset(30, 4, cfg.image_height, cfg.image_width, seed=1), 0)
print(f"train: {len(train)} images of {train.num_ids} people; test: {len(test.probes)} partial probes, "
      f"{len(test.gallery)} holistic candidates")


def rank1(model, use_stn=True):
    return evaluate_protocol(model, test, repeats=10, seed=0, use_stn=use_stn).rank1


# stage 1: ID loss only, random init
t0 = time.time()
s1 = train_stage1(train, table2_config("Ep1", cfg), work / "s1")
print(f"stage 1 done in {time.time() - t0:.0f} s, last epoch loss {s1.history[-1]['total']:.3f}")
print(f"  weak ReID: {rank1(s1.model):.3f} with STN, {rank1(s1.model, False):.3f} without")

# the strong settings warm-start from an extractor trained three times longer
pre = pretrain_checkpoint(train, cfg, work / "pretrain.stnt")
strong = table2_config("Ep5", cfg).replace(pt_warmstart=pre)

# stage 2, pipeline mode
pm = train_stage2_pm(train, s1.checkpoint, strong, work / "pm")
print(f"pipeline mode: {rank1(pm.model):.3f} with STN, {rank1(pm.model, False):.3f} without")

# stage 2, merge mode: no further training at all
baseline = train_reid_only(train, strong, work / "baseline")
mm = merge_checkpoints(baseline.checkpoint, s1.checkpoint).to_model()
print(f"merge mode: {rank1(mm):.3f}, bare baseline: {rank1(baseline.model, False):.3f}")

# what the STN does to one gallery image for one probe
theta = s1.model.theta(test.gallery[:1], test.probes[:1])[0]
print("theta for probe 0 vs gallery 0:", theta.round(3), f"(probe crop: {test.probe_specs[0].direction}, "
      f"kept {test.probe_specs[0].keep_fraction:.2f})")
print("checkpoints in", work)
