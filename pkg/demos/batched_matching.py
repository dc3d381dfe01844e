"""
One probe against many: batching the pairwise STN
=================================================

Each probe-gallery pair needs its own STN pass, so identification cost grows
with the gallery. Scoring N pairs per forward pass amortises the per-call
overhead; this prints the per-probe time for a 64-image gallery.
"""
import numpy as np

from stnreid import STNReID, TrainConfig, bench_matching, score_stn, synth_dataset

cfg = TrainConfig()
model = STNReID.build(cfg, num_ids=10)
ds = synth_dataset(32, 2, cfg.image_height, cfg.image_width, seed=3)
probe, gallery = ds.images[0], ds.images

rows = bench_matching(model, probe, gallery, batch_sizes=(1, 2, 4, 8, 16, 32), repeats=3)
print(" N   s/probe   us/pair")
for r in rows:
    print(f"{r.batch_size:2d}   {r.median_s:.4f}   {r.per_pair_us:8.1f}")
print(f"speed-up from N=1 to N=32: {rows[0].median_s / rows[-1].median_s:.1f}x")

# batching changes the speed, not the answer
a = score_stn(model, ds.images[:3], ds.pids[:3], gallery, ds.pids, chunk=1).values
b = score_stn(model, ds.images[:3], ds.pids[:3], gallery, ds.pids, chunk=32).values
print("largest distance change between chunk sizes:", np.abs(a - b).max())
