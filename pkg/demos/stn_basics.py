"""
Warping, cropping and the identity transform
============================================

How the affine sampler moves pixels around, using one synthetic person.
Writes a handful of PPM files to the directory given on the command line
(a fresh temporary directory otherwise).
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from stnreid import STN, affine_warp, crop_rect, crop_theta, generate_partial, make_rng, synth_dataset
from stnreid.tensorio import write_ppm

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="stn_basics_"))
out.mkdir(parents=True, exist_ok=True)

# one person, full body, 64 x 32
ds = synth_dataset(3, 2, 64, 32, seed=0)
person = ds.images[0]
write_ppm(out / "holistic.ppm", person)

# theta = [a, b, tx, c, d, ty] maps output coordinates (in [-1, 1]) to source coordinates
identity = np.array([[1, 0, 0, 0, 1, 0]], dtype=np.float64)
same = affine_warp(person[None], identity)[0]
print("identity warp, max abs change:", np.abs(same - person).max())

# half scale looks at the central half of the image, blown up to full size
zoom = affine_warp(person[None], np.array([[0.5, 0, 0, 0, 0.5, 0]]))[0]
write_ppm(out / "zoom_centre.ppm", zoom)

# a partial image: drop the top 40%, keep the bottom slab, resize to 64 x 32
rect = crop_rect("top", 0.6, 64, 32)
print("kept rows/cols (r0, r1, c0, c1):", rect)
theta = crop_theta(rect, 64, 32)
print("theta for that crop:", np.round(theta, 4))
write_ppm(out / "partial_bottom60.ppm", affine_warp(person[None], theta[None])[0])

# random partials as used in training: 20-60% removed from one side
rng = make_rng(0)
for i in range(4):
    partial, spec = generate_partial(person, rng)
    print(f"partial {i}: {spec.direction}, kept {spec.keep_fraction:.2f}")
    write_ppm(out / f"partial_{i}.ppm", partial)

# a fresh STN starts at the identity, so its output is the holistic image itself
stn = STN(3, 64, 32, rng=make_rng(1))
affined, theta, _ = stn.forward(person[None], partial[None], train=False)
print("fresh STN theta:", theta[0], " max abs error:", np.abs(affined[0] - person).max())

print("images written to", out)
