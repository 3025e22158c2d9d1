"""Synthetic chest phantoms and CT windowing."""
import os
import tempfile

import numpy as np

from vseg.phantom import export_slice, generate_phantom, load_volume, save_volume, window_transform

s = generate_phantom(seed=3)
print("volume", s.shape, "spacing", s.spacing)
print(f"lung fraction {s.lung_mask.mean():.3f}, lesion voxels {int(s.lesion_mask.sum())}")

lesion = s.lesion_mask.astype(bool)
wall = (s.image > -400) & ~s.lung_mask.astype(bool)
print(f"mean HU  lesion {s.image[lesion].mean():.0f}  wall {s.image[wall].mean():.0f}")
print(f"lesion HU range [{s.image[lesion].min():.0f}, {s.image[lesion].max():.0f}]"
      f"  wall [{np.percentile(s.image[wall], 1):.0f}, {np.percentile(s.image[wall], 99):.0f}]")

# a lung window squeezes lesions and wall close together; a narrow one around
# the lesion band pushes them apart
for loc, breadth in ((-400, 1200), (-325, 650)):
    v = window_transform(s.image, loc, breadth)
    print(f"window {loc}/{breadth}: lesion {v[lesion].mean():.2f} vs wall {v[wall].mean():.2f}")

out = tempfile.mkdtemp()
save_volume(os.path.join(out, "case.vvol"), s)
print("round trip exact:", load_volume(os.path.join(out, "case.vvol")).same_as(s))
shape = export_slice(s, 0, s.shape[0] // 2, os.path.join(out, "mid.pgm"))
print("midplane preview", shape, "->", os.path.join(out, "mid.pgm"))
