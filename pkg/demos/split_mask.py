# Split a binary shadow mask into its body and detail parts with the
# distance transform: the body peaks deep inside the region, the detail
# hugs the boundary, and the two always sum back to the original mask.

import os

import numpy as np

from unshade.imaging import ImagePlane, RegionMask, save_image, save_mask
from unshade.maskdissoc import dissociate, distance_transform, weighted_detail_mask

out_dir = "demo_out/mask_split"
os.makedirs(out_dir, exist_ok=True)

# disc plus a bar: one blobby region and one elongated one
yy, xx = np.mgrid[0:96, 0:96]
disc = (yy - 32) ** 2 + (xx - 30) ** 2 <= 18 ** 2
bar = (np.abs(yy - 70) <= 6) & (np.abs(xx - 52) <= 30)
mask = RegionMask(disc | bar)
save_mask(mask, os.path.join(out_dir, "mask.png"))

def peak_of(values):
    y, x = np.unravel_index(np.argmax(values), values.shape)
    return int(y), int(x)


dt = distance_transform(mask).d
print(f"distance transform: max {dt.max():.2f} px at {peak_of(dt)}")

pair = dissociate(mask)
assert np.array_equal(pair.body + pair.detail,
                      mask.values.astype(pair.body.dtype))
print("body + detail == mask holds bitwise")

for name, values in (("body", pair.body), ("detail", pair.detail)):
    save_image(ImagePlane(values.astype(np.float32)[None]),
               os.path.join(out_dir, f"{name}.png"), bit_depth=16)
    print(f"{name}: peak value {values.max():.3f} at {peak_of(values)}")

# the training loss uses the detail part as boundary weights
weights = weighted_detail_mask(pair)
active = weights[weights > 0]
print(f"boundary weights: {active.size} active pixels, "
      f"mean weight {active.mean():.3f}")
print(f"outputs in {out_dir}")
