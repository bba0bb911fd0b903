"""How the instance metrics react to typical segmentation mistakes."""

import numpy as np

from nucseg.harness.data import generate_domain
from nucseg.instances import connected_components, split_touching
from nucseg.metrics import score

gt = generate_domain("S2", 1, seed=6).samples[0].labels  # several of its nuclei touch


def show(name, pred):
    r = score(pred, gt)
    print(f"{name:28s} Dice {r.dice:6.2f}  AJI {r.aji:6.2f}  PQ {r.pq:6.2f}  HD {r.hd:5.2f}  "
          f"tp/fp/fn {r.tp}/{r.fp}/{r.fn}")


show("perfect", gt)

# Pixel-perfect foreground, but touching nuclei fused into one object. Dice
# does not notice; the object-level scores do.
fused = gt.copy()
if gt.max() >= 2:
    fused[fused == 2] = 1
    fused[fused > 2] -= 1
show("two nuclei fused", fused)

# A one-pixel shift: small boundary error everywhere.
show("shifted by one pixel", np.roll(gt, 1, axis=1))

# A nucleus missed entirely.
missing = gt.copy()
missing[missing == gt.max()] = 0
show("last nucleus missed", missing)

# Splitting the plain foreground recovers touching objects through the
# distance-transform marker split.
blobs = connected_components(gt > 0)
show("connected components", blobs)
show("components + marker split", split_touching(blobs, min_separation=10))
