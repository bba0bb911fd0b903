"""From centroid clicks to prompt embeddings.

Run with ``python3 demos/01_point_prompts.py [out_dir]``. Writes a density
preview PNG next to a picture of the synthetic image it was derived from.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from nucseg.harness.data import generate_domain
from nucseg.prompt import (
    PositionEncoding,
    SemanticPromptParams,
    encode_position_prompt,
    encode_semantic_prompt,
    gaussian_kernel,
    render_density,
    write_density_preview,
)
from nucseg.tensor import Tensor

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# One image from the fluorescence-like style. Its prompts are the snapped
# centroids of the ground-truth nuclei, one (x, y) pair per nucleus.
sample = generate_domain("S1", 1, seed=0).samples[0]
print(f"{sample.image_id}: {sample.labels.max()} nuclei, prompts {sample.points.points.tolist()}")

# Each click becomes a unit-mass Gaussian over a (2r+1)^2 window.
r = 10
k = gaussian_kernel(r, r / 3)
print(f"kernel {k.shape}, sum {k.sum():.15f}, peak {k.max():.4f}")

density = render_density(sample.points, r=r)
print(f"density mass {density.raster.sum():.6f} for {len(sample.points)} points "
      "(less than the count only when a window is clipped by the border)")

gray = sample.image.mean(axis=0)
gray = (255 * (gray - gray.min()) / (np.ptp(gray) or 1)).astype(np.uint8)
Image.fromarray(gray).save(out / "01_image.png")
write_density_preview(out / "01_density.png", density.raster)

# The density is squeezed by a small conv stack into one vector per encoder
# patch. That grid is added to the image tokens before decoding.
rng = np.random.default_rng(0)
sem = encode_semantic_prompt(density, SemanticPromptParams.init(64, 16, rng))
print(f"semantic prompt: {sem.shape} (one row per 16x16 patch)")

# Separately, every click is embedded on its own with random Fourier features.
pe = PositionEncoding.init(64, rng)
pos = encode_position_prompt(sample.points, pe, Tensor(np.zeros(64)))
print(f"position prompts: {pos.shape}")
print(f"wrote {out / '01_image.png'} and {out / '01_density.png'}")
