"""From a knee ROI to augmented training pairs.

Cuts the lateral and medial patches out of a synthetic wide ROI, shows
what the generator puts into KL-2 samples, balances a skewed training
split and writes a few augmented pairs as PGM files you can open in any
image viewer.

    python demos/02_data_pipeline.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from siamese_gap import data

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_data")
out.mkdir(parents=True, exist_ok=True)

# A right-knee ROI 96 px tall and 300 px wide: it is scaled to height 128,
# the lateral patch is its left end, the medial patch its (mirrored) right end.
rng = np.random.default_rng(0)
roi = np.clip(np.linspace(0.2, 0.8, 300)[None, :] + rng.normal(0, 0.02, (96, 300)), 0, 1)
lat, med = data.extract_patches(roi, "right")
print(f"ROI {roi.shape} -> lateral {lat.shape} mean {lat.mean():.3f}, medial {med.shape} mean {med.mean():.3f}")
data.write_pgm(out / "roi.pgm", roi)

# Synthetic KL-0 / KL-2 pairs. KL-2 carries a bright marginal blob whose
# centre is stored with the sample.
samples = data.synth_generate(6, seed=1)
for s in (samples[0], samples[-1]):
    print(f"{s.id}: label {s.label_name}, blob {s.blob}")
    data.write_pgm(out / f"{s.id}_lat.pgm", s.lateral[0])

# A skewed population: 30 KL-0 and 12 KL-2.
skewed = data.synth_generate(30, seed=2)[:30] + data.synth_generate(12, seed=3)[12:]
split = data.split_dataset(skewed, seed=0)
print("split sizes (KL0, KL2):", [data.class_counts(p) for p in (split.train, split.validation, split.test)])
balanced = data.oversample(split.train, seed=0)
print("after oversampling:", data.class_counts(balanced))

# Augmentation draws one parameter set per pair and applies it to both patches.
cfg = data.AugmentConfig(apply_prob=1.0)
for i in range(3):
    p = data.draw_params(cfg, np.random.default_rng(i))
    aug = data.augment(samples[-1], cfg, np.random.default_rng(i))
    print(f"draw {i}: rotate {p.angle:+.1f} deg, brightness {p.brightness:+.3f}, "
          f"contrast x{p.contrast:.3f}, gamma {p.gamma:.3f}")
    data.write_pgm(out / f"aug{i}_lat.pgm", aug.lateral[0])

print(f"PGM files written to {out}/")
