"""
Regions, region matches and pixel-pair sampling
================================================

Segment two overlapping views, match their regions across the views, and draw
pixel pairs with each of the four sampling strategies.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from regconsist.geometry import select_view_pairs
from regconsist.matching import cantor_pair, cantor_unpair
from regconsist.regions import segment_graph
from regconsist.sampling import STRATEGIES, SamplingConfig, prepare_view_pair, sample_pair_batch
from regconsist.synthworld import build_world

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
manifest = build_world(workdir / "world", seed=3, n_objects=4, room_extent=(4.0, 3.0, 2.5), yaw_step=45)
cam = manifest.cameras["cam0"]
best = max(select_view_pairs(manifest, cam=cam, downsample=2), key=lambda p: p.iou)
f1, f2 = manifest.load_frame(best.id1), manifest.load_frame(best.id2)

# Graph-based segmentation: smaller scale gives more, smaller regions.
for scale in (50, 250, 1000):
    print(f"scale {scale:5}: {segment_graph(f1.rgb, scale=scale).count} regions")
r1, r2 = segment_graph(f1.rgb), segment_graph(f2.rgb)

# Region IoUs are histogrammed over Cantor codes of (warped label, label) pairs.
print("pair(3, 5) =", cantor_pair(3, 5), "->", cantor_unpair(cantor_pair(3, 5)))

data = prepare_view_pair(f1, f2, cam, r1, r2)
print(f"{len(data.matches)} region matches between {r1.count} and {r2.count} regions")
print("best matches (u, v, IoU):", [(int(u), int(v), round(float(i), 2)) for u, v, i in zip(data.matches.u, data.matches.v, data.matches.iou)][:5])

# Balanced samplers spread draws evenly over regions; random ones follow area.
for strategy in STRATEGIES:
    batch = sample_pair_batch(data, SamplingConfig.from_strategy(strategy, pairs_per_batch=512, seed=0))
    counts = np.bincount(r1.labels[batch.p[:, 0], batch.p[:, 1]])
    counts = counts[counts > 0]
    print(f"{strategy:16} {len(batch.p)} pairs from {len(counts)} regions, per-region counts {counts.min()}..{counts.max()}")
