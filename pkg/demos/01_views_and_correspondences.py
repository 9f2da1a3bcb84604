"""
Views, correspondences and overlap
==================================

Render a small synthetic room, relate two of its views pixel by pixel, and
pick the view pairs whose overlap falls inside the training band.

Run with ``python demos/01_views_and_correspondences.py [workdir]``.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from regconsist.geometry import compute_correspondences, project_pixel, select_view_pairs, view_overlap_iou
from regconsist.synthworld import build_world

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())

# A 4 x 3 m room with four boxes, seen from a grid of positions at eight
# headings each. Every frame comes with RGB, metric depth, labels and a pose.
manifest = build_world(workdir / "world", seed=3, n_objects=4, room_extent=(4.0, 3.0, 2.5), yaw_step=45)
cam = manifest.cameras["cam0"]
print(f"{len(manifest.ids)} views of {cam.height}x{cam.width} pixels, {manifest.num_classes} classes")

# Two views from the same spot, 45 degrees apart.
f1, f2 = manifest.load_frame(manifest.ids[0]), manifest.load_frame(manifest.ids[1])

# The centre pixel of view 1 lands somewhere in view 2 (or behind it).
row, col = cam.height // 2, cam.width // 2
print("centre pixel of view 1 seen in view 2 at", project_pixel(cam, f1.pose, f2.pose, (row, col), float(f1.depth[row, col])))

# S_t: every pixel of view 1 whose projection passes the depth test in view 2.
corr = compute_correspondences(f1, f2, cam)
print(f"{len(corr)} exact correspondences out of {f1.depth.size} pixels")

# View IoU counts such pixels in both directions.
print(f"view IoU {view_overlap_iou(f1, f2, cam):.3f}")

# Pair selection keeps pairs whose IoU lies in [0.3, 0.9]: enough shared
# content to learn from, but not near duplicates.
pairs = select_view_pairs(manifest, cam=cam, downsample=2)
ious = np.array([p.iou for p in pairs])
print(f"{len(pairs)} view pairs selected, IoU from {ious.min():.2f} to {ious.max():.2f}")
