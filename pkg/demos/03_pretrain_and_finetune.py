"""
Pre-training and fine-tuning
============================

Pre-train the small convolutional encoder with the pixel-pair loss, then
fine-tune it on a few labelled frames next to a randomly initialised copy.

The settings here are sized to finish in a couple of minutes; at this scale
the gap between the two initialisations is noisy.
"""

import sys
import tempfile
from pathlib import Path

from regconsist.geometry import select_view_pairs
from regconsist.regions import segment_graph
from regconsist.sampling import SamplingConfig
from regconsist.ssl import PairSource, TrainConfig, pretrain
from regconsist.supervise import FinetuneConfig, evaluate_miou, finetune, labeled_set, split_labeled
from regconsist.synthworld import build_world

workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
manifest = build_world(workdir / "world", seed=7, n_objects=8, yaw_step=45)
cam = manifest.cameras["cam0"]
frames = {i: manifest.load_frame(i) for i in manifest.ids}
pairs = select_view_pairs(manifest, cam=cam, downsample=4)
regions = {i: segment_graph(f.rgb, scale=500, min_size=256) for i, f in frames.items()}

cfg = TrainConfig(total_iters=300, view_pairs_per_step=8, seed=0)
result = pretrain(PairSource(frames, pairs, cam, regions), SamplingConfig.from_strategy("balanced-region"), cfg)
print(f"pair loss {result.losses[0]:.2f} -> {result.losses[-1]:.2f} over {len(result.losses)} steps")

# 10% of the labelled frames for training, the rest for testing.
train_ids, test_ids = split_labeled(manifest, 0.1, seed=0)
train = labeled_set([frames[i] for i in train_ids])
test = [frames[i] for i in test_ids]
ft = FinetuneConfig(iters=300)
for name, encoder in (("random", None), ("pretrained", result.encoder)):
    model = finetune(encoder, train, manifest.num_classes, ft, encoder_config=cfg.encoder_config).model
    report = evaluate_miou(model, test, manifest.num_classes)
    print(f"{name:10} mIoU {report.miou:.3f} (all classes {report.miou_all:.3f})")
