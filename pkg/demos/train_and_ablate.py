"""
A short training run and a miniature ablation
=============================================

Synthetic aerial-style scenes mix tiny cars, long strips and very large
buildings. We cut them into overlapping 64x64 tiles, train the plain FCN8s
and the variant with a scale-aware block after every stage, then compare
them on held-out scenes. A few epochs only, so numbers are noisy; the
acceptance suite runs the full 3-seed, 30-epoch version.
"""

import sys
import tempfile
from pathlib import Path

from scaleaware import data as D
from scaleaware import network as N
from scaleaware import train as T
from scaleaware.tensor import Rng

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3

splits = D.generate_splits(D.benchmark_spec((128, 128)), {"train": 6, "val": 2}, seed=0)
tspec = D.TileSpec((64, 64), 0.5)
print(f"{len(T.make_tiles(splits['train'], tspec))} training tiles")

res = T.run_ablation(splits["train"], splits["val"],
                     N.NetworkConfig(stage_channels=(8, 16, 32, 32, 64)),
                     T.TrainConfig(epochs=epochs, batch_size=4),
                     variants=("baseline", "attn_multi_control", "sam_multi"), seeds=(0,), tspec=tspec)
print(res.format())

###############################################################################
# Per-class score maps of a trained network, written as PGM images.

net = N.build(N.NetworkConfig(variant="sam_multi", stage_channels=(8, 16, 32, 32, 64)), Rng(0))
T.train(net, T.make_tiles(splits["train"], tspec), T.TrainConfig(epochs=epochs, batch_size=4))
img = T.prepare_input(splits["val"][0][0][None, :, :64, :64])
out = Path(tempfile.mkdtemp())
maps = N.export_score_maps(net, img, out)
print(f"wrote {len(maps)} score maps to {out}")
