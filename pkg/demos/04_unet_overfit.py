"""Train a small U-Net on one synthetic lesion until it memorizes it.

Takes a minute or two on one core.
"""

import numpy as np

from dermseg.dataio import random_spec, synth_lesion
from dermseg.posteval import jaccard
from dermseg.unet import TrainConfig, UNetConfig, build_model, predict_prob, train

img, mask = synth_lesion(random_spec(3))
model = build_model(UNetConfig(depth=2, base_features=4, in_channels=3, seed=0))
g = model.geometry
print("geometry: input %d, down %s, bottleneck %d, up %s"
      % (g.input_size, g.down_sizes, g.bottleneck_size, g.up_sizes))
print("parameters:", model.params.count())


def progress(it, loss):
    if it % 50 == 0:
        print("  iter %4d  loss %.4f" % (it, loss))


res = train(model, [(img, mask)], "1A", TrainConfig(iterations=500, augment=False, seed=0), progress=progress)
prob = predict_prob(model, img, "1A")
print("first loss %.4f (ln 2 = %.4f)" % (res.losses[0], np.log(2)))
print("last loss  %.4f" % res.losses[-1])
print("Jaccard on the training image %.3f" % jaccard(prob > 0.5, mask))
