"""Hair detection by black top-hat, median inpainting and dark-border masking."""

import numpy as np

from dermseg.dataio import random_spec, render_synth
from dermseg.morphology import dark_border_mask, remove_hair
from dermseg.posteval import jaccard

s = render_synth(random_spec(4, hair_count=10))
clean, hair = remove_hair(s.image)

print("drawn hair pixels   ", int(s.hair_mask.sum()))
print("detected hair pixels", int(hair.sum()))
print("hair mask Jaccard    %.3f" % jaccard(hair, s.hair_mask))

# compare against the same image rendered without strokes (identical noise)
mse_raw = np.mean((s.image - s.hairless) ** 2)
mse_clean = np.mean((clean - s.hairless) ** 2)
print("MSE to hairless: raw %.5f, cleaned %.5f" % (mse_raw, mse_clean))

v = render_synth(random_spec(4, vignette=True, center=None))
border = dark_border_mask(v.image)
print("vignette: %.1f%% of pixels flagged as border, lesion overlap %d"
      % (100 * border.mean(), int((border & v.mask).sum())))
