"""Color preprocessing walkthrough: HSI, equalization and the 5-channel input."""

import numpy as np

from dermseg.colorspace import assemble_input, equalize_plane, gaussian_plane, rescale_max_dim, rgb_to_hsi
from dermseg.dataio import random_spec, synth_lesion
from dermseg.unet import geometry_solve

img, mask = synth_lesion(random_spec(0, width=300, height=220))
print("synthetic image", img.shape, "lesion pixels", int(mask.sum()))

# intensity lives in the third HSI plane
hsi = rgb_to_hsi(img)
i_plane = hsi[..., 2]
print("intensity range before equalization: %.3f .. %.3f" % (i_plane.min(), i_plane.max()))
eq = equalize_plane(i_plane)
print("intensity range after equalization:  %.3f .. %.3f" % (eq.min(), eq.max()))

# the larger side goes to 250 px, the other rounds half up
scaled = rescale_max_dim(img, 250)
print("rescaled to", scaled.shape[:2])

# a depth-2 network needs a 292 px input to produce >= 250 px of output
geom = geometry_solve(250, 2)
print("input %d -> output %d, pad %d/%d" % (geom.input_size, geom.output_size, geom.pad_before, geom.pad_after))

net = assemble_input(scaled, "1B", geom)
for k, name in enumerate(["R (equalized)", "G (equalized)", "B (equalized)", "I (min-max)", "Gaussian prior"]):
    c = net.channels[k]
    print("  channel %d %-15s mean %.3f" % (k + 1, name, c.mean()))

g = gaussian_plane(251, 251)
print("Gaussian at centre %.4f, at fwhm/2 %.4f" % (g[125, 125], gaussian_plane(126, 1)[0, 0]))
