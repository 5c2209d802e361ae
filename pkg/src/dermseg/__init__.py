"""CPU-only skin lesion segmentation: a valid-convolution U-Net with
histogram-equalized inputs, and a Fuzzy C-Means clustering pipeline."""

from .dataio import load_image, load_mask, make_folds, save_mask, scan_catalog, synth_lesion
from .fuzzyclust import cluster_segment, fcm_fit
from .posteval import dice, jaccard
from .unet import UNetConfig, build_model, geometry_solve, predict_prob, train

__version__ = "0.1.0"
