"""Fuzzy C-means lesion segmentation on synthetic images."""

import numpy as np

from dermseg.dataio import random_spec, synth_lesion
from dermseg.fuzzyclust import ClusterConfig, cluster_pipeline
from dermseg.posteval import dice, jaccard

img, mask = synth_lesion(random_spec(2, hair_count=8))
out = cluster_pipeline(img, ClusterConfig())

# five clusters in RGB; k-means splits their centroids into two groups
np.set_printoptions(precision=3, suppress=True)
print("centroids:\n", out.fcm.centroids)
print("FCM iterations", out.fcm.iterations, "objective", ["%.3f" % v for v in out.fcm.objective_trace[:5]], "...")
print("lesion clusters", sorted(out.lesion_clusters))
print("J = %.3f, D = %.3f" % (jaccard(out.mask, mask), dice(out.mask, mask)))

js = []
for seed in range(10):
    img, mask = synth_lesion(random_spec(seed))
    js.append(jaccard(cluster_pipeline(img).mask, mask))
print("10 clean lesions: mean J %.3f, min %.3f" % (np.mean(js), np.min(js)))
