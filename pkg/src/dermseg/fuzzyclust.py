"""Fuzzy C-Means lesion segmentation.

Pixels are clustered on their RGB color with FCM, the cluster centers are
then split into two groups with k-means, and the darker group is taken
as the lesion.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import colorspace, morphology

LUMA = np.array([0.299, 0.587, 0.114])


class ClusteringError(ValueError):
    pass


@dataclass
class FcmResult:
    memberships: np.ndarray  # (c, n), columns sum to 1
    centroids: np.ndarray  # (c, d)
    objective_trace: list
    iterations: int

    def labels(self):
        return np.argmax(self.memberships, axis=0)


def sq_distances(x, v):
    """(c, n) squared Euclidean distances between centroids and rows of x."""
    diff = x[None, :, :] - v[:, None, :]
    return np.einsum("cnd,cnd->cn", diff, diff)


def fcm_memberships(d2, m):
    """Membership update; points sitting on a centroid get a crisp 1 there."""
    c, n = d2.shape
    dmin = d2.min(axis=0)
    u = np.empty_like(d2)
    crisp = dmin <= 0.0
    soft = ~crisp
    if soft.any():
        ratio = (dmin[soft] / d2[:, soft]) ** (1.0 / (m - 1.0))
        u[:, soft] = ratio / ratio.sum(axis=0)
    if crisp.any():
        first = np.argmax(d2[:, crisp] <= 0.0, axis=0)
        u[:, crisp] = 0.0
        u[first, np.nonzero(crisp)[0]] = 1.0
    return u


def fcm_objective(u, d2, m):
    return float(np.sum(u ** m * d2))


def _init_centroids(x, c, rng, retries=10):
    # draw from lexicographically sorted rows so the draw ignores input order
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    for _ in range(retries + 1):
        v = xs[np.sort(rng.choice(len(xs), size=c, replace=False))]
        if len(np.unique(v, axis=0)) == c:
            return v.copy()
    raise ClusteringError(f"could not draw {c} distinct initial centroids")


def fcm_fit(x, c=5, fuzzifier=2.0, tol=1e-4, max_iter=100, seed=0) -> FcmResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if n < c:
        raise ClusteringError(f"need at least c={c} points, got {n}")
    if fuzzifier <= 1.0:
        raise ValueError("fuzzifier must exceed 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    rng = np.random.default_rng(seed)
    v = _init_centroids(x, c, rng)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        u = fcm_memberships(sq_distances(x, v), fuzzifier)
        um = u ** fuzzifier
        v_new = (um @ x) / um.sum(axis=1, keepdims=True)
        trace.append(fcm_objective(u, sq_distances(x, v_new), fuzzifier))
        shift = np.sqrt(((v_new - v) ** 2).sum(axis=1)).max()
        v = v_new
        if shift < tol:
            break
    u = fcm_memberships(sq_distances(x, v), fuzzifier)
    return FcmResult(u, v, trace, it)


def kmeans_fit(points, k=2, restarts=10, seed=0, max_iter=100):
    """Best-of-``restarts`` Lloyd's k-means; returns one group label per point.

    Labels are renumbered by first appearance, so equal partitions give
    equal label arrays.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    best, best_cost = None, np.inf
    for _ in range(restarts):
        cent = pts[rng.choice(n, size=k, replace=False)].copy()
        labels = None
        for _ in range(max_iter):
            new = np.argmin(sq_distances(pts, cent), axis=0)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                if np.any(labels == j):
                    cent[j] = pts[labels == j].mean(axis=0)
        cost = within_group_ss(pts, labels)
        if cost < best_cost - 1e-12:
            best, best_cost = labels, cost
    return _canonical(best)


def within_group_ss(pts, labels):
    pts = np.asarray(pts, dtype=np.float64).reshape(len(labels), -1)
    total = 0.0
    for g in np.unique(labels):
        sel = pts[labels == g]
        total += float(((sel - sel.mean(axis=0)) ** 2).sum())
    return total


def _canonical(labels):
    remap = {}
    out = np.empty(len(labels), dtype=int)
    for i, g in enumerate(labels):
        out[i] = remap.setdefault(int(g), len(remap))
    return out


def centroid_luminance(centroids):
    v = np.asarray(centroids, dtype=np.float64)
    if v.ndim == 1 or v.shape[1] == 1:
        return v.reshape(-1)
    return v @ LUMA


def select_darkest_group(groups, centroids):
    """Indices of the clusters in the group with the lowest mean luminance."""
    groups = np.asarray(groups)
    if groups.size == 0:
        raise ValueError("no groups to choose from")
    lum = centroid_luminance(centroids)
    best = min(np.unique(groups), key=lambda g: (lum[groups == g].mean(), np.nonzero(groups == g)[0][0]))
    return set(int(i) for i in np.nonzero(groups == best)[0])


@dataclass
class ClusterConfig:
    fcm_c: int = 5
    fcm_m: float = 2.0
    fcm_tol: float = 1e-4
    fcm_max_iter: int = 100
    kmeans_k: int = 2
    hair_radius: int = 7
    hair_thresh: float = 0.04
    border_lum_thresh: float = 0.1
    remove_hair: bool = True
    content_size: int = 250
    seed: int = 0

    @classmethod
    def from_flat(cls, flat):
        """Build from dotted keys such as ``fcm.c`` or ``hair.radius``."""
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, val in (flat or {}).items():
            name = key.replace(".", "_")
            if name in names:
                kw[name] = val
        return cls(**kw)


@dataclass
class ClusterOutput:
    mask: np.ndarray  # original resolution
    scaled_mask: np.ndarray
    scaled_image: np.ndarray
    hair: np.ndarray
    border: np.ndarray
    fcm: FcmResult
    lesion_clusters: set


def cluster_pipeline(img, cfg: ClusterConfig | None = None) -> ClusterOutput:
    cfg = cfg or ClusterConfig()
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    scaled = colorspace.rescale_max_dim(img, cfg.content_size)
    if cfg.remove_hair:
        scaled, hair = morphology.remove_hair(scaled, cfg.hair_radius, cfg.hair_thresh)
    else:
        hair = np.zeros(scaled.shape[:2], dtype=bool)
    border = morphology.dark_border_mask(scaled, cfg.border_lum_thresh)
    valid = ~border
    if valid.sum() < max(5, cfg.fcm_c):
        raise ClusteringError("fewer than 5 valid pixels after border removal")

    feats = scaled[valid]
    res = fcm_fit(feats, cfg.fcm_c, cfg.fcm_m, cfg.fcm_tol, cfg.fcm_max_iter, cfg.seed)
    hard = res.labels()
    groups = kmeans_fit(res.centroids, min(cfg.kmeans_k, cfg.fcm_c), seed=cfg.seed)
    lesion = select_darkest_group(groups, res.centroids)

    sel = np.zeros(scaled.shape[:2], dtype=bool)
    sel[valid] = np.isin(hard, sorted(lesion))
    sel = morphology.largest_component(morphology.fill_holes(sel & valid))
    mask = colorspace.resize_nearest(sel, h, w)
    return ClusterOutput(mask, sel, scaled, hair, border, res, lesion)


def cluster_segment(img, config=None):
    """Algorithm-2 lesion mask at the input image's resolution.

    ``config`` may be a :class:`ClusterConfig` or a mapping of dotted keys.
    """
    if config is not None and not isinstance(config, ClusterConfig):
        config = ClusterConfig.from_flat(config)
    return cluster_pipeline(img, config).mask
