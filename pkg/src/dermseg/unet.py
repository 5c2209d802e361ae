"""Valid-convolution U-Net built on :mod:`dermseg.tensorcore`."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import colorspace
from .tensorcore import (
    AdamState,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    center_crop_concat,
    conv2d_valid,
    crop2d,
    dropout,
    maxpool2,
    relu,
    save_params,
    softmax_ce_loss,
    softmax_lesion,
    upconv2,
)

log = logging.getLogger(__name__)

SIZE_CAP = 4096


# --------------------------------------------------------------------------
# geometry


def formal_output_size(input_size, depth) -> Fraction:
    """Evaluate the valid-size recurrence without integrality checks.

    f_0(i) = i - 4 and f_L(i) = 2 f_{L-1}((i - 4) / 2) - 4. The result is a
    Fraction because non-poolable inputs give non-integral intermediates.
    """
    i = Fraction(input_size)
    if depth == 0:
        return i - 4
    return 2 * formal_output_size((i - 4) / 2, depth - 1) - 4


def trace_sizes(input_size, depth):
    """Spatial sizes along the network, or None if some stage is infeasible.

    Returns (down, bottleneck, up): ``down[l]`` is the size entering
    contraction block l, ``bottleneck`` the size after the bottleneck
    convolutions and ``up[l]`` the size after expansion block l (listed
    from deepest to shallowest).
    """
    down = []
    s = input_size
    for _ in range(depth):
        down.append(s)
        s -= 4
        if s <= 0 or s % 2:
            return None
        s //= 2
    s -= 4
    if s <= 0:
        return None
    bottleneck = s
    up = []
    for _ in range(depth):
        s = 2 * s - 4
        if s <= 0:
            return None
        up.append(s)
    return down, bottleneck, up


@dataclass(frozen=True)
class GeometryPlan:
    depth: int
    input_size: int
    output_size: int
    content_size: int
    down_sizes: tuple
    bottleneck_size: int
    up_sizes: tuple
    pad_before: int
    pad_after: int
    crop_before: int

    @property
    def shrink(self):
        return self.input_size - self.output_size


def geometry_solve(target_output, depth) -> GeometryPlan:
    """Smallest feasible square input whose output covers ``target_output`` pixels."""
    if target_output < 1 or depth < 1:
        raise ValueError("target_output and depth must be >= 1")
    for n in range(1, SIZE_CAP + 1):
        tr = trace_sizes(n, depth)
        if tr is None:
            continue
        down, bott, up = tr
        out = up[-1]
        if out < target_output:
            continue
        crop_before = (out - target_output) // 2
        pad_before = crop_before + (n - out) // 2
        pad_after = n - target_output - pad_before
        return GeometryPlan(depth, n, out, target_output, tuple(down), bott, tuple(up),
                            pad_before, pad_after, crop_before)
    raise ValueError(f"no feasible input size <= {SIZE_CAP} for output {target_output}, depth {depth}")


# --------------------------------------------------------------------------
# model


@dataclass
class UNetConfig:
    depth: int = 4
    base_features: int = 16
    kernel: int = 3
    classes: int = 2
    dropout_p: float = 0.5
    in_channels: int = 5
    content_size: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.base_features < 1:
            raise ValueError("depth and base_features must be >= 1")


def _trunc_normal(rng, shape, std):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def layer_shapes(cfg: UNetConfig):
    """Ordered (name, shape) for every parameter of the network."""
    k, f = cfg.kernel, cfg.base_features
    shapes = []

    def conv(name, cin, cout, ks=k):
        shapes.append((f"{name}.w", (cout, cin, ks, ks)))
        shapes.append((f"{name}.b", (cout,)))

    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        cout = f * 2 ** lvl
        conv(f"down{lvl}.conv1", cin, cout)
        conv(f"down{lvl}.conv2", cout, cout)
        cin = cout
    cout = f * 2 ** cfg.depth
    conv("bottom.conv1", cin, cout)
    conv("bottom.conv2", cout, cout)
    cin = cout
    for lvl in reversed(range(cfg.depth)):
        cout = f * 2 ** lvl
        shapes.append((f"up{lvl}.upconv.w", (cin, cout, 2, 2)))
        shapes.append((f"up{lvl}.upconv.b", (cout,)))
        conv(f"up{lvl}.conv1", 2 * cout, cout)
        conv(f"up{lvl}.conv2", cout, cout)
        cin = cout
    conv("head", cin, cfg.classes, ks=1)
    return shapes


class UNet:
    def __init__(self, cfg: UNetConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params
        self.geometry = geometry_solve(cfg.content_size, cfg.depth)

    def channel_plan(self):
        f = self.cfg.base_features
        down = [f * 2 ** lvl for lvl in range(self.cfg.depth)]
        return down, f * 2 ** self.cfg.depth

    def _block(self, x, name):
        p = self.params
        x = relu(conv2d_valid(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"]))
        return relu(conv2d_valid(x, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"]))

    def forward(self, x, train=False, rng=None, trace=None) -> Tensor:
        """Logits (classes, O, O) for a (C, N, N) input array."""
        cfg, p = self.cfg, self.params
        x = x if isinstance(x, Tensor) else Tensor(x)
        skips = []
        for lvl in range(cfg.depth):
            if trace is not None:
                trace.append(("down", lvl, x.shape[1]))
            x = self._block(x, f"down{lvl}")
            if lvl == cfg.depth - 1:
                x = dropout(x, cfg.dropout_p, train, rng)
            skips.append(x)
            x = maxpool2(x)
        x = self._block(x, "bottom")
        x = dropout(x, cfg.dropout_p, train, rng)
        if trace is not None:
            trace.append(("bottom", cfg.depth, x.shape[1]))
        for lvl in reversed(range(cfg.depth)):
            x = upconv2(x, p[f"up{lvl}.upconv.w"], p[f"up{lvl}.upconv.b"])
            x = center_crop_concat(skips[lvl], x)
            x = self._block(x, f"up{lvl}")
            if trace is not None:
                trace.append(("up", lvl, x.shape[1]))
        return conv2d_valid(x, p["head.w"], p["head.b"])

    def load_arrays(self, arrays):
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


def build_model(cfg: UNetConfig) -> UNet:
    """Fresh network with truncated He-normal weights and zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = ParamStore()
    for name, shape in layer_shapes(cfg):
        if name.endswith(".b"):
            params.add(name, np.zeros(shape))
        else:
            if len(shape) == 4 and name.endswith("upconv.w"):
                fan_in = shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            params.add(name, _trunc_normal(rng, shape, math.sqrt(2.0 / fan_in)))
    return UNet(cfg, params)


# --------------------------------------------------------------------------
# data augmentation

# a closed flip/rotation group: hflip . vflip = rot180
TRANSFORMS = ("identity", "hflip", "vflip", "rot180")


def apply_transform(arr, name):
    if name == "identity":
        return np.array(arr, copy=True)
    if name == "hflip":
        return np.ascontiguousarray(arr[:, ::-1])
    if name == "vflip":
        return np.ascontiguousarray(arr[::-1])
    if name == "rot180":
        return np.ascontiguousarray(np.rot90(arr, 2, axes=(0, 1)))
    raise ValueError(f"unknown transform {name!r}")


def augment4(img, mask):
    return [(apply_transform(img, t), apply_transform(mask, t)) for t in TRANSFORMS]


# --------------------------------------------------------------------------
# training and inference


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr: float = 0.0002
    augment: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, checkpoint=None):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    params: ParamStore
    losses: list = field(default_factory=list)


def prepare_pair(img, mask, content_size):
    """Rescale an image (bilinear) and its mask (nearest) to the content scale."""
    img = np.asarray(img, dtype=np.float64)
    scaled = colorspace.rescale_max_dim(img, content_size)
    sh, sw = scaled.shape[:2]
    m = None if mask is None else colorspace.resize_nearest(np.asarray(mask, bool), sh, sw)
    return scaled, m


def target_for(mask_scaled, net_input: colorspace.NetInput):
    """Truth on the content canvas (False in padding), aligned to the cropped output."""
    g = net_input.geometry
    tgt = np.zeros((g.content_size, g.content_size), dtype=bool)
    oy, ox = net_input.content_offset
    h, w = mask_scaled.shape
    tgt[oy:oy + h, ox:ox + w] = mask_scaled
    return tgt


def content_logits(model: UNet, logits: Tensor):
    """Crop logits to the square content canvas."""
    g = model.geometry
    return crop2d(logits, g.crop_before, g.crop_before, g.content_size, g.content_size)


def write_checkpoint(path, model: UNet, iteration, loss, extra=None):
    """Parameter file plus a ``<path>.manifest`` text sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_params(model.params, path)
    entries = {f"unet.{k}": v for k, v in asdict(model.cfg).items()}
    entries["iteration"] = iteration
    entries["loss"] = repr(float(loss))
    for k, v in (extra or {}).items():
        entries.setdefault(k, v)
    entries["artifact.checkpoint"] = hashlib.sha256(path.read_bytes()).hexdigest()
    side = Path(str(path) + ".manifest")
    side.write_text("".join(f"{k}={v}\n" for k, v in entries.items()), encoding="utf-8")
    return path


def train(model: UNet, samples, mode, tc: TrainConfig, checkpoint_path=None, fwhm=125.0,
          progress=None) -> TrainResult:
    """Batch-size-1 Adam training on (image, mask) pairs.

    Each iteration draws one (sample, transform) pair from a seeded order
    that is reshuffled every epoch, assembles the input for ``mode``,
    and takes one optimizer step on the pixel-wise cross-entropy.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("train needs at least one sample")
    mode = colorspace.InputMode(mode)
    rng = np.random.default_rng(tc.seed)
    shuffle_rng, drop_rng = rng.spawn(2)
    size = model.geometry.content_size
    prepared = [prepare_pair(img, m, size) for img, m in samples]
    transforms = TRANSFORMS if tc.augment else ("identity",)
    pool = [(i, t) for i in range(len(prepared)) for t in transforms]

    state = AdamState(lr=tc.lr)
    arrays = model.params.arrays()
    losses = []
    order = []
    for it in range(1, tc.iterations + 1):
        if not order:
            order = [pool[j] for j in shuffle_rng.permutation(len(pool))][::-1]
        si, tname = order.pop()
        img, mask = prepared[si]
        img, mask = apply_transform(img, tname), apply_transform(mask, tname)
        net_in = colorspace.assemble_input(img, mode, model.geometry, fwhm=fwhm)
        target = target_for(mask, net_in)

        model.params.zero_grad()
        try:
            logits = model.forward(net_in.channels, train=True, rng=drop_rng)
            loss = softmax_ce_loss(content_logits(model, logits), target)
        except FloatingPointError:
            loss = None
        if loss is None or not np.isfinite(loss.data):
            ck = None
            if checkpoint_path is not None:
                ck = write_checkpoint(Path(str(checkpoint_path) + ".diverged"), model, it, float("nan"))
            raise TrainingDiverged(it, ck)
        backward(loss)
        adam_step(arrays, model.params.grads(), state)
        losses.append(float(loss.data))
        if progress is not None:
            progress(it, losses[-1])
        if checkpoint_path is not None and tc.checkpoint_every and it % tc.checkpoint_every == 0:
            write_checkpoint(Path(f"{checkpoint_path}.iter{it}"), model, it, losses[-1])
    return TrainResult(model.params, losses)


def predict_prob(model: UNet, img, mode, fwhm=125.0):
    """Lesion probability for every pixel of ``img`` at its original resolution."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    scaled, _ = prepare_pair(img, None, model.geometry.content_size)
    net_in = colorspace.assemble_input(scaled, mode, model.geometry, original=(w, h), fwhm=fwhm)
    logits = model.forward(net_in.channels, train=False).data
    prob = net_in.crop_output(softmax_lesion(logits))
    return np.clip(colorspace.resize_bilinear(prob, h, w), 0.0, 1.0)


def eval_loss(model: UNet, img, mask, mode, fwhm=125.0):
    """Dropout-free loss of one (image, mask) pair."""
    scaled, m = prepare_pair(img, mask, model.geometry.content_size)
    net_in = colorspace.assemble_input(scaled, mode, model.geometry, fwhm=fwhm)
    logits = model.forward(net_in.channels, train=False)
    return float(softmax_ce_loss(content_logits(model, logits), target_for(m, net_in)).data)
