"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the U-Net needs are provided: valid 3x3/1x1
convolution, 2x2 max pooling, 2x2 stride-2 transposed convolution, ReLU,
dropout, crop-and-concatenate and a two-class pixel-wise softmax
cross-entropy. Everything runs in float64 with batch size 1, so tensors
are laid out as (channels, height, width).
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "ParamStore",
    "AdamState",
    "adam_step",
    "conv2d_valid",
    "maxpool2",
    "upconv2",
    "relu",
    "dropout",
    "center_crop_concat",
    "crop2d",
    "softmax_ce_loss",
    "backward",
    "grad_check",
    "save_params",
    "load_params",
]


class GraphError(RuntimeError):
    """Raised for malformed compute graphs (cycles, non-scalar roots)."""


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.op = op
        self._parents = tuple(_parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        other = _as_tensor(other)

        def _bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return _result(self.data + other.data, (self, other), "add", _bw)

    __radd__ = __add__

    def __mul__(self, other):
        other = _as_tensor(other)

        def _bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return _result(self.data * other.data, (self, other), "mul", _bw)

    __rmul__ = __mul__

    def sum(self):
        def _bw(g):
            self._accumulate(np.broadcast_to(g, self.shape))

        return _result(self.data.sum(), (self,), "sum", _bw)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _result(data, parents, op, bw):
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = bw
    return out


def _im2col(a, k):
    """(C,H,W) -> (C*k*k, H'*W') patch matrix, rows ordered (c, i, j)."""
    c, h, w = a.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = a[:, i:i + ho, j:j + wo]
    return cols.reshape(c * k * k, ho * wo)


def conv2d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Unpadded cross-correlation: (C,H,W) * (O,C,k,k) -> (O,H-k+1,W-k+1)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or b.data.ndim != 1:
        raise ValueError("conv2d_valid expects (C,H,W), (O,C,k,k), (O,)")
    o, c, k, k2 = w.shape
    if k != k2 or c != x.shape[0] or b.shape[0] != o:
        raise ValueError(f"shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    if x.shape[1] < k or x.shape[2] < k:
        raise ValueError(f"input {x.shape} smaller than kernel {k}")
    ho, wo = x.shape[1] - k + 1, x.shape[2] - k + 1

    cols = _im2col(x.data, k)
    out = (w.data.reshape(o, -1) @ cols).reshape(o, ho, wo) + b.data[:, None, None]

    def _bw(g):
        g2 = g.reshape(o, -1)
        if w.requires_grad:
            w._accumulate((g2 @ cols.T).reshape(w.shape))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=1))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
            # full correlation with the flipped kernel, channels swapped
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            x._accumulate((wf @ _im2col(gp, k)).reshape(x.shape))

    return _result(out, (x, w, b), "conv2d_valid", _bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    c, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ValueError(f"maxpool2 needs even spatial size, got {h}x{wd}")
    blocks = x.data.reshape(c, h // 2, 2, wd // 2, 2).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, h // 2, wd // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, h // 2, wd // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        x._accumulate(gb.reshape(c, h, wd))

    return _result(out, (x,), "maxpool2", _bw)


def upconv2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2: (Ci,H,W) -> (Co,2H,2W)."""
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[2:] != (2, 2):
        raise ValueError("upconv2 expects (Ci,H,W) and (Ci,Co,2,2)")
    ci, h, wd = x.shape
    if w.shape[0] != ci or b.shape != (w.shape[1],):
        raise ValueError(f"shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    co = w.shape[1]
    t = np.tensordot(w.data, x.data, axes=([0], [0]))  # (Co,2,2,H,W)
    out = t.transpose(0, 3, 1, 4, 2).reshape(co, 2 * h, 2 * wd) + b.data[:, None, None]

    def _bw(g):
        gr = g.reshape(co, h, 2, wd, 2)
        if x.requires_grad:
            x._accumulate(np.tensordot(w.data, gr, axes=([1, 2, 3], [0, 2, 4])))
        if w.requires_grad:
            w._accumulate(np.tensordot(x.data, gr, axes=([1, 2], [1, 3])))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return _result(out, (x, w, b), "upconv2", _bw)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0

    def _bw(g):
        x._accumulate(g * pos)

    return _result(np.where(pos, x.data, 0.0), (x,), "relu", _bw)


def dropout(x: Tensor, p=0.5, train=True, rng=None) -> Tensor:
    """Inverted dropout. In eval mode the input tensor is returned as is."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def _bw(g):
        x._accumulate(g * keep)

    return _result(x.data * keep, (x,), "dropout", _bw)


def center_crop_concat(skip: Tensor, up: Tensor) -> Tensor:
    """Crop ``skip`` centrally to ``up``'s spatial size, then stack channels."""
    dh = skip.shape[1] - up.shape[1]
    dw = skip.shape[2] - up.shape[2]
    if dh < 0 or dw < 0:
        raise ValueError(f"skip {skip.shape} smaller than upsampled {up.shape}")
    if dh % 2 or dw % 2:
        raise ValueError(f"odd crop margin between {skip.shape} and {up.shape}")
    top, left = dh // 2, dw // 2
    h, w = up.shape[1:]
    cs = skip.shape[0]
    cropped = skip.data[:, top:top + h, left:left + w]

    def _bw(g):
        if skip.requires_grad:
            gs = np.zeros(skip.shape)
            gs[:, top:top + h, left:left + w] = g[:cs]
            skip._accumulate(gs)
        up._accumulate(g[cs:])

    return _result(np.concatenate([cropped, up.data], axis=0), (skip, up), "concat", _bw)


def crop2d(x: Tensor, top, left, h, w) -> Tensor:
    """Spatial window [top:top+h, left:left+w] of a (C,H,W) tensor."""
    if top < 0 or left < 0 or top + h > x.shape[1] or left + w > x.shape[2]:
        raise ValueError(f"crop window outside tensor of shape {x.shape}")

    def _bw(g):
        gx = np.zeros(x.shape)
        gx[:, top:top + h, left:left + w] = g
        x._accumulate(gx)

    return _result(x.data[:, top:top + h, left:left + w], (x,), "crop", _bw)


def softmax_ce_loss(logits: Tensor, target) -> Tensor:
    """Mean pixel-wise cross-entropy of a (2,H,W) logit map against a boolean mask."""
    target = np.asarray(target, dtype=bool)
    if logits.data.ndim != 3 or logits.shape[0] != 2 or logits.shape[1:] != target.shape:
        raise ValueError(f"logits {logits.shape} do not match target {target.shape}")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=0))
    logp = z - logsum  # (2,H,W)
    onehot = np.stack([~target, target]).astype(np.float64)
    n = target.size
    loss = -(logp * onehot).sum() / n

    def _bw(g):
        logits._accumulate(g * (np.exp(logp) - onehot) / n)

    return _result(loss, (logits,), "softmax_ce", _bw)


def softmax_lesion(logits: np.ndarray) -> np.ndarray:
    """Probability of class 1 for a (2,H,W) logit array."""
    d = logits[0] - logits[1]
    return 1.0 / (1.0 + np.exp(np.clip(d, -700, 700)))


def _topo_order(root: Tensor) -> list[Tensor]:
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        st = state.get(key)
        if st == 2:
            continue
        if st == 1:
            raise GraphError("cycle detected in compute graph")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in compute graph")
            if ps is None:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if not isinstance(loss, Tensor):
        raise GraphError("backward needs a Tensor root")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    # intermediate gradients are recomputed on each call
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x, tol=None, step=1e-5,
               max_coords=64, seed=0) -> float:
    """Compare backprop against central differences; return the max relative error.

    Relative error is |a - n| / max(1, |a|, |n|). Tensors with more than
    ``max_coords`` entries are checked on a random subset of that many
    coordinates. If ``tol`` is given, a ``ValueError`` is raised when the
    error reaches it.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite function value")
    backward(out)
    analytic = np.zeros_like(x) if xt.grad is None else xt.grad

    flat_idx = np.arange(x.size)
    if x.size > max_coords:
        flat_idx = np.random.default_rng(seed).choice(x.size, size=max_coords, replace=False)

    worst = 0.0
    for i in flat_idx:
        pos = np.unravel_index(i, x.shape)
        xp = x.copy()
        xp[pos] += step
        xm = x.copy()
        xm[pos] -= step
        fp = float(f(Tensor(xp)).data)
        fm = float(f(Tensor(xm)).data)
        num = (fp - fm) / (2 * step)
        a = float(analytic[pos])
        if not (np.isfinite(num) and np.isfinite(a)):
            raise FloatingPointError("non-finite gradient")
        worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    if tol is not None and worst >= tol:
        raise ValueError(f"gradient check failed: max relative error {worst:.3g} >= {tol}")
    return worst


class ParamStore(OrderedDict):
    """Named trainable tensors, kept in insertion order."""

    def add(self, name: str, value) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self[name] = t
        return t

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad) for k, t in self.items()}

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))


@dataclass
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


MAGIC = b"DSEG1"


def save_params(params: ParamStore | dict, path) -> None:
    """Write parameters as: magic, then per tensor (u32 name length, utf-8 name,
    u32 rank, u32 dims..., little-endian float64 data)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    out = OrderedDict()
    pos = len(MAGIC)
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated parameter file") from exc
    return out


def parameters_equal(a: Iterable, b: Iterable) -> bool:
    a, b = dict(a), dict(b)
    return a.keys() == b.keys() and all(np.array_equal(np.asarray(a[k]), np.asarray(b[k])) for k in a)
