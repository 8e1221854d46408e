"""Dense float64 tensors (rank <= 4) with a reverse-mode differentiation tape.

The operation set is closed: only the shapes the training pipeline needs are
supported, and every differentiable op registers an explicit backward rule on
the tape. Ops work in two modes with one code path: if no input is attached
to a tape the result is a plain eager value, otherwise a node is recorded and
`Tape.backward` can later sweep gradients back to the parameter leaves.

Backward closures receive `(g, need)` where `need[i]` says whether input i's
gradient is actually consumed; expensive ops skip dead branches. A sweep can
be restricted to a subset of parameters (`wanted`), which prunes every node
that cannot reach them.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import _kernels as K

MAX_RANK = 4


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (fewer than 2 values per channel)."""


class Tensor:
    """Value carrier: a C-contiguous float64 array plus optional tape linkage.

    `data` is stored row-major, so `data.ravel()` is the flat buffer the
    on-disk format serializes. `tape_id` is the index of the node that
    produced this value on its tape, or None for untracked constants.
    """

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, data, tape: Optional["Tape"] = None,
                 tape_id: Optional[int] = None, validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > MAX_RANK:
            raise ShapeMismatch(f"rank {arr.ndim} exceeds supported rank {MAX_RANK}")
        if validate and not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains non-finite entries")
        self.data = arr
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", node={self.tape_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"


class TapeNode:
    __slots__ = ("op", "inputs", "backward", "is_param", "shape", "name")

    def __init__(self, op: str, inputs: tuple[int, ...],
                 backward: Optional[Callable], is_param: bool,
                 shape: tuple[int, ...], name: str = ""):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.is_param = is_param
        self.shape = shape
        self.name = name


class Tape:
    """Append-only record of operations; nodes are stored in topological order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._param_values: dict[int, np.ndarray] = {}

    def parameter(self, value, name: str = "") -> Tensor:
        """Register a trainable leaf. Its gradient is always materialized."""
        arr = np.ascontiguousarray(value, dtype=np.float64)
        node = TapeNode("param", (), None, True, arr.shape, name)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        self._param_values[nid] = arr
        return Tensor(arr, tape=self, tape_id=nid, validate=False)

    def constant(self, value) -> Tensor:
        """Register a tracked but non-trained leaf (gradient discarded)."""
        arr = np.ascontiguousarray(value, dtype=np.float64)
        node = TapeNode("const", (), None, False, arr.shape)
        self.nodes.append(node)
        return Tensor(arr, tape=self, tape_id=len(self.nodes) - 1, validate=False)

    def record(self, op: str, inputs: tuple[int, ...], out_data: np.ndarray,
               backward: Callable) -> Tensor:
        node = TapeNode(op, inputs, backward, False, out_data.shape)
        self.nodes.append(node)
        return Tensor(out_data, tape=self, tape_id=len(self.nodes) - 1, validate=False)

    def _reach(self, upto: int, wanted: set[int]) -> np.ndarray:
        """reach[i]: node i's transitive inputs (or i itself) touch `wanted`."""
        reach = np.zeros(upto + 1, dtype=bool)
        for nid in range(upto + 1):
            node = self.nodes[nid]
            if nid in wanted:
                reach[nid] = True
                continue
            for j in node.inputs:
                if j >= 0 and reach[j]:
                    reach[nid] = True
                    break
        return reach

    def backward(self, root: Tensor,
                 wanted: Optional[set[int]] = None) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns node id -> gradient for every parameter leaf; parameters the
        root does not depend on get zeros. With `wanted`, propagation is
        pruned to the subgraphs that can reach those parameter nodes (other
        parameters report zeros). Sweeps are independent and repeatable.
        """
        if root.tape is not self or root.tape_id is None:
            raise ValueError("backward root is not on this tape")
        if root.data.shape != ():
            raise ShapeMismatch(f"backward root must be scalar, got shape {root.shape}")
        reach = self._reach(root.tape_id, wanted) if wanted is not None else None
        grads: dict[int, np.ndarray] = {root.tape_id: np.ones((), dtype=np.float64)}
        owned: set[int] = set()
        for nid in range(root.tape_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.is_param:
                grads[nid] = g  # keep parameter grads
                continue
            if node.backward is None:
                continue
            if reach is None:
                need = tuple(j >= 0 for j in node.inputs)
            else:
                need = tuple(j >= 0 and reach[j] for j in node.inputs)
                if not any(need):
                    continue
            input_grads = node.backward(g, need)
            for j, ig in zip(node.inputs, input_grads):
                if j < 0 or ig is None:
                    continue
                if j in grads:
                    if id(grads[j]) not in owned:
                        grads[j] = grads[j].copy()
                        owned.add(id(grads[j]))
                    grads[j] += ig
                else:
                    # own the buffer before ever mutating it: closures may
                    # return views or hand the same array to two slots
                    if ig.flags["OWNDATA"] and id(ig) not in owned:
                        grads[j] = ig
                    else:
                        grads[j] = ig.copy()
                    owned.add(id(grads[j]))
        out = {}
        for nid, value in self._param_values.items():
            g = grads.get(nid)
            out[nid] = g if g is not None else np.zeros_like(value)
        return out


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _id(t: Tensor) -> int:
    return t.tape_id if t.tape is not None else -1


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...],
          backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out, validate=False)
    return tape.record(op, tuple(_id(t) for t in inputs), out, backward)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g, need: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g, need: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g, need):
        return g * bd if need[0] else None, g * ad if need[1] else None

    return _emit("mul", ad * bd, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g, need):
        return (g / bd if need[0] else None,
                -g * ad / (bd * bd) if need[1] else None)

    return _emit("div", out, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", x.data * c, (x,), lambda g, need: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g, need: (g * out,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g, need: (g * 0.5 / out,))


def clamp_min(x: Tensor, c: float) -> Tensor:
    # subgradient: pass-through only where x is strictly above the floor
    mask = x.data > c
    return _emit("clamp_min", np.maximum(x.data, c), (x,), lambda g, need: (g * mask,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim == 4:
        return _emit("relu", K.relu_fwd(xd), (x,),
                     lambda g, need: (K.relu_bwd(np.ascontiguousarray(g), xd),))
    mask = xd > 0.0
    return _emit("relu", xd * mask, (x,), lambda g, need: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (x,), lambda g, need: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"transpose: rank-2 required, got shape {x.shape}")
    return _emit("transpose", np.ascontiguousarray(x.data.T), (x,),
                 lambda g, need: (np.ascontiguousarray(g.T),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")
    in_shape = x.data.shape
    return _emit("reshape", x.data.reshape(shape), (x,),
                 lambda g, need: (g.reshape(in_shape),))


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"concat_rows: shapes {a.shape} and {b.shape}")
    m = a.shape[0]
    return _emit("concat_rows", np.concatenate([a.data, b.data], axis=0), (a, b),
                 lambda g, need: (g[:m], g[m:]))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim < 1 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeMismatch(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    xd = x.data

    def backward(g, need):
        gx = np.zeros_like(xd)
        gx[start:stop] = g
        return (gx,)

    return _emit("slice_rows", np.ascontiguousarray(xd[start:stop]), (x,), backward)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"add_rowvec: {x.shape} + {v.shape}")
    return _emit("add_rowvec", x.data + v.data[None, :], (x, v),
                 lambda g, need: (g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul: rank-2 required, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g, need):
        return (g @ bd.T if need[0] else None,
                ad.T @ g if need[1] else None)

    return _emit("matmul", ad @ bd, (a, b), backward)


def solve(a: Tensor, b: Tensor) -> Tensor:
    """X with A @ X = B for square A; backward treats A and B exactly."""
    if a.data.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch(f"solve: square matrix required, got {a.shape}")
    if b.data.ndim != 2 or b.shape[0] != a.shape[0]:
        raise ShapeMismatch(f"solve: {a.shape} X = {b.shape}")
    at = a.data.T
    x = np.linalg.solve(a.data, b.data)

    def backward(g, need):
        gb = np.linalg.solve(at, g)
        return -gb @ x.T if need[0] else None, gb

    return _emit("solve", x, (a, b), backward)


def gram_matrix(m: Tensor) -> Tensor:
    """G = m_hat @ m_hat.T for the C x S flattening of a C x H x W map."""
    if m.data.ndim != 3:
        raise ShapeMismatch(f"gram_matrix: rank-3 map required, got {m.shape}")
    c = m.shape[0]
    flat = m.data.reshape(c, -1)
    out = flat @ flat.T
    in_shape = m.data.shape

    def backward(g, need):
        return ((g + g.T) @ flat).reshape(in_shape),

    return _emit("gram_matrix", out, (m,), backward)


# ---------------------------------------------------------------------------
# convolution / normalization / pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (shape preserving).

    Lowered to batched GEMMs over im2col patches so the work lands in BLAS.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: rank-4 required, got {x.shape}, {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ShapeMismatch(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if cin != cin_w:
        raise ShapeMismatch(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    cols = K.im2col_t(x.data)  # [cin*9, n*h*w]
    wflat = w.data.reshape(cout, cin * 9)
    out = K.from_cfirst(wflat @ cols, n, cout, h, wd)

    def backward(g, need):
        g2 = K.to_cfirst(np.ascontiguousarray(g))  # [cout, n*h*w]
        gw = gx = None
        if need[1]:
            gw = (g2 @ cols.T).reshape(cout, cin, 3, 3)
        if need[0]:
            gx = K.col2im_t(wflat.T @ g2, n, cin, h, wd)
        return gx, gw

    return _emit("conv2d", out, (x, w), backward)


class BatchNormState:
    """Per-channel running statistics for one normalization layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, state: BatchNormState, mode: str,
               update_running: bool = True) -> Tensor:
    """Normalize per channel; train mode uses batch stats, eval uses running.

    The affine scale/shift of a BN layer is applied separately via
    `channel_affine`. Train-mode backward differentiates through the batch
    mean and variance.
    """
    if x.data.ndim != 4:
        raise ShapeMismatch(f"batch_norm: rank-4 required, got {x.shape}")
    if x.shape[1] != state.running_mean.shape[0]:
        raise ShapeMismatch(
            f"batch_norm: {x.shape[1]} channels vs state of {state.running_mean.shape[0]}")
    xd = x.data
    cnt = xd.shape[0] * xd.shape[2] * xd.shape[3]
    eps = state.eps
    if mode == "train":
        if cnt < 2:
            raise DegenerateBatchError(
                f"batch_norm train mode needs >= 2 values per channel, got {cnt}")
        mean, var = K.bn_stats(xd)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = K.bn_normalize(xd, mean, inv_std)
        if update_running:
            m = state.momentum
            state.running_mean *= 1.0 - m
            state.running_mean += m * mean
            state.running_var *= 1.0 - m
            state.running_var += m * var * cnt / (cnt - 1)

        def backward(g, need):
            return K.bn_backward(np.ascontiguousarray(g), xhat, inv_std, cnt),

        return _emit("batch_norm", xhat, (x,), backward)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = K.bn_normalize(xd, state.running_mean, inv_std)
        return _emit("batch_norm_eval", xhat, (x,),
                     lambda g, need: (K.scale_per_channel(np.ascontiguousarray(g), inv_std),))
    raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")


def batch_norm_given(x: Tensor, mean: np.ndarray, var: np.ndarray,
                     eps: float = 1e-5) -> Tensor:
    """Normalize with externally supplied per-channel stats (treated as constants)."""
    if x.data.ndim != 4 or x.shape[1] != mean.shape[0]:
        raise ShapeMismatch(f"batch_norm_given: {x.shape} with stats {mean.shape}")
    inv_std = 1.0 / np.sqrt(var + eps)
    out = K.bn_normalize(x.data, np.ascontiguousarray(mean), inv_std)
    return _emit("batch_norm_given", out, (x,),
                 lambda g, need: (K.scale_per_channel(np.ascontiguousarray(g), inv_std),))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel y = gamma_c * x + beta_c on an N x C x H x W map."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"channel_affine: rank-4 required, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(
            f"channel_affine: {c} channels vs gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    out = K.affine_fwd(xd, gd, beta.data)

    def backward(g, need):
        gc = np.ascontiguousarray(g)
        gx = K.scale_per_channel(gc, gd) if need[0] else None
        if need[1] or need[2]:
            gg, gb = K.affine_bwd_params(gc, xd)
        else:
            gg = gb = None
        return gx, gg, gb

    return _emit("channel_affine", out, (x, gamma, beta), backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 spatial mean with stride 2; extents must be even."""
    if x.data.ndim != 4:
        raise ShapeMismatch(f"avg_pool2: rank-4 required, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avg_pool2: even spatial extents required, got {h}x{w}")
    out = K.avg_pool2_fwd(x.data)

    def backward(g, need):
        return K.avg_pool2_bwd(np.ascontiguousarray(g), h, w),

    return _emit("avg_pool2", out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: rank-4 required, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g, need):
        return np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)),

    return _emit("global_avg_pool", out, (x,), backward)


def reduce_sum(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("reduce_sum", np.asarray(xd.sum()), (x,),
                 lambda g, need: (np.broadcast_to(g, xd.shape),))


def reduce_mean(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("reduce_mean", np.asarray(xd.mean()), (x,),
                 lambda g, need: (np.broadcast_to(g / xd.size, xd.shape),))


def reduce(x: Tensor, kind: str) -> Tensor:
    if kind == "mean":
        return reduce_mean(x)
    if kind == "sum":
        return reduce_sum(x)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ValueError(f"unknown reduce kind {kind!r}")


# ---------------------------------------------------------------------------
# probabilistic heads and losses
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatch(f"softmax_rows: rank-2 required, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g, need):
        return p * (g - (g * p).sum(axis=1, keepdims=True)),

    return _emit("softmax_rows", p, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax_cross_entropy: rank-2 logits required, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if n < 1:
        raise ShapeMismatch("softmax_cross_entropy: empty batch")
    if labels.shape != (n,):
        raise ShapeMismatch(f"softmax_cross_entropy: {n} rows vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)

    def backward(g, need):
        gl = p.copy()
        gl[np.arange(n), labels] -= 1.0
        return gl * (float(g) / n),

    return _emit("softmax_cross_entropy", np.asarray(loss), (logits,), backward)


BCE_CLAMP = 1e-7


def binary_cross_entropy(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean of -y log p - (1-y) log(1-p) with p clamped to [1e-7, 1-1e-7]."""
    if p.data.ndim != 1:
        raise ShapeMismatch(f"binary_cross_entropy: rank-1 required, got {p.shape}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeMismatch(f"binary_cross_entropy: {p.shape} vs labels {y.shape}")
    m = p.shape[0]
    if m < 1:
        raise ShapeMismatch("binary_cross_entropy: empty batch")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()

    def backward(g, need):
        return inside * (pc - y) / (pc * (1.0 - pc)) * (float(g) / m),

    return _emit("binary_cross_entropy", np.asarray(loss), (p,), backward)


NLL_CLAMP = 1e-7


def nll_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean -log p[label] over probability rows, log clamped at 1e-7."""
    if probs.data.ndim != 2:
        raise ShapeMismatch(f"nll_loss: rank-2 required, got {probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"nll_loss: {n} rows vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    picked = probs.data[np.arange(n), labels]
    pc = np.maximum(picked, NLL_CLAMP)
    loss = -np.log(pc).mean()

    def backward(g, need):
        gp = np.zeros_like(probs.data)
        gp[np.arange(n), labels] = np.where(picked > NLL_CLAMP, -1.0 / pc, 0.0)
        return gp * (float(g) / n),

    return _emit("nll_loss", np.asarray(loss), (probs,), backward)


def row_normalize(x: Tensor, fallback_uniform: bool = True) -> Tensor:
    """Divide each row by its sum; all-zero rows become uniform (no gradient)."""
    if x.data.ndim != 2:
        raise ShapeMismatch(f"row_normalize: rank-2 required, got {x.shape}")
    n, k = x.shape
    s = x.data.sum(axis=1, keepdims=True)
    degenerate = np.abs(s[:, 0]) < 1e-300
    if degenerate.any() and not fallback_uniform:
        raise ValueError("row_normalize: zero row sum")
    safe = np.where(degenerate[:, None], 1.0, s)
    out = x.data / safe
    if degenerate.any():
        out[degenerate] = 1.0 / k

    def backward(g, need):
        gx = (g - (g * out).sum(axis=1, keepdims=True)) / safe
        if degenerate.any():
            gx[degenerate] = 0.0
        return gx,

    return _emit("row_normalize", out, (x,), backward)
