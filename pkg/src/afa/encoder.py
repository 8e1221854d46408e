"""Feature encoder: conv/BN/ReLU/pool blocks with a per-channel perturbation
layer after every normalization.

The encoder runs as two weight-sharing streams during training. The original
stream produces seen-domain features F_o; the augmented stream applies the
perturbation (scale gamma, shift beta per channel) after each BN layer and
produces unseen-domain features F_a. At evaluation time only the original
stream exists and the perturbation layers are inactive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .rng import Rng
from .tensor import (
    BatchNormState,
    Tape,
    Tensor,
    add_rowvec,
    avg_pool2,
    batch_norm,
    batch_norm_given,
    channel_affine,
    conv2d,
    global_avg_pool,
    matmul,
    relu,
)


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""


def softplus(x: float) -> float:
    return math.log1p(math.exp(x))


# init spreads for the perturbation parameters: scale ~ N(1, softplus(0.5)),
# shift ~ N(0, softplus(0.3))
GAMMA_STD = softplus(0.5)
BETA_STD = softplus(0.3)


@dataclass
class EncoderConfig:
    in_channels: int = 3
    in_h: int = 16
    in_w: int = 16
    block_channels: tuple[int, ...] = (8, 16, 32, 32)

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if len(self.block_channels) < 1:
            raise ConfigError("encoder needs at least one block")
        if any(c < 1 for c in self.block_channels):
            raise ConfigError(f"block channels must be positive, got {self.block_channels}")
        if self.in_channels < 1 or self.in_h < 1 or self.in_w < 1:
            raise ConfigError("input extents must be positive")
        self.pool_plan()  # validate spatial arithmetic

    def pool_plan(self) -> list[bool]:
        """Whether each block pools; 2x2 pooling is skipped once an extent is < 2."""
        plan = []
        h, w = self.in_h, self.in_w
        for i in range(len(self.block_channels)):
            if h >= 2 and w >= 2:
                if h % 2 or w % 2:
                    raise ConfigError(
                        f"block {i}: cannot 2x2-pool odd extents {h}x{w}")
                plan.append(True)
                h, w = h // 2, w // 2
            else:
                plan.append(False)
        return plan

    @property
    def out_channels(self) -> int:
        return self.block_channels[-1]

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels, "in_h": self.in_h,
                "in_w": self.in_w, "block_channels": list(self.block_channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(in_channels=d.get("in_channels", 3), in_h=d.get("in_h", 16),
                   in_w=d.get("in_w", 16),
                   block_channels=tuple(d.get("block_channels", (8, 16, 32, 32))))


class EncoderParams:
    """Trainable encoder parameters plus BN running buffers."""

    def __init__(self, cfg: EncoderConfig, conv: list[np.ndarray],
                 bn_scale: list[np.ndarray], bn_shift: list[np.ndarray],
                 bn_states: list[BatchNormState]):
        self.cfg = cfg
        self.conv = conv
        self.bn_scale = bn_scale
        self.bn_shift = bn_shift
        self.bn_states = bn_states

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.conv)):
            out[f"enc.b{i}.conv"] = self.conv[i]
            out[f"enc.b{i}.bn_scale"] = self.bn_scale[i]
            out[f"enc.b{i}.bn_shift"] = self.bn_shift[i]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn_states):
            out[f"enc.b{i}.bn_mean"] = st.running_mean
            out[f"enc.b{i}.bn_var"] = st.running_var
        return out

    def param_count(self) -> int:
        return sum(v.size for v in self.named().values())


def init_encoder(cfg: EncoderConfig, rng: Rng) -> EncoderParams:
    """He-normal conv kernels (no bias); BN affine starts at scale 1, shift 0."""
    conv, scale, shift, states = [], [], [], []
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.block_channels):
        std = math.sqrt(2.0 / (cin * 9))
        conv.append(rng.substream("enc", i, "conv").normal(0.0, std, (cout, cin, 3, 3)))
        scale.append(np.ones(cout, dtype=np.float64))
        shift.append(np.zeros(cout, dtype=np.float64))
        states.append(BatchNormState(cout))
        cin = cout
    return EncoderParams(cfg, conv, scale, shift, states)


AFFINE = "affine"
CONV = "conv"


@dataclass
class AfaLayer:
    """Per-channel scale and bias applied after one BN layer."""
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ConfigError(
                f"perturbation layer needs matching vectors, got {self.gamma.shape} / {self.beta.shape}")


class AfaParams:
    """Perturbation parameters for every site: affine pairs or 3x3 kernels."""

    def __init__(self, kind: str, layers: list):
        if kind not in (AFFINE, CONV):
            raise ConfigError(f"unknown perturbation kind {kind!r}")
        self.kind = kind
        self.layers = layers

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if self.kind == AFFINE:
                out[f"afa.s{i}.gamma"] = layer.gamma
                out[f"afa.s{i}.beta"] = layer.beta
            else:
                out[f"afa.s{i}.kernel"] = layer
        return out


def init_afa(channels_per_site: list[int], rng: Rng) -> AfaParams:
    """Draw gamma ~ N(1, softplus(0.5)) and beta ~ N(0, softplus(0.3)) per channel."""
    layers = []
    for i, c in enumerate(channels_per_site):
        gamma = rng.substream("afa", i, "gamma").normal(1.0, GAMMA_STD, (c,))
        beta = rng.substream("afa", i, "beta").normal(0.0, BETA_STD, (c,))
        layers.append(AfaLayer(gamma, beta))
    return AfaParams(AFFINE, layers)


def init_afa_identity(channels_per_site: list[int]) -> AfaParams:
    return AfaParams(AFFINE, [AfaLayer(np.ones(c), np.zeros(c)) for c in channels_per_site])


def init_afa_nonlinear(channels_per_site: list[int], rng: Rng) -> AfaParams:
    """Depth-preserving 3x3 kernels near the identity (delta) transform."""
    kernels = []
    for i, c in enumerate(channels_per_site):
        sub = rng.substream("afa", i, "kernel")
        w = sub.normal(0.0, BETA_STD / (9 * c), (c, c, 3, 3))
        w[np.arange(c), np.arange(c), 1, 1] = sub.normal(1.0, GAMMA_STD, (c,))
        kernels.append(w)
    return AfaParams(CONV, kernels)


def afa_apply(m: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Augmented map: m_a[c, h, w] = gamma[c] * m[c, h, w] + beta[c]."""
    return channel_affine(m, gamma, beta)


def afa_apply_nonlinear(m: Tensor, kernel: Tensor) -> Tensor:
    return conv2d(m, kernel)


@dataclass
class DualFeatures:
    """Per-site paired activations plus pooled outputs of both streams."""
    sites: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    f_o: Optional[Tensor] = None
    f_a: Optional[Tensor] = None


def lift(tape: Optional[Tape], named: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Turn named arrays into tape parameter leaves (or plain tensors if no tape)."""
    if tape is None:
        return {k: Tensor(v) for k, v in named.items()}
    return {k: tape.parameter(v, k) for k, v in named.items()}


def encode(x: Tensor, cfg: EncoderConfig, p: Mapping[str, Tensor],
           bn_states: list[BatchNormState], mode: str,
           update_running: bool = True) -> Tensor:
    """Single original-stream pass: pooled N x C_out features, no perturbation."""
    plan = cfg.pool_plan()
    h = x
    for i in range(len(cfg.block_channels)):
        h = conv2d(h, p[f"enc.b{i}.conv"])
        h = batch_norm(h, bn_states[i], mode, update_running=update_running)
        h = channel_affine(h, p[f"enc.b{i}.bn_scale"], p[f"enc.b{i}.bn_shift"])
        h = relu(h)
        if plan[i]:
            h = avg_pool2(h)
    return global_avg_pool(h)


def forward_dual(x: Tensor, cfg: EncoderConfig, p: Mapping[str, Tensor],
                 bn_states: list[BatchNormState], afa: AfaParams,
                 mode: str = "train", shared_bn_stats: bool = False,
                 update_running: bool = True) -> DualFeatures:
    """Run both streams over shared weights, capturing (m_o, m_a) at every site.

    In eval mode the perturbation is inactive and only F_o is produced. The
    running BN buffers are written by the original stream only (and not at
    all when update_running is off, e.g. for held-out measurements).
    """
    if mode == "eval":
        return DualFeatures(sites=[], f_o=encode(x, cfg, p, bn_states, "eval"), f_a=None)
    if len(afa.layers) != len(cfg.block_channels):
        raise ConfigError(
            f"{len(afa.layers)} perturbation sites for {len(cfg.block_channels)} BN layers")
    plan = cfg.pool_plan()
    xo = xa = x
    sites: list[tuple[Tensor, Tensor]] = []
    for i in range(len(cfg.block_channels)):
        w = p[f"enc.b{i}.conv"]
        co = conv2d(xo, w)
        ca = conv2d(xa, w)
        bo = batch_norm(co, bn_states[i], "train", update_running=update_running)
        if shared_bn_stats:
            mean = co.data.mean(axis=(0, 2, 3))
            var = co.data.var(axis=(0, 2, 3))
            ba = batch_norm_given(ca, mean, var, bn_states[i].eps)
        else:
            ba = batch_norm(ca, bn_states[i], "train", update_running=False)
        scale_t, shift_t = p[f"enc.b{i}.bn_scale"], p[f"enc.b{i}.bn_shift"]
        m_o = channel_affine(bo, scale_t, shift_t)
        m_pre = channel_affine(ba, scale_t, shift_t)
        if afa.kind == AFFINE:
            m_a = afa_apply(m_pre, p[f"afa.s{i}.gamma"], p[f"afa.s{i}.beta"])
        else:
            m_a = afa_apply_nonlinear(m_pre, p[f"afa.s{i}.kernel"])
        sites.append((m_o, m_a))
        xo = relu(m_o)
        xa = relu(m_a)
        if plan[i]:
            xo = avg_pool2(xo)
            xa = avg_pool2(xa)
    return DualFeatures(sites=sites, f_o=global_avg_pool(xo), f_a=global_avg_pool(xa))


def init_classifier(c_out: int, n_classes: int, rng: Rng) -> dict[str, np.ndarray]:
    """Linear probe over pooled features for base-class pretraining."""
    w = rng.substream("head", "w").normal(0.0, math.sqrt(1.0 / c_out), (c_out, n_classes))
    return {"head.w": w, "head.b": np.zeros(n_classes, dtype=np.float64)}


def pretrain_forward(x: Tensor, cfg: EncoderConfig, p: Mapping[str, Tensor],
                     bn_states: list[BatchNormState], mode: str = "train") -> Tensor:
    """Logits over base classes; perturbation sites are identity here."""
    feats = encode(x, cfg, p, bn_states, mode)
    return add_rowvec(matmul(feats, p["head.w"]), p["head.b"])
