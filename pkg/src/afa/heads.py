"""Episodic class discriminators: matching, prototypical, and label-propagation
heads, plus the episode loss and accuracy.

All heads are nonparametric functions of the episode embeddings, return one
probability row per query (rows sum to 1), and are differentiable through the
tape so the classification loss can reach the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .tensor import (
    Tensor,
    add,
    clamp_min,
    concat_rows,
    div,
    exp,
    matmul,
    mul,
    nll_loss,
    row_normalize,
    scale,
    slice_rows,
    softmax_rows,
    solve,
    sqrt,
    sub,
    transpose,
)

NORM_GUARD = 1e-8


@dataclass
class Episode:
    """One n-way k-shot task: a labeled support set and a query set.

    `support_x`/`query_x` hold raw images (numpy, rank 4) when produced by the
    sampler and embeddings (Tensor, rank 2) when fed to a head. Labels are
    0..n-1 with exactly k support and q query rows per class.
    """
    support_x: Union[Tensor, np.ndarray]
    support_y: np.ndarray
    query_x: Union[Tensor, np.ndarray]
    query_y: np.ndarray
    n: int
    k: int
    q: int

    def __post_init__(self):
        self.support_y = np.asarray(self.support_y, dtype=np.int64)
        self.query_y = np.asarray(self.query_y, dtype=np.int64)
        for name, labels in (("support", self.support_y), ("query", self.query_y)):
            if labels.size and (labels.min() < 0 or labels.max() >= self.n):
                raise ValueError(f"{name} labels outside [0, {self.n})")
        counts_s = np.bincount(self.support_y, minlength=self.n)
        if not np.all(counts_s == self.k):
            raise ValueError(f"expected {self.k} support rows per class, got {counts_s}")


@dataclass
class HeadKind:
    """Selected head; alpha and sigma only apply to the propagation head.

    sigma=None means the kernel width is set per episode to the median
    pairwise embedding distance.
    """
    kind: str = "matching"
    alpha: float = 0.99
    sigma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("matching", "proto", "tpn"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if not (0.0 <= self.alpha < 1.0):
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.sigma is not None and self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _row_sumsq(x: Tensor) -> Tensor:
    ones = Tensor(np.ones((x.shape[1], 1)))
    return matmul(mul(x, x), ones)


def matching_head(episode: Episode) -> Tensor:
    """Cosine attention over supports, mass summed per class."""
    s = _as_tensor(episode.support_x)
    q = _as_tensor(episode.query_x)
    dots = matmul(q, transpose(s))
    norm_prod = matmul(_row_sumsq(q), transpose(_row_sumsq(s)))
    denom = sqrt(clamp_min(norm_prod, NORM_GUARD ** 2))
    attn = softmax_rows(div(dots, denom))
    return matmul(attn, Tensor(_onehot(episode.support_y, episode.n)))


def _class_mean_matrix(labels: np.ndarray, n: int, k: int) -> np.ndarray:
    return _onehot(labels, n).T / float(k)


def _sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows of a and rows of b."""
    ra, rb = a.shape[0], b.shape[0]
    asq = matmul(_row_sumsq(a), Tensor(np.ones((1, rb))))
    bsq = matmul(Tensor(np.ones((ra, 1))), transpose(_row_sumsq(b)))
    cross = scale(matmul(a, transpose(b)), 2.0)
    return sub(add(asq, bsq), cross)


def proto_head(episode: Episode) -> Tensor:
    """Softmax over negative squared distances to class-mean prototypes."""
    s = _as_tensor(episode.support_x)
    q = _as_tensor(episode.query_x)
    protos = matmul(Tensor(_class_mean_matrix(episode.support_y, episode.n, episode.k)), s)
    return softmax_rows(scale(_sq_distances(q, protos), -1.0))


def tpn_head(episode: Episode, alpha: float = 0.99,
             sigma: Optional[float] = None) -> Tensor:
    """Closed-form label propagation over the support+query affinity graph.

    Affinity W_ij = exp(-d_ij^2 / (2 sigma^2)) with zero diagonal, normalized
    to S = D^-1/2 W D^-1/2; scores are (I - alpha S)^-1 Y and query rows are
    normalized into probabilities (uniform fallback for all-zero rows).
    """
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    s = _as_tensor(episode.support_x)
    q = _as_tensor(episode.query_x)
    m = s.shape[0]
    z = concat_rows(s, q)
    r = z.shape[0]
    d2 = clamp_min(_sq_distances(z, z), 0.0)
    if sigma is None:
        dvals = np.sqrt(d2.data[np.triu_indices(r, k=1)])
        sigma = max(float(np.median(dvals)), 1e-6)
    elif sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w = mul(exp(scale(d2, -1.0 / (2.0 * sigma * sigma))),
            Tensor(1.0 - np.eye(r)))
    deg = clamp_min(matmul(w, Tensor(np.ones((r, 1)))), 1e-30)
    dinv = div(Tensor(np.ones((r, 1))), sqrt(deg))
    s_norm = mul(w, matmul(dinv, transpose(dinv)))
    system = sub(Tensor(np.eye(r)), scale(s_norm, alpha))
    y = np.zeros((r, episode.n))
    y[:m] = _onehot(episode.support_y, episode.n)
    scores = solve(system, Tensor(y))
    return row_normalize(slice_rows(scores, m, r))


def apply_head(episode: Episode, head: HeadKind) -> Tensor:
    if head.kind == "matching":
        return matching_head(episode)
    if head.kind == "proto":
        return proto_head(episode)
    return tpn_head(episode, head.alpha, head.sigma)


def episode_loss(probs: Tensor, query_labels: np.ndarray) -> Tensor:
    """Mean negative log probability of the true class (clamped log)."""
    return nll_loss(probs, query_labels)


def episode_accuracy(probs: Union[Tensor, np.ndarray],
                     query_labels: np.ndarray) -> float:
    """Argmax match rate; ties break toward the lowest class index."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    pred = data.argmax(axis=1)
    return float((pred == np.asarray(query_labels)).mean())
