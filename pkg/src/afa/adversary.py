"""Domain discriminator, gram discrepancy, and the min-max update routing.

The combined adversarial objective is L_D = L_d - L_g. The discriminator and
the perturbation layers descend L_D while the encoder ascends it; the routing
is done with explicit gradient signs (equivalent to a gradient reversal layer
but with one auditable code path).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import _kernels
from .encoder import DualFeatures
from .optim import AdamState, adam_step
from .tensor import (
    ShapeMismatch,
    Tape,
    Tensor,
    _emit,
    add,
    add_rowvec,
    binary_cross_entropy,
    concat_rows,
    matmul,
    reshape,
    scale,
    sigmoid,
    sub,
)


class NonFiniteLossError(RuntimeError):
    """Training step aborted on a NaN/Inf loss; message carries the iteration."""

    def __init__(self, which: str, iteration: int):
        super().__init__(f"non-finite {which} at iteration {iteration}")
        self.iteration = iteration


def init_discriminator(c_out: int) -> dict[str, np.ndarray]:
    """Logistic regressor over pooled features; zero init gives L_d = ln 2."""
    return {"disc.w": np.zeros(c_out, dtype=np.float64),
            "disc.b": np.zeros(1, dtype=np.float64)}


def discriminate(f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Per-row probability sigmoid(w . f + b) of being an augmented sample."""
    w = p["disc.w"]
    scores = add_rowvec(matmul(f, reshape(w, (w.shape[0], 1))), p["disc.b"])
    return sigmoid(reshape(scores, (f.shape[0],)))


def domain_labels(n: int) -> np.ndarray:
    """Seen (original) rows are labeled 0, unseen (augmented) rows 1."""
    return np.concatenate([np.zeros(n), np.ones(n)])


def domain_loss(f_o: Tensor, f_a: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """BCE over the 2N stacked rows: originals labeled 0, augmented labeled 1."""
    if f_o.shape != f_a.shape:
        raise ShapeMismatch(f"domain_loss: batches {f_o.shape} vs {f_a.shape}")
    probs = discriminate(concat_rows(f_o, f_a), p)
    return binary_cross_entropy(probs, domain_labels(f_o.shape[0]))


def domain_accuracy(f_o: Tensor, f_a: Tensor, p: Mapping[str, Tensor]) -> float:
    """Fraction of the 2N rows the discriminator classifies correctly at 0.5."""
    probs = discriminate(Tensor(np.concatenate([f_o.data, f_a.data])),
                         {k: Tensor(v.data) for k, v in p.items()})
    labels = domain_labels(f_o.shape[0])
    return float(((probs.data > 0.5) == (labels > 0.5)).mean())


def gram_loss(m_o: Tensor, m_a: Tensor) -> Tensor:
    """Scaled squared Frobenius distance between per-sample gram matrices.

    Each N x C x H x W map is flattened per sample to C x S (S = H*W); the
    per-sample distance sum_ij (G_ij(m_a) - G_ij(m_o))^2 / (4 S^2 C^2) is
    averaged over the batch.
    """
    if m_o.shape != m_a.shape:
        raise ShapeMismatch(f"gram_loss: shapes {m_o.shape} vs {m_a.shape}")
    if m_o.data.ndim != 4:
        raise ShapeMismatch(f"gram_loss: rank-4 maps required, got {m_o.shape}")
    n, c, h, w = m_o.shape
    s = h * w
    fo = m_o.data.reshape(n, c, s)
    fa = m_a.data.reshape(n, c, s)
    diff, sq_sum = _kernels.gram_pair_fwd(fo, fa)
    coeff = 1.0 / (4.0 * s * s * c * c)
    loss = np.asarray(sq_sum * coeff / n)
    in_shape = m_o.data.shape

    def backward(g, need):
        # d/dm of ||m m^T - R||_F^2 is 4 (m m^T - R) m for symmetric residual
        k = 4.0 * coeff / n * float(g)
        go = _kernels.gram_pair_bwd(diff, fo, -k).reshape(in_shape) if need[0] else None
        ga = _kernels.gram_pair_bwd(diff, fa, k).reshape(in_shape) if need[1] else None
        return go, ga

    return _emit("gram_loss", loss, (m_o, m_a), backward)


def gram_losses(dual: DualFeatures) -> tuple[Tensor, list[float]]:
    """Mean over sites of the per-site gram loss, plus the per-site values."""
    if not dual.sites:
        raise ValueError("gram_losses: no perturbation sites")
    per_site = [gram_loss(m_o, m_a) for m_o, m_a in dual.sites]
    total = per_site[0]
    for t in per_site[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(per_site)), [float(t.data) for t in per_site]


def total_gram_loss(dual: DualFeatures) -> Tensor:
    return gram_losses(dual)[0]


@dataclass
class LambdaSchedule:
    """Adversarial weight over training progress: the DANN ramp or a constant."""
    kind: str = "dann"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("dann", "const"):
            raise ValueError(f"lambda schedule kind must be dann or const, got {self.kind!r}")

    def at(self, progress: float) -> float:
        return lambda_schedule(progress, self.kind, self.value)

    @classmethod
    def parse(cls, text: str) -> "LambdaSchedule":
        if text == "dann":
            return cls("dann")
        if text.startswith("const:"):
            return cls("const", float(text.split(":", 1)[1]))
        raise ValueError(f"cannot parse lambda schedule {text!r} (dann | const:VALUE)")

    def spec(self) -> str:
        return "dann" if self.kind == "dann" else f"const:{self.value}"


def lambda_schedule(progress: float, kind: str = "dann", value: float = 1.0) -> float:
    p = min(max(progress, 0.0), 1.0)
    if kind == "dann":
        return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
    if kind == "const":
        return value
    raise ValueError(f"unknown lambda schedule kind {kind!r}")


@dataclass
class LossReport:
    """Scalars of one adversarial step; L_D is exactly L_d - L_g as reported."""
    l_c: float
    l_d: float
    l_g: float
    l_dd: float
    lam: float
    site_gram: list[float] = field(default_factory=list)
    acc_domain: float = float("nan")

    def to_record(self, iteration: int) -> dict:
        acc = None if math.isnan(self.acc_domain) else self.acc_domain
        return {"iter": iteration, "L_c": self.l_c, "L_d": self.l_d,
                "L_g": self.l_g, "L_D": self.l_dd, "lambda": self.lam,
                "acc_domain": acc}


def combined_objective(l_d: Optional[Tensor], l_g: Optional[Tensor]) -> Optional[Tensor]:
    """L_D = L_d - L_g with absent terms treated as zero."""
    if l_d is not None and l_g is not None:
        return sub(l_d, l_g)
    if l_d is not None:
        return l_d
    if l_g is not None:
        return scale(l_g, -1.0)
    return None


GROUP_ORDER = ("head", "enc", "afa", "disc")


def adversarial_step(tape: Tape, l_c: Tensor, l_d: Optional[Tensor],
                     l_g: Optional[Tensor], leaves: Mapping[str, Tensor],
                     groups: Mapping[str, dict[str, np.ndarray]],
                     lam: float, states: Mapping[str, AdamState],
                     iteration: int = 0, afa_from_lc: bool = False,
                     freeze: frozenset = frozenset(),
                     site_gram: Optional[list[float]] = None,
                     acc_domain: float = float("nan")) -> LossReport:
    """Route signed gradients to each parameter group and take one Adam step.

    Effective gradients: head gets dL_c; enc gets dL_c - lam * dL_D; afa gets
    lam * dL_D (or dL_c under the lc ablation mode, with no gram route); disc
    gets lam * dL_D. With lam == 0 the afa/disc steps are skipped entirely so
    their Adam moments stay untouched.

    Head and encoder gradients come from one sweep of the combined root
    L_c - lam * L_D; the perturbation/discriminator gradients come from a
    second sweep of L_D pruned to those parameters.
    """
    for name, t in (("L_c", l_c), ("L_d", l_d), ("L_g", l_g)):
        if t is not None and not np.isfinite(t.data):
            raise NonFiniteLossError(name, iteration)
    l_dd = combined_objective(l_d, l_g)

    adversarial = l_dd is not None and lam != 0.0
    root = sub(l_c, scale(l_dd, lam)) if adversarial else l_c
    grads_main = tape.backward(root)

    adv_ids = {leaves[name].tape_id for group in ("afa", "disc")
               for name in groups.get(group, ())}
    if adversarial and not afa_from_lc:
        grads_adv = tape.backward(l_dd, wanted=adv_ids) if adv_ids else None
    elif adversarial and groups.get("disc"):
        disc_ids = {leaves[name].tape_id for name in groups["disc"]}
        grads_adv = tape.backward(l_dd, wanted=disc_ids)
    else:
        grads_adv = None
    grads_lc_afa = None
    if afa_from_lc and groups.get("afa"):
        afa_ids = {leaves[name].tape_id for name in groups["afa"]}
        grads_lc_afa = tape.backward(l_c, wanted=afa_ids)

    def grad_of(sweep, name):
        return sweep[leaves[name].tape_id]

    for group in GROUP_ORDER:
        params = groups.get(group)
        if not params or group in freeze:
            continue
        eff: dict[str, np.ndarray] = {}
        if group in ("head", "enc"):
            for name in params:
                eff[name] = grad_of(grads_main, name)
        elif group == "afa":
            if afa_from_lc:
                for name in params:
                    eff[name] = grad_of(grads_lc_afa, name)
            elif grads_adv is not None:
                for name in params:
                    eff[name] = lam * grad_of(grads_adv, name)
            else:
                continue  # lam gated: no step, moments untouched
        elif group == "disc":
            if grads_adv is None:
                continue
            for name in params:
                eff[name] = lam * grad_of(grads_adv, name)
        adam_step(params, eff, states[group])

    l_d_val = float(l_d.data) if l_d is not None else 0.0
    l_g_val = float(l_g.data) if l_g is not None else 0.0
    l_dd_val = float(l_dd.data) if l_dd is not None else 0.0
    return LossReport(float(l_c.data), l_d_val, l_g_val, l_dd_val, lam,
                      site_gram or [], acc_domain)
