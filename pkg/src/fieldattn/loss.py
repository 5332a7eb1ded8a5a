"""Consistency-regularised objective over the passes of one mention.

A mention with N identical candidates is encoded N times, each pass biased
toward a different occurrence.  The objective averages the passes' negative
log-likelihood and adds the mean pairwise 1-Wasserstein distance between
their label distributions.  Labels are unordered, so the ground cost is 0/1
and the distance reduces to total variation.

Two layers live here: plain numpy functions over ``LabelDistribution`` lists
(reporting, oracles) and :func:`batch_objective`, which builds the same
quantities as a differentiable graph over a batch of mentions.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import LabelDistribution

PROB_FLOOR = 1e-12
SMOOTH_EPS = 1e-12


class Regularization(str, enum.Enum):
    NONE = "none"
    WA = "wa"
    WA_AND_LOGITS = "wa_logits"


@dataclass(frozen=True)
class LossReport:
    nll: float
    wa: float
    total: float
    pass_count: int
    # extra NLL of the mean-logit prediction (WA_AND_LOGITS only)
    logit_nll: float = 0.0


def _probs(d) -> np.ndarray:
    return np.asarray(getattr(d, "probs", d), dtype=np.float64)


def wa_distance(p, q) -> float:
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ValueError(f"label distributions differ in size: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def loss_wa(dists) -> float:
    if not dists:
        raise ValueError("loss_wa needs at least one distribution")
    pairs = list(itertools.combinations(dists, 2))
    if not pairs:
        return 0.0
    return sum(wa_distance(p, q) for p, q in pairs) / len(pairs)


def loss_nll(dists, gold: int) -> float:
    if not dists:
        raise ValueError("loss_nll needs at least one distribution")
    size = len(_probs(dists[0]))
    if not 0 <= gold < size:
        raise ValueError(f"gold label {gold} outside label set of size {size}")
    return -sum(np.log(max(_probs(d)[gold], PROB_FLOOR)) for d in dists) / len(dists)


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def fuse_logits(dists) -> LabelDistribution:
    """Softmax of the mean of the passes' logits."""
    if not dists:
        raise ValueError("fuse_logits needs at least one distribution")
    logits = np.mean([np.asarray(d.logits, dtype=np.float64) for d in dists], axis=0)
    return LabelDistribution(_softmax(logits), logits)


def loss_total(dists, gold: int, variant=Regularization.WA, nll_weight=1.0, wa_weight=1.0) -> LossReport:
    variant = Regularization(variant)
    nll = loss_nll(dists, gold)
    wa = loss_wa(dists) if variant is not Regularization.NONE else 0.0
    extra = loss_nll([fuse_logits(dists)], gold) if variant is Regularization.WA_AND_LOGITS else 0.0
    total = nll_weight * nll + wa_weight * wa + nll_weight * extra
    return LossReport(nll, wa, total, len(dists), extra)


# ------------------------------------------------------------ graph objective


@dataclass(frozen=True)
class PassLayout:
    """How the P passes of a batch are grouped into M mentions."""

    mention: np.ndarray  # (P,) mention index of each pass
    gold: np.ndarray  # (P,) gold label of each pass

    @classmethod
    def from_groups(cls, golds_per_mention):
        mention = np.concatenate([np.full(len(g), m) for m, g in enumerate(golds_per_mention)])
        gold = np.concatenate([np.asarray(g, dtype=np.intp) for g in golds_per_mention])
        return cls(mention.astype(np.intp), gold)

    @property
    def n_mentions(self) -> int:
        return int(self.mention.max()) + 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.mention, minlength=self.n_mentions)

    def pairs(self):
        left, right, mention = [], [], []
        for m in range(self.n_mentions):
            idx = np.flatnonzero(self.mention == m)
            for j, k in itertools.combinations(idx, 2):
                left.append(j)
                right.append(k)
                mention.append(m)
        return np.array(left, dtype=np.intp), np.array(right, dtype=np.intp), np.array(mention, dtype=np.intp)


def smoothed_tv(p: ad.Tensor, q: ad.Tensor, eps: float = SMOOTH_EPS) -> ad.Tensor:
    """Row-wise total variation with |x| replaced by sqrt(x^2 + eps) - sqrt(eps)."""
    diff = ad.sub(p, q)
    smooth = ad.add_const(ad.sqrt(ad.add_const(ad.mul(diff, diff), eps)), -np.sqrt(eps))
    return ad.scale(ad.sum(smooth, axis=-1), 0.5)


def batch_objective(
    logits: ad.Tensor,
    probs: ad.Tensor,
    layout: PassLayout,
    variant=Regularization.WA,
    nll_weight: float = 1.0,
    wa_weight: float = 1.0,
    eps: float = SMOOTH_EPS,
):
    """Mean per-mention total loss as a graph, plus a LossReport of batch means."""
    variant = Regularization(variant)
    M = layout.n_mentions
    sizes = layout.sizes()
    P = len(layout.mention)
    pass_w = 1.0 / (sizes[layout.mention] * M)

    logp = ad.log(probs, floor=PROB_FLOOR)
    nll = ad.scale(ad.sum(ad.mul_const(ad.take(logp, np.arange(P), layout.gold), pass_w)), -1.0)
    total = ad.scale(nll, nll_weight)

    wa_value = 0.0
    left, right, pm = layout.pairs()
    if variant is not Regularization.NONE and len(left):
        pair_counts = np.bincount(pm, minlength=M)
        pair_w = 1.0 / (pair_counts[pm] * M)
        tv = smoothed_tv(ad.gather_row(probs, left), ad.gather_row(probs, right), eps)
        wa = ad.sum(ad.mul_const(tv, pair_w))
        wa_value = wa.item()
        total = ad.add(total, ad.scale(wa, wa_weight))

    logit_value = 0.0
    if variant is Regularization.WA_AND_LOGITS:
        avg = np.zeros((M, P))
        avg[layout.mention, np.arange(P)] = 1.0 / sizes[layout.mention]
        fused = ad.softmax_rows(ad.matmul(avg, logits))
        logf = ad.log(fused, floor=PROB_FLOOR)
        extra = ad.scale(ad.sum(ad.mul_const(ad.take(logf, layout.mention, layout.gold), pass_w)), -1.0)
        logit_value = extra.item()
        total = ad.add(total, ad.scale(extra, nll_weight))

    report = LossReport(nll.item(), wa_value, total.item(), P, logit_value)
    return total, report
