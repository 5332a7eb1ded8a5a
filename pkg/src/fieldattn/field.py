"""Syntactic event fields and the additive attention biases built on them.

Four bias families are provided, all functions of linear token positions:

* ``gau``    a single Gaussian log-kernel around the candidate,
* ``mul``    the candidate kernel plus the product-of-Gaussians kernel of all
             identical occurrences,
* ``gmm``    the log density of a mixture over the candidate and the other
             identical occurrences,
* ``fusion`` the elementwise mean of ``mul`` and ``gmm``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .corpus import CandidateSpan, ParsedSentence, group_occurrences, matching_key

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class Strategy(str, enum.Enum):
    NONE = "none"
    GAU = "gau"
    MUL = "mul"
    GMM = "gmm"
    FUSION = "fusion"


class BiasScope(str, enum.Enum):
    CENTRAL_ROW = "central_row"
    ALL_ROWS = "all_rows"


@dataclass(frozen=True)
class FieldSpec:
    center: int
    field_size: float

    def __post_init__(self):
        if not self.field_size >= 1:
            raise ValueError(f"field_size must be >= 1, got {self.field_size}")
        if self.center < 0:
            raise ValueError(f"center must be >= 0, got {self.center}")

    @property
    def sigma(self) -> float:
        return self.field_size / 2.0


@dataclass(frozen=True)
class RecoupleConfig:
    strategy: Strategy = Strategy.GAU
    alpha: float = 0.5
    beta: float = 0.5
    bias_scope: BiasScope = BiasScope.CENTRAL_ROW

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "bias_scope", BiasScope(self.bias_scope))
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")
        if self.strategy in (Strategy.GMM, Strategy.FUSION) and self.alpha + self.beta > 1 + 1e-9:
            raise ValueError(f"mixture weights alpha + beta = {self.alpha + self.beta} exceed 1")


@dataclass(frozen=True)
class BiasMatrix:
    values: np.ndarray
    variant: Strategy

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def field_size(s: ParsedSentence, center: int) -> int:
    """Largest linear offset from ``center`` to any 1-hop dependency neighbour (1 if none)."""
    if not 0 <= center < len(s):
        raise IndexError(f"center {center} outside sentence of length {len(s)}")
    offsets = [abs(j - center) for j in s.neighbors(center)]
    return max(offsets, default=1)


def field_spec(s: ParsedSentence, center: int) -> FieldSpec:
    return FieldSpec(center, field_size(s, center))


def _place(n: int, f: FieldSpec, row: np.ndarray, scope: BiasScope) -> np.ndarray:
    if not f.center < n:
        raise IndexError(f"center {f.center} outside sentence of length {n}")
    scope = BiasScope(scope)
    if scope is BiasScope.ALL_ROWS:
        return np.tile(row, (n, 1))
    out = np.zeros((n, n))
    out[f.center] = row
    return out


def gau_row(n: int, f: FieldSpec) -> np.ndarray:
    j = np.arange(n, dtype=np.float64)
    return -((j - f.center) ** 2) / (2.0 * f.sigma**2)


def gau_bias(n: int, f: FieldSpec, scope=BiasScope.CENTRAL_ROW) -> BiasMatrix:
    return BiasMatrix(_place(n, f, gau_row(n, f), scope), Strategy.GAU)


def mul_recouple(group) -> tuple[float, float]:
    """Mean and deviation of the (renormalised) product of the member Gaussians."""
    if not group:
        raise ValueError("mul_recouple needs at least one field")
    precision = np.array([1.0 / f.sigma**2 for f in group])
    centers = np.array([f.center for f in group], dtype=np.float64)
    var = 1.0 / precision.sum()
    mu = var * float((precision * centers).sum())
    return mu, math.sqrt(var)


def mul_row(n: int, f: FieldSpec, group) -> np.ndarray:
    mu, sd = mul_recouple(group)
    j = np.arange(n, dtype=np.float64)
    return gau_row(n, f) - (j - mu) ** 2 / (2.0 * sd**2)


def mul_bias(n: int, f: FieldSpec, group, scope=BiasScope.CENTRAL_ROW) -> BiasMatrix:
    return BiasMatrix(_place(n, f, mul_row(n, f, group), scope), Strategy.MUL)


def _split_group(f: FieldSpec, group):
    members = list(group)
    if f not in members:
        raise ValueError(f"{f} is not a member of its occurrence group")
    members.remove(f)
    return members


def logsumexp(terms: np.ndarray, axis=0) -> np.ndarray:
    top = terms.max(axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.squeeze(top, axis) + np.log(np.exp(terms - top).sum(axis=axis))


def gmm_row(n: int, f: FieldSpec, group, alpha: float, beta: float) -> np.ndarray:
    others = _split_group(f, group)
    comps = [(alpha, f)]
    if others:
        bk = beta / max(len(others), 1)
        comps += [(bk, g) for g in others]
    comps = [(w, g) for w, g in comps if w > 0]
    if not comps:
        raise ValueError("all mixture weights are zero")
    j = np.arange(n, dtype=np.float64)
    terms = np.stack(
        [
            math.log(w) - LOG_SQRT_2PI - math.log(g.sigma) - (j - g.center) ** 2 / (2.0 * g.sigma**2)
            for w, g in comps
        ]
    )
    return logsumexp(terms, axis=0)


def gmm_bias(n: int, f: FieldSpec, group, cfg: RecoupleConfig, scope=None) -> BiasMatrix:
    scope = cfg.bias_scope if scope is None else scope
    return BiasMatrix(_place(n, f, gmm_row(n, f, group, cfg.alpha, cfg.beta), scope), Strategy.GMM)


def fusion_bias(n: int, f: FieldSpec, group, cfg: RecoupleConfig, scope=None) -> BiasMatrix:
    scope = cfg.bias_scope if scope is None else scope
    row = 0.5 * (mul_row(n, f, group) + gmm_row(n, f, group, cfg.alpha, cfg.beta))
    return BiasMatrix(_place(n, f, row, scope), Strategy.FUSION)


def occurrence_fields(s: ParsedSentence, candidate: CandidateSpan) -> list[FieldSpec]:
    """Fields of every candidate sharing ``candidate``'s matching key, in position order."""
    key = matching_key(s, candidate)
    for group in group_occurrences(s):
        if (group.key, group.kind) == key and candidate.position in group.positions:
            return [field_spec(s, p) for p in group.positions]
    raise ValueError(f"candidate at {candidate.position} is not part of sentence {s.id}")


def build_bias(s: ParsedSentence, candidate: CandidateSpan, cfg: RecoupleConfig) -> BiasMatrix:
    n = len(s)
    if cfg.strategy is Strategy.NONE:
        return BiasMatrix(np.zeros((n, n)), Strategy.NONE)
    f = field_spec(s, candidate.position)
    if cfg.strategy is Strategy.GAU:
        return gau_bias(n, f, cfg.bias_scope)
    group = occurrence_fields(s, candidate)
    if cfg.strategy is Strategy.MUL:
        return mul_bias(n, f, group, cfg.bias_scope)
    if cfg.strategy is Strategy.GMM:
        return gmm_bias(n, f, group, cfg)
    return fusion_bias(n, f, group, cfg)


def bias_record(s: ParsedSentence, candidate: CandidateSpan, cfg: RecoupleConfig) -> dict:
    """One bias-dump record (dense row-major matrix)."""
    g = build_bias(s, candidate, cfg)
    return {
        "sentence_id": s.id,
        "position": candidate.position,
        "kind": candidate.kind,
        "strategy": cfg.strategy.value,
        "bias_scope": cfg.bias_scope.value,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "n": g.n,
        "matrix": g.values.tolist(),
    }
