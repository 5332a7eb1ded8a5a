"""Training loop, splits, P/R/F1 evaluation and the ablation ladder."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import NULL_LABEL, ConfigError, ParsedSentence, group_occurrences, truncate
from .field import BiasScope, RecoupleConfig, Strategy, build_bias
from .loss import PassLayout, Regularization, batch_objective
from .model import EncoderParams, ModelConfig, Vocab, forward_batch, init_params

log = logging.getLogger(__name__)

# (name, strategy, regularization) rows of the ablation table
LADDER = (
    ("baseline", Strategy.NONE, Regularization.NONE),
    ("+gau", Strategy.GAU, Regularization.NONE),
    ("+mul", Strategy.MUL, Regularization.NONE),
    ("+gmm", Strategy.GMM, Regularization.NONE),
    ("+fusion", Strategy.FUSION, Regularization.NONE),
    ("+wa", Strategy.FUSION, Regularization.WA),
    ("+wa_logits", Strategy.FUSION, Regularization.WA_AND_LOGITS),
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    train_fraction: float = 1.0
    recouple: RecoupleConfig = field(default_factory=RecoupleConfig)
    regularization: Regularization = Regularization.NONE
    weight_decay: float = 0.01
    nll_weight: float = 1.0
    wa_weight: float = 1.0
    layers: int = 2
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    max_length: int = 128
    bias_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "regularization", Regularization(self.regularization))
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three values summing to 1, got {self.split_ratios}")
        if min(self.split_ratios) < 0:
            raise ConfigError("split ratios must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def model_config(self, vocab_size: int, num_labels: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            num_labels=num_labels,
            layers=self.layers,
            d_model=self.d_model,
            heads=self.heads,
            d_ff=self.d_ff,
            max_length=self.max_length,
            bias_layers=self.bias_layers,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["regularization"] = self.regularization.value
        d["recouple"] = {
            "strategy": self.recouple.strategy.value,
            "alpha": self.recouple.alpha,
            "beta": self.recouple.beta,
            "bias_scope": self.recouple.bias_scope.value,
        }
        d["split_ratios"] = list(self.split_ratios)
        if self.bias_layers is not None:
            d["bias_layers"] = list(self.bias_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "recouple" in d and isinstance(d["recouple"], dict):
            d["recouple"] = RecoupleConfig(**d["recouple"])
        if d.get("bias_layers") is not None:
            d["bias_layers"] = tuple(d["bias_layers"])
        return cls(**d)


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_label: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def score(gold, pred, null_label: int = NULL_LABEL) -> EvalResult:
    """Micro P/R/F1 over non-null labels."""
    per_label: dict[int, dict[str, int]] = {}

    def bump(label, key):
        per_label.setdefault(int(label), {"tp": 0, "fp": 0, "fn": 0})[key] += 1

    for g, p in zip(gold, pred):
        if p == g:
            if g != null_label:
                bump(g, "tp")
            continue
        if p != null_label:
            bump(p, "fp")
        if g != null_label:
            bump(g, "fn")
    tp = sum(c["tp"] for c in per_label.values())
    fp = sum(c["fp"] for c in per_label.values())
    fn = sum(c["fn"] for c in per_label.values())
    p, r, f1 = prf(tp, fp, fn)
    return EvalResult(p, r, f1, tp, fp, fn, {k: per_label[k] for k in sorted(per_label)})


def split(corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffled train/dev/test partition by sentence."""
    if not corpus:
        raise ConfigError("cannot split an empty corpus")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three values summing to 1, got {ratios}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_dev = min(int(round(ratios[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train : n_train + n_dev], order[n_train + n_dev :])
    return tuple([corpus[i] for i in sorted(p)] for p in parts)


# ------------------------------------------------------------------ batching


@dataclass(frozen=True)
class Mention:
    """One occurrence group: ids shared by its passes, one bias per pass."""

    sentence: int
    ids: np.ndarray
    positions: tuple[int, ...]
    golds: tuple[int, ...]
    biases: tuple[np.ndarray, ...]


def prepare(sentences, vocab: Vocab, recouple: RecoupleConfig, max_length: int = 128) -> list[Mention]:
    mentions = []
    for si, s in enumerate(sentences):
        s = truncate(s, max_length)
        keep = min(len(s), max_length)
        ids = vocab.encode([t.surface for t in s.tokens[:keep]])
        for group in group_occurrences(s):
            cands = [s.candidate_at(p, group.kind) for p in group.positions]
            biases = tuple(build_bias(s, c, recouple).values[:keep, :keep] for c in cands)
            mentions.append(
                Mention(si, ids, group.positions, tuple(c.gold_label for c in cands), biases)
            )
    return mentions


@dataclass(frozen=True)
class Batch:
    ids: np.ndarray
    positions: np.ndarray
    bias: np.ndarray
    lengths: np.ndarray
    layout: PassLayout


def collate(mentions) -> Batch:
    rows = [(m.ids, p, b) for m in mentions for p, b in zip(m.positions, m.biases)]
    n = max(len(ids) for ids, _, _ in rows)
    P = len(rows)
    ids = np.zeros((P, n), dtype=np.intp)
    bias = np.zeros((P, n, n))
    lengths = np.zeros(P, dtype=np.intp)
    for r, (tok, _, b) in enumerate(rows):
        ids[r, : len(tok)] = tok
        bias[r, : len(tok), : len(tok)] = b
        lengths[r] = len(tok)
    positions = np.array([p for _, p, _ in rows], dtype=np.intp)
    layout = PassLayout.from_groups([m.golds for m in mentions])
    return Batch(ids, positions, bias, lengths, layout)


def batches(mentions, batch_size: int, rng=None):
    order = np.arange(len(mentions)) if rng is None else rng.permutation(len(mentions))
    for start in range(0, len(order), batch_size):
        yield start // batch_size, collate([mentions[i] for i in order[start : start + batch_size]])


# ----------------------------------------------------------------- optimiser


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[dict]
    train: list[ParsedSentence]
    dev: list[ParsedSentence]
    test: list[ParsedSentence]


def num_labels_of(corpus) -> int:
    return max((c.gold_label for s in corpus for c in s.candidates), default=0) + 1


def fit(config: TrainConfig, train_set, dev_set=(), num_labels=None, on_epoch=None):
    """Train a fresh encoder on ``train_set``; returns (params, history)."""
    num_labels = num_labels or num_labels_of(train_set)
    vocab = Vocab.from_sentences(train_set)
    params = init_params(config.model_config(len(vocab), num_labels), vocab, config.seed)
    mentions = prepare(train_set, vocab, config.recouple, config.max_length)
    dev_mentions = prepare(dev_set, vocab, config.recouple, config.max_length) if dev_set else []
    opt = AdamW(params.values(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(3)
        count = 0
        for b, batch in batches(mentions, config.batch_size, rng):
            params.zero_grad()
            logits, probs = forward_batch(params, batch.ids, batch.positions, batch.bias, batch.lengths)
            total, report = batch_objective(
                logits,
                probs,
                batch.layout,
                config.regularization,
                config.nll_weight,
                config.wa_weight,
            )
            if not math.isfinite(report.total):
                raise TrainingDiverged(f"non-finite loss {report.total} at epoch {epoch}, batch {b}")
            total.backward()
            opt.step()
            m = batch.layout.n_mentions
            sums += m * np.array([report.nll, report.wa, report.total])
            count += m
        dev = _evaluate_mentions(params, dev_mentions, dev_set, config.regularization) if dev_set else None
        record = {
            "epoch": epoch,
            "nll": sums[0] / max(count, 1),
            "wa": sums[1] / max(count, 1),
            "total": sums[2] / max(count, 1),
            "dev_p": dev.precision if dev else None,
            "dev_r": dev.recall if dev else None,
            "dev_f1": dev.f1 if dev else None,
        }
        history.append(record)
        log.info("epoch %d: %s", epoch, json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
    return params, history


def train_run(config: TrainConfig, corpus, on_epoch=None) -> TrainResult:
    train_set, dev_set, test_set = split(corpus, config.split_ratios, config.seed)
    if config.train_fraction < 1.0:
        k = max(1, int(round(config.train_fraction * len(train_set))))
        pick = np.random.default_rng(config.seed + 2).permutation(len(train_set))[:k]
        train_set = [train_set[i] for i in sorted(pick)]
    params, history = fit(config, train_set, dev_set, num_labels_of(corpus), on_epoch)
    return TrainResult(params, history, train_set, dev_set, test_set)


def predict_mentions(params: EncoderParams, mentions, variant=Regularization.NONE, batch_size=64):
    """Predicted label per pass, in mention order.

    Under WA_AND_LOGITS every occurrence of a group takes the prediction of
    the group's mean logits; otherwise each pass predicts for itself.
    """
    variant = Regularization(variant)
    preds = []
    with ad.no_grad():
        for start in range(0, len(mentions), batch_size):
            chunk = mentions[start : start + batch_size]
            batch = collate(chunk)
            logits, _ = forward_batch(params, batch.ids, batch.positions, batch.bias, batch.lengths)
            z = logits.data
            if variant is Regularization.WA_AND_LOGITS:
                lay = batch.layout
                fused = np.zeros((lay.n_mentions, z.shape[1]))
                np.add.at(fused, lay.mention, z)
                fused /= lay.sizes()[:, None]
                preds.extend(np.argmax(fused[lay.mention], axis=1).tolist())
            else:
                preds.extend(np.argmax(z, axis=1).tolist())
    return preds


def _evaluate_mentions(params, mentions, sentences, variant) -> EvalResult:
    if not mentions:
        return score([], [])
    gold = [g for m in mentions for g in m.golds]
    return score(gold, predict_mentions(params, mentions, variant))


def evaluate(params: EncoderParams, corpus, strategy: RecoupleConfig, variant=Regularization.NONE) -> EvalResult:
    mentions = prepare(corpus, params.vocab, strategy, params.config.max_length)
    return _evaluate_mentions(params, mentions, corpus, variant)


# ------------------------------------------------------------------ ablation


def rung_config(base: TrainConfig, strategy, variant, seed: int) -> TrainConfig:
    recouple = dataclasses.replace(base.recouple, strategy=Strategy(strategy))
    return dataclasses.replace(base, recouple=recouple, regularization=Regularization(variant), seed=seed)


def ablation_run(base: TrainConfig, corpus, seeds, rungs=LADDER, on_run=None):
    """Test-set F1 (percent) for each ladder rung and seed.

    Returns (rows, runs): ``rows`` are the aggregated table records, ``runs``
    maps rung name to the list of per-seed F1 values.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    runs: dict[str, list[float]] = {}
    rows = []
    for name, strategy, variant in rungs:
        scores = []
        for seed in seeds:
            cfg = rung_config(base, strategy, variant, seed)
            result = train_run(cfg, corpus)
            ev = evaluate(result.params, result.test, cfg.recouple, cfg.regularization)
            scores.append(100.0 * ev.f1)
            if on_run is not None:
                on_run(name, seed, ev)
        runs[name] = scores
        rows.append(
            {
                "strategy": Strategy(strategy).value,
                "variant": Regularization(variant).value,
                "seed_count": len(seeds),
                "mean_f1": float(np.mean(scores)),
                "std_f1": float(np.std(scores)),
            }
        )
    return rows, runs


ABLATION_COLUMNS = ("strategy", "variant", "seed_count", "mean_f1", "std_f1")


def ablation_csv(rows) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{row[k]:.4f}" if isinstance(row[k], float) else row[k]) for k in ABLATION_COLUMNS})
    return buf.getvalue()

