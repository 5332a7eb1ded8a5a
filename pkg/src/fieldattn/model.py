"""Post-norm transformer encoder whose self-attention takes an additive bias
matrix, plus a linear per-candidate classification head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import CandidateSpan, OccurrenceGroup, ParsedSentence
from .field import RecoupleConfig, build_bias

FORMAT_VERSION = 1
PAD, UNK = "<pad>", "<unk>"


class CandidateDropped(ValueError):
    """The candidate sits beyond the encoder's maximum length."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_labels: int
    layers: int = 2
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    max_length: int = 128
    # None biases every layer; otherwise the listed layer indices only
    bias_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("vocab_size", "num_labels", "layers", "d_model", "heads", "d_ff", "max_length"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.bias_layers is not None:
            object.__setattr__(self, "bias_layers", tuple(int(i) for i in self.bias_layers))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def biased(self, layer: int) -> bool:
        return self.bias_layers is None or layer in self.bias_layers


class Vocab:
    def __init__(self, words):
        self.words = [PAD, UNK] + [w for w in words if w not in (PAD, UNK)]
        self.index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_sentences(cls, sentences):
        return cls(sorted({t.surface for s in sentences for t in s.tokens}))

    def __len__(self):
        return len(self.words)

    def encode(self, surfaces) -> np.ndarray:
        unk = self.index[UNK]
        return np.array([self.index.get(w, unk) for w in surfaces], dtype=np.intp)


@dataclass
class EncoderParams:
    config: ModelConfig
    vocab: Vocab
    tensors: dict[str, ad.Tensor] = field(default_factory=dict)

    def __getitem__(self, name) -> ad.Tensor:
        return self.tensors[name]

    def values(self):
        return self.tensors.values()

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> EncoderParams:
        return EncoderParams(
            self.config,
            self.vocab,
            {k: ad.Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
        )


@dataclass(frozen=True)
class LabelDistribution:
    probs: np.ndarray
    logits: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_length, d)}
    for l in range(cfg.layers):
        p = f"layer{l}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + name] = (d, d)
            shapes[p + "b" + name[1]] = (d,)
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "ff1.w"] = (d, f)
        shapes[p + "ff1.b"] = (f,)
        shapes[p + "ff2.w"] = (f, d)
        shapes[p + "ff2.b"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
    shapes["cls.w"] = (d, cfg.num_labels)
    shapes["cls.b"] = (cfg.num_labels,)
    return shapes


def init_params(cfg: ModelConfig, vocab: Vocab, seed: int = 0) -> EncoderParams:
    if len(vocab) != cfg.vocab_size:
        raise ValueError(f"vocab has {len(vocab)} entries, config expects {cfg.vocab_size}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("emb"):
            data = rng.normal(0.0, 1.0, shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        tensors[name] = ad.Tensor(data, requires_grad=True)
    return EncoderParams(cfg, vocab, tensors)


def _swap_last(x: ad.Tensor) -> ad.Tensor:
    axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    return ad.transpose(x, axes)


def key_mask(pad_mask) -> np.ndarray | None:
    """Additive key mask (0 for real tokens, -inf for padding) from a boolean validity mask."""
    if pad_mask is None:
        return None
    valid = np.asarray(pad_mask, dtype=bool)
    return np.where(valid, 0.0, -np.inf)[..., None, :]


def biased_attention(Q, K, V, G=None, pad_mask=None) -> ad.Tensor:
    """softmax(Q K^T / sqrt(d) + G + mask) V over the last two axes.

    ``G`` is a constant bias broadcastable to the score matrix; ``pad_mask``
    is a boolean array over keys (True = real token).
    """
    Q, K, V = ad.as_tensor(Q), ad.as_tensor(K), ad.as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ad.ShapeError(f"attention: shape mismatch Q{Q.shape} K{K.shape} V{V.shape}")
    scores = ad.scale(ad.matmul(Q, _swap_last(K)), 1.0 / math.sqrt(Q.shape[-1]))
    if G is not None:
        scores = ad.add_broadcast(scores, np.asarray(getattr(G, "values", G), dtype=np.float64))
    return ad.matmul(ad.softmax_rows(scores, key_mask(pad_mask)), V)


def _linear(x, w, b):
    return ad.add_broadcast(ad.matmul(x, w), b)


def encode(params: EncoderParams, ids, G=None, lengths=None, keep_hidden=False):
    """Encode a padded batch of token ids.

    ids: (B, n) integer array; G: (B, n, n) constant bias or None;
    lengths: (B,) real lengths for padding masks.  Returns the final hidden
    states (B, n, d), plus the per-layer list when ``keep_hidden``.
    """
    cfg = params.config
    ids = np.asarray(ids, dtype=np.intp)
    B, n = ids.shape
    if n > cfg.max_length:
        raise ValueError(f"sequence length {n} exceeds max_length {cfg.max_length}")
    h, dk = cfg.heads, cfg.head_dim
    valid = None
    if lengths is not None:
        valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
        valid = valid[:, None, :]  # broadcast over heads
    bias = None
    if G is not None:
        bias = np.asarray(G, dtype=np.float64)[:, None, :, :]

    x = ad.add_broadcast(ad.gather_row(params["tok_emb"], ids), ad.gather_row(params["pos_emb"], np.arange(n)))
    hidden = []
    for l in range(cfg.layers):
        p = f"layer{l}."

        def heads(t):
            return ad.transpose(ad.reshape(t, (B, n, h, dk)), (0, 2, 1, 3))

        q = heads(_linear(x, params[p + "wq"], params[p + "bq"]))
        k = heads(_linear(x, params[p + "wk"], params[p + "bk"]))
        v = heads(_linear(x, params[p + "wv"], params[p + "bv"]))
        att = biased_attention(q, k, v, bias if cfg.biased(l) else None, valid)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, n, cfg.d_model))
        att = _linear(att, params[p + "wo"], params[p + "bo"])
        x = ad.layer_norm(ad.add(x, att), params[p + "ln1.g"], params[p + "ln1.b"])
        ff = _linear(ad.relu(_linear(x, params[p + "ff1.w"], params[p + "ff1.b"])), params[p + "ff2.w"], params[p + "ff2.b"])
        x = ad.layer_norm(ad.add(x, ff), params[p + "ln2.g"], params[p + "ln2.b"])
        hidden.append(x)
    return (x, hidden) if keep_hidden else x


def forward_batch(params: EncoderParams, ids, positions, G=None, lengths=None):
    """Logits and probabilities (both (B, C) tensors) for one candidate per batch row."""
    x = encode(params, ids, G, lengths)
    logits = _linear(ad.select_positions(x, positions), params["cls.w"], params["cls.b"])
    return logits, ad.softmax_rows(logits)


def _distribution(logits: ad.Tensor, probs: ad.Tensor, row: int) -> LabelDistribution:
    return LabelDistribution(probs.data[row].copy(), logits.data[row].copy())


def forward(params: EncoderParams, s: ParsedSentence, candidate: CandidateSpan, G=None) -> LabelDistribution:
    n = len(s)
    limit = params.config.max_length
    if candidate.position >= limit:
        raise CandidateDropped(f"candidate at {candidate.position} beyond max_length {limit}")
    n_kept = min(n, limit)
    ids = params.vocab.encode([t.surface for t in s.tokens[:n_kept]])[None, :]
    bias = None
    if G is not None:
        bias = np.asarray(getattr(G, "values", G), dtype=np.float64)[:n_kept, :n_kept][None]
    logits, probs = forward_batch(params, ids, [candidate.position], bias)
    return _distribution(logits, probs, 0)


def forward_group(params: EncoderParams, s: ParsedSentence, group: OccurrenceGroup, cfg: RecoupleConfig):
    """One pass per occurrence, each with the bias centred on that occurrence."""
    if group.n < 1:
        raise ValueError("empty occurrence group")
    out = []
    for pos in group.positions:
        cand = s.candidate_at(pos, group.kind)
        out.append(forward(params, s, cand, build_bias(s, cand, cfg)))
    return out


# ---------------------------------------------------------------- checkpoints


def checkpoint_dict(params: EncoderParams, extra: dict | None = None) -> dict:
    cfg = asdict(params.config)
    if cfg["bias_layers"] is not None:
        cfg["bias_layers"] = list(cfg["bias_layers"])
    return {
        "format_version": FORMAT_VERSION,
        "model_config": cfg,
        "vocab": params.vocab.words,
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }


def dumps_checkpoint(params: EncoderParams, extra: dict | None = None) -> str:
    return json.dumps(checkpoint_dict(params, extra), sort_keys=True)


def loads_checkpoint(text: str) -> tuple[EncoderParams, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    try:
        cfg = ModelConfig(**doc["model_config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model_config: {exc}") from None
    vocab = Vocab(doc["vocab"][2:])
    if len(vocab) != cfg.vocab_size or vocab.words != doc["vocab"]:
        raise CheckpointError(f"vocab of size {len(doc['vocab'])} does not match vocab_size {cfg.vocab_size}")
    expected = param_shapes(cfg)
    stored = doc["params"]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    tensors = {}
    for name, shape in expected.items():
        rec = stored[name]
        if tuple(rec["shape"]) != shape or len(rec["data"]) != math.prod(shape):
            raise CheckpointError(f"parameter {name}: stored shape {rec['shape']} but config implies {list(shape)}")
        data = np.array(rec["data"], dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"parameter {name} has non-finite values")
        tensors[name] = ad.Tensor(data, requires_grad=True)
    return EncoderParams(cfg, vocab, tensors), doc.get("extra", {})
