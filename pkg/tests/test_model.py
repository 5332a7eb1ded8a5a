import math

import numpy as np
import pytest

import fieldattn.autodiff as ad
from fieldattn.corpus import CandidateSpan, OccurrenceGroup, ParsedSentence, Token, group_occurrences
from fieldattn.field import RecoupleConfig, Strategy, build_bias
from fieldattn.model import (
    CandidateDropped,
    CheckpointError,
    ModelConfig,
    Vocab,
    biased_attention,
    checkpoint_dict,
    dumps_checkpoint,
    encode,
    forward,
    forward_batch,
    forward_group,
    init_params,
    loads_checkpoint,
)


def brute_attention(Q, K, V, G):
    n, d = Q.shape
    out = np.zeros((n, V.shape[1]))
    for i in range(n):
        scores = [sum(Q[i, a] * K[j, a] for a in range(d)) / math.sqrt(d) + G[i][j] for j in range(n)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        z = sum(w)
        for j in range(n):
            out[i] += w[j] / z * V[j]
    return out


def vanilla(Q, K, V):
    s = Q @ K.T / math.sqrt(Q.shape[1])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ V


def test_attention_hand_case():
    Q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    K = np.array([[0.5, -1.0], [2.0, 0.0], [0.0, 0.3]])
    V = np.array([[1.0, 2.0], [-1.0, 0.0], [0.0, 3.0]])
    G = np.array([[0.0, -0.5, -2.0], [0.0, 0.0, 0.0], [-1.0, 0.2, 0.0]])
    np.testing.assert_allclose(biased_attention(Q, K, V, G).data, brute_attention(Q, K, V, G), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_zero_bias_is_vanilla(seed):
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.normal(size=(6, 4)) for _ in range(3))
    out = biased_attention(Q, K, V, np.zeros((6, 6))).data
    np.testing.assert_allclose(out, vanilla(Q, K, V), atol=1e-12)
    np.testing.assert_allclose(biased_attention(Q, K, V).data, out, atol=1e-12)


def test_one_hot_row():
    rng = np.random.default_rng(1)
    Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
    G = np.zeros((4, 4))
    G[2, 1:] = -np.inf
    out = biased_attention(Q, K, V, G).data
    np.testing.assert_allclose(out[2], V[0], atol=1e-15)


def test_row_constants_do_not_change_attention():
    rng = np.random.default_rng(2)
    Q, K, V = (rng.normal(size=(5, 4)) for _ in range(3))
    G = rng.normal(size=(5, 5))
    shifted = G + rng.normal(scale=30, size=(5, 1))
    np.testing.assert_allclose(biased_attention(Q, K, V, shifted).data, biased_attention(Q, K, V, G).data, atol=1e-12)


def test_pad_mask_ignores_padding():
    rng = np.random.default_rng(3)
    Q, K, V = (rng.normal(size=(5, 2)) for _ in range(3))
    mask = np.array([True, True, True, False, False])
    out = biased_attention(Q, K, V, None, mask).data
    np.testing.assert_allclose(out[:3], vanilla(Q[:3], K[:3], V[:3]), atol=1e-12)


def test_attention_shape_error():
    with pytest.raises(ad.ShapeError):
        biased_attention(np.ones((3, 2)), np.ones((3, 4)), np.ones((3, 2)))


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, num_labels=2, d_model=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, num_labels=0)
    assert ModelConfig(vocab_size=5, num_labels=2).head_dim == 16


# ---- model-level tests on small sentences


def sentence(words, heads, cands, sid="t"):
    tokens = tuple(Token(i, w, h) for i, (w, h) in enumerate(zip(words, heads)))
    return ParsedSentence(tokens, tuple(cands), sid)


def small_model(sentences, num_labels=3, seed=0, **kw):
    vocab = Vocab.from_sentences(sentences)
    cfg = ModelConfig(vocab_size=len(vocab), num_labels=num_labels, **kw)
    return init_params(cfg, vocab, seed)


SENT = sentence(
    "the rebels attack the town near the river".split(),
    [1, 2, None, 4, 2, 4, 7, 5],
    [CandidateSpan(2, 1)],
)


def test_single_label_distribution():
    params = small_model([SENT], num_labels=1)
    d = forward(params, SENT, SENT.candidates[0])
    np.testing.assert_array_equal(d.probs, [1.0])


def test_forward_deterministic_and_normalised():
    params = small_model([SENT])
    G = build_bias(SENT, SENT.candidates[0], RecoupleConfig(Strategy.GAU))
    a = forward(params, SENT, SENT.candidates[0], G)
    b = forward(params, SENT, SENT.candidates[0], G)
    np.testing.assert_array_equal(a.probs, b.probs)
    np.testing.assert_array_equal(a.logits, b.logits)
    assert abs(a.probs.sum() - 1) <= 1e-9 and np.all(a.probs >= 0)


def test_central_row_bias_only_touches_candidate_row():
    params = small_model([SENT])
    c = SENT.candidates[0]
    ids = params.vocab.encode([t.surface for t in SENT.tokens])[None]
    G = build_bias(SENT, c, RecoupleConfig(Strategy.GAU)).values[None]
    _, plain = encode(params, ids, None, keep_hidden=True)
    _, biased = encode(params, ids, G, keep_hidden=True)
    # in the first layer only the candidate's own query row sees the bias
    others = [i for i in range(len(SENT)) if i != c.position]
    np.testing.assert_array_equal(plain[0].data[0, others], biased[0].data[0, others])
    assert np.abs(plain[0].data[0, c.position] - biased[0].data[0, c.position]).max() > 1e-6


def test_bias_layers_subset():
    params = small_model([SENT], bias_layers=(1,))
    c = SENT.candidates[0]
    ids = params.vocab.encode([t.surface for t in SENT.tokens])[None]
    G = build_bias(SENT, c, RecoupleConfig(Strategy.GAU)).values[None]
    _, plain = encode(params, ids, None, keep_hidden=True)
    _, biased = encode(params, ids, G, keep_hidden=True)
    np.testing.assert_array_equal(plain[0].data, biased[0].data)
    assert not np.array_equal(plain[1].data, biased[1].data)


def test_candidate_beyond_max_length():
    params = small_model([SENT], max_length=4)
    with pytest.raises(CandidateDropped):
        forward(params, SENT, CandidateSpan(6, 1))
    # candidates inside the window still run on the truncated sentence
    d = forward(params, SENT, SENT.candidates[0], build_bias(SENT, SENT.candidates[0], RecoupleConfig()))
    assert abs(d.probs.sum() - 1) <= 1e-9


REPEAT = sentence(
    ["x", "attack", "y", "attack", "x"],
    [1, 2, None, 2, 3],
    [CandidateSpan(1, 2), CandidateSpan(3, 2)],
    "mirror",
)


def test_forward_group_singleton_equals_forward():
    params = small_model([SENT])
    cfg = RecoupleConfig(Strategy.FUSION)
    (group,) = group_occurrences(SENT)
    (d,) = forward_group(params, SENT, group, cfg)
    ref = forward(params, SENT, SENT.candidates[0], build_bias(SENT, SENT.candidates[0], cfg))
    np.testing.assert_array_equal(d.probs, ref.probs)


@pytest.mark.parametrize("strategy", [Strategy.GAU, Strategy.MUL, Strategy.GMM, Strategy.FUSION])
def test_forward_group_mirror_symmetric(strategy):
    params = small_model([REPEAT])
    # without position embeddings the encoder is permutation-equivariant, so the
    # only asymmetry left would come from the bias itself
    params.tensors["pos_emb"].data[:] = 0.0
    (group,) = group_occurrences(REPEAT)
    assert group.n == 2
    a, b = forward_group(params, REPEAT, group, RecoupleConfig(strategy))
    np.testing.assert_allclose(a.probs, b.probs, atol=1e-9)


def test_forward_group_general_normalised():
    params = small_model([REPEAT], seed=4)
    (group,) = group_occurrences(REPEAT)
    dists = forward_group(params, REPEAT, group, RecoupleConfig(Strategy.MUL))
    assert len(dists) == 2
    for d in dists:
        assert abs(d.probs.sum() - 1) <= 1e-9
    with pytest.raises(ValueError):
        forward_group(params, REPEAT, OccurrenceGroup("mirror", (), "trigger", "attack"), RecoupleConfig())


def test_no_dead_parameters():
    params = small_model([REPEAT], num_labels=4, layers=2, d_model=32, heads=2)
    group = group_occurrences(REPEAT)[0]
    ids = params.vocab.encode([t.surface for t in REPEAT.tokens])
    G = np.stack([build_bias(REPEAT, REPEAT.candidate_at(p, group.kind), RecoupleConfig(Strategy.GAU)).values for p in group.positions])
    logits, probs = forward_batch(params, np.stack([ids, ids]), list(group.positions), G)
    loss = ad.scale(ad.sum(ad.log(ad.take(probs, [0, 1], [2, 2]))), -1.0)
    params.zero_grad()
    loss.backward()
    for name, t in params.tensors.items():
        assert np.any(t.grad != 0), name


def test_model_gradcheck_small():
    from gradcheck import check_tensor

    rng = np.random.default_rng(0)
    params = small_model([SENT], d_model=8, heads=2, d_ff=8, layers=1)
    ids = params.vocab.encode([t.surface for t in SENT.tokens])[None]
    G = build_bias(SENT, SENT.candidates[0], RecoupleConfig(Strategy.GAU)).values[None]

    def f():
        _, probs = forward_batch(params, ids, [2], G)
        return ad.scale(ad.sum(ad.log(ad.take(probs, [0], [1]))), -1.0)

    errors = check_tensor(f, list(params.values()), rng, samples=6)
    assert np.mean(errors < 1e-3) >= 0.99


def test_init_is_seeded():
    a = small_model([SENT], seed=3)
    b = small_model([SENT], seed=3)
    c = small_model([SENT], seed=4)
    for name in a.tensors:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert not np.array_equal(a["tok_emb"].data, c["tok_emb"].data)


def test_vocab_unknown_words():
    v = Vocab(["a", "b"])
    assert list(v.encode(["a", "zzz", "b"])) == [2, 1, 3]


# ---- checkpoints


def test_checkpoint_round_trip():
    params = small_model([SENT], bias_layers=(0,))
    text = dumps_checkpoint(params, {"num_labels": 3})
    back, extra = loads_checkpoint(text)
    assert extra == {"num_labels": 3}
    assert back.config == params.config
    assert back.vocab.words == params.vocab.words
    for name in params.tensors:
        np.testing.assert_array_equal(back[name].data, params[name].data)
    assert dumps_checkpoint(back, extra) == text


def _corrupt(params, edit):
    import json

    doc = checkpoint_dict(params)
    edit(doc)
    return json.dumps(doc)


@pytest.mark.parametrize(
    "edit, pattern",
    [
        (lambda d: d.update(format_version=99), "format_version"),
        (lambda d: d["params"].pop("cls.b"), "missing"),
        (lambda d: d["params"]["cls.w"].update(shape=[3, 3]), "cls.w"),
        (lambda d: d["params"]["cls.b"]["data"].__setitem__(0, float("nan")), "non-finite"),
        (lambda d: d["model_config"].update(heads=5), "model_config"),
        (lambda d: d["vocab"].append("extra"), "vocab"),
    ],
)
def test_checkpoint_validation(edit, pattern):
    params = small_model([SENT])
    with pytest.raises(CheckpointError, match=pattern):
        loads_checkpoint(_corrupt(params, edit))


def test_checkpoint_not_json():
    with pytest.raises(CheckpointError):
        loads_checkpoint("{not json")
