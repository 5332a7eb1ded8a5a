"""
Consistency loss across occurrence passes
=========================================

Each occurrence of a repeated trigger gets its own forward pass.  The
regulariser is the mean pairwise Wasserstein distance between the passes'
label distributions; with a 0/1 ground cost that is total variation.
Run with ``python demos/consistency_loss.py``.
"""

import numpy as np

from fieldattn.corpus import SyntheticConfig, generate_synthetic, group_occurrences
from fieldattn.field import RecoupleConfig, Strategy
from fieldattn.loss import Regularization, fuse_logits, loss_total, wa_distance
from fieldattn.model import ModelConfig, Vocab, forward_group, init_params

# total variation by hand vs the library
p, q = np.array([0.7, 0.3]), np.array([0.4, 0.6])
print("TV by hand", 0.5 * np.abs(p - q).sum(), "wa_distance", wa_distance(p, q))

# a synthetic sentence whose trigger is repeated
corpus = generate_synthetic(SyntheticConfig(n_sentences=1, repeat_prob=1.0), 3)
s = corpus[0]
(group,) = [g for g in group_occurrences(s) if g.n > 1]
print("sentence:", " ".join(t.surface for t in s.tokens))
print("repeated trigger at", group.positions)

vocab = Vocab.from_sentences(corpus)
params = init_params(ModelConfig(len(vocab), 8), vocab, seed=0)
dists = forward_group(params, s, group, RecoupleConfig(Strategy.FUSION))
for pos, d in zip(group.positions, dists):
    print(f"pass at {pos}:", np.round(d.probs, 3))

gold = s.candidate_at(group.positions[0], group.kind).gold_label
for variant in Regularization:
    rep = loss_total(dists, gold, variant)
    print(f"{variant.value:>9s}: nll {rep.nll:.4f}  wa {rep.wa:.4f}  logit_nll {rep.logit_nll:.4f}  total {rep.total:.4f}")

# the WA & logits variant predicts from the mean of the passes' logits
print("fused prediction:", fuse_logits(dists).argmax(), "gold:", gold)
