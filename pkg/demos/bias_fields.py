"""
Field biases on a sentence with a repeated trigger
==================================================

Builds the four bias variants for a hand-parsed sentence in which the
trigger "attack" occurs twice, and prints the biased query row of each.
Run with ``python demos/bias_fields.py``.
"""

import numpy as np

from fieldattn.corpus import CandidateSpan, ParsedSentence, Token, group_occurrences
from fieldattn.field import RecoupleConfig, Strategy, build_bias, field_spec, mul_recouple

words = "Attack happened without declaration of war , the attack was judged".split()
# 0-based heads; "happened" is the root
heads = [1, None, 1, 2, 3, 4, 1, 8, 10, 10, 1]
tokens = tuple(Token(i, w, h) for i, (w, h) in enumerate(zip(words, heads)))
s = ParsedSentence(tokens, (CandidateSpan(0, 1), CandidateSpan(8, 1)), "demo")

# both occurrences share the case-folded surface, so they form one group
for g in group_occurrences(s):
    print("group", g.key, "positions", g.positions)

# each occurrence gets its own field: centre, size D and sigma = D / 2
specs = [field_spec(s, c.position) for c in s.candidates]
for f in specs:
    print(f"centre {f.center}: D = {f.field_size}, sigma = {f.sigma}")

# the product of the two Gaussians is again Gaussian, narrower than either
mu, sd = mul_recouple(specs)
print(f"recoupled mean {mu:.3f}, sd {sd:.3f}")

np.set_printoptions(precision=2, suppress=True, linewidth=120)
print("\nbiased row of the first occurrence:")
cand = s.candidates[0]
for strategy in Strategy:
    row = build_bias(s, cand, RecoupleConfig(strategy)).values[cand.position]
    print(f"{strategy.value:>7s}", row)

# under the default CENTRAL_ROW scope every other row stays zero
G = build_bias(s, cand, RecoupleConfig(Strategy.FUSION)).values
print("\nnon-zero rows:", np.flatnonzero(np.abs(G).sum(axis=1)))
