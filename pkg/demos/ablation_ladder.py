"""
The ablation ladder on a synthetic corpus
=========================================

Trains the seven ladder rungs (baseline, +gau, +mul, +gmm, +fusion, +wa,
+wa_logits) and prints mean/std test F1.  By default this is a quick
two-seed run on a 600-sentence corpus (a few minutes); pass ``--full`` for
the 2000-sentence, five-seed setting used by the acceptance suite
(about 10 minutes on one core).
"""

import sys
import time

from fieldattn.corpus import SyntheticConfig, generate_synthetic
from fieldattn.train import LADDER, TrainConfig, ablation_csv, ablation_run

full = "--full" in sys.argv
corpus = generate_synthetic(SyntheticConfig(n_sentences=2000 if full else 600), 0)
seeds = range(5) if full else range(2)

# desk-scale settings; see demos/ladder.cfg for the same values as a CLI config
base = TrainConfig(lr=2e-3)

start = time.perf_counter()
rows, runs = ablation_run(base, corpus, seeds, on_run=lambda name, seed, ev: print(f"  {name} seed {seed}: F1 {100 * ev.f1:.1f}"))
print(f"\n{len(LADDER) * len(seeds)} runs in {time.perf_counter() - start:.0f}s\n")

for (name, _, _), row in zip(LADDER, rows):
    print(f"{name:>11s}  {row['mean_f1']:6.2f} +- {row['std_f1']:.2f}")

print()
print(ablation_csv(rows))
