"""Building a synthetic multilingual world.

Generates a topic-labeled base corpus, derives cipher languages with
controlled lexical overlap, and shows the rebalanced language sampler.
"""

import numpy as np

from xlpretrain.corpus import (
    generate_base_corpus,
    generate_synthetic_multilingual,
    rebalanced_probs,
)

# ---------------------------------------------------------------------
# 1. The base corpus: topic-mixture sentences over a small vocabulary
# ---------------------------------------------------------------------

base = generate_base_corpus(2000, seed=0)
print(f"base corpus: {len(base.sentences)} sentences, {base.n_topics} topics")
for k in range(3):
    print(f"  topic {base.labels[k]}: {base.sentences[k]}")

# ---------------------------------------------------------------------
# 2. Cipher languages: deterministic word substitution with overlap
# ---------------------------------------------------------------------
# Language l0 is the base itself. Each other language rewrites every
# word except a shared fraction (the most frequent types, standing in
# for cognates and punctuation).

world = generate_synthetic_multilingual(
    base, n_languages=3, overlap_fraction=0.3, seed=0,
    n_parallel_dev=50, n_parallel_test=50, n_task_train=100, n_task_test=50,
)
print(f"\nlanguages: {world.languages}, source: {world.source}")
for lang in world.languages:
    print(f"  {lang}: {len(world.corpora[lang])} training sentences")

pair = world.parallel_dev["l1"].pairs[0]
print("\na parallel pair (source / l1):")
print("  src :", pair[0])
print("  tgt :", pair[1])
print("  gold:", sorted(pair[2].sure)[:6], "...")

lex = world.lexicons["l1"]
shared = [(a, b) for a, b in lex if a == b]
print(f"\nl1 lexicon: {len(lex)} entries, {len(shared)} shared with the source")
print("  sample translations:", [(a, b) for a, b in lex if a != b][:4])

# ---------------------------------------------------------------------
# 3. Rebalanced language sampling: p_i proportional to N_i^alpha
# ---------------------------------------------------------------------
# alpha < 1 upweights smaller corpora; alpha = 0 is uniform and
# alpha = 1 is proportional.

sizes = [1000, 100, 10]
print(f"\ncorpus sizes {sizes}")
for alpha in (0.0, 0.5, 0.7, 1.0):
    dist = rebalanced_probs(sizes, alpha)
    print(f"  alpha={alpha}: " + " ".join(f"{v:.4f}" for v in dist.probs))

# sanity: the empirical draw frequencies follow the formula
rng = np.random.default_rng(0)
dist = rebalanced_probs(sizes, 0.7)
draws = rng.choice(len(sizes), size=100_000, p=dist.probs)
freq = np.bincount(draws, minlength=3) / draws.size
print("\nempirical frequencies at alpha=0.7:", np.round(freq, 4))
