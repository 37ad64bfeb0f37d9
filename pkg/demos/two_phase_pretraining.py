"""The two-phase recipe, end to end at toy scale.

Phase 1 pretrains on the source language alone. Phase 2 transplants that
checkpoint into a multilingual model (matched vocabulary rows keep their
embeddings, the body is copied wholesale) and continues masked-LM training
on all languages. A from-scratch run with identical batches is the control.
Takes about a minute.
"""

import numpy as np

from xlpretrain.corpus import generate_base_corpus, generate_synthetic_multilingual
from xlpretrain.model import ModelConfig
from xlpretrain.tokenization import build_vocab
from xlpretrain.training import (
    MetricLog,
    PhaseConfig,
    finetune,
    run_crosslingual_pretraining,
    run_meta_pretraining,
)
from xlpretrain.transplant import InitPlan, match_vocab

STEPS = 400

# ---------------------------------------------------------------------
# 1. A small world: 3 languages, 30% lexical overlap
# ---------------------------------------------------------------------

base = generate_base_corpus(3000, seed=0)
world = generate_synthetic_multilingual(
    base, n_languages=3, overlap_fraction=0.3, seed=0,
    n_parallel_dev=50, n_parallel_test=50, n_task_train=200, n_task_test=100,
)
print("languages:", world.languages)

vocab = build_vocab([s for ss in world.corpora.values() for s in ss], max_size=2000)
meta_vocab = build_vocab(world.meta_corpus, max_size=2000)
model = dict(layers=2, hidden=48, heads=2, max_positions=64, dropout=0.1)
train = dict(batch_size=8, seq_len=32, lr=3e-3, mask_prob=0.15)

# ---------------------------------------------------------------------
# 2. Phase 1: meta-pretraining on the source language
# ---------------------------------------------------------------------

meta_cfg = PhaseConfig(phase="meta", steps=STEPS, seed=0, **train)
meta_log = MetricLog()
meta = run_meta_pretraining(
    meta_cfg, world.meta_corpus,
    ModelConfig(vocab_size=meta_vocab.size, **model),
    vocab=meta_vocab, log=meta_log,
)
losses = [r["loss"] for r in meta_log.records if r["kind"] == "train"]
print(f"\nmeta-pretraining: loss {losses[0]:.2f} -> {np.mean(losses[-20:]):.2f} over {STEPS} steps")

# ---------------------------------------------------------------------
# 3. How much of the multilingual vocabulary can be transplanted?
# ---------------------------------------------------------------------

tmap = match_vocab(vocab, meta.vocab)
print("vocabulary matching:", dict(tmap.coverage))

# ---------------------------------------------------------------------
# 4. Phase 2, twice: transplanted vs from scratch, identical batches
# ---------------------------------------------------------------------

mc = ModelConfig(vocab_size=vocab.size, **model)
arms = {}
for name, plan in (("scratch", None), ("transplanted", InitPlan(mode="both"))):
    cfg = PhaseConfig(phase="crosslingual", steps=STEPS, seed=0, alpha=0.7,
                      init_plan=plan, **train)
    log = MetricLog()
    ckpt = run_crosslingual_pretraining(
        cfg, world.corpora, meta_checkpoint=(meta if plan else None),
        model_config=mc, vocab=vocab, log=log,
    )
    first = [r["loss"] for r in log.records if r["kind"] == "train"][:20]
    last = [r["loss"] for r in log.records if r["kind"] == "train"][-20:]
    print(f"{name:>12}: loss {np.mean(first):.2f} (first 20) -> {np.mean(last):.2f} (last 20)")
    arms[name] = ckpt

# ---------------------------------------------------------------------
# 5. Zero-shot transfer: finetune on the source, test everywhere
# ---------------------------------------------------------------------

ft_cfg = PhaseConfig(phase="finetune", steps=150, batch_size=8, lr=1e-3, seed=0)
print("\ntopic classification, trained on l0 only:")
for name, ckpt in arms.items():
    _, scores = finetune(ckpt, world.task_train, world.task_test, ft_cfg, "l0")
    others = [v for k, v in scores.items() if k != "l0"]
    gap = scores["l0"] - float(np.mean(others))
    row = " ".join(f"{k} {v:.2f}" for k, v in sorted(scores.items()))
    print(f"{name:>12}: {row}  gap {gap:+.2f}")
