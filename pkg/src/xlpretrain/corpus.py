"""Corpus handling: the rebalanced language-sampling distribution, MLM batch
construction, and a synthetic multilingual corpus generator.

The generator builds cipher languages: deterministic token-level substitutions
of a base corpus with a controllable shared-lexicon fraction and optional
local word-order permutation. Exact translations with known gold alignments
make transfer experiments runnable in minutes, with overlap_fraction standing
in for lexical similarity between real languages.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autograd import IGNORE_INDEX
from .evaluation import AlignmentSet, read_alignment_file, write_alignment_file
from .seeding import STREAM_EPOCH, STREAM_LANG, STREAM_MASK, stream_rng
from .tokenization import BOS_ID, EOS_ID, MASK_ID, Vocabulary, tokenize

NUM_SPECIALS = 5


# ---------------------------------------------------------------------------
# rebalanced language sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LanguageDistribution:
    languages: tuple
    sizes: tuple
    alpha: float
    probs: np.ndarray  # float64, sums to 1


def rebalanced_probs(sizes: Sequence[int], alpha: float, languages=None) -> LanguageDistribution:
    """p_i = N_i^alpha / sum_j N_j^alpha.

    alpha=1 is proportional sampling, alpha=0 uniform; alpha<1 upweights
    low-resource languages relative to their share.
    """
    sizes = tuple(int(n) for n in sizes)
    if not sizes:
        raise ValueError("need at least one language")
    if any(n <= 0 for n in sizes):
        raise ValueError(f"language sizes must be positive: {sizes}")
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative: {alpha}")
    if languages is None:
        languages = tuple(f"l{i}" for i in range(len(sizes)))
    languages = tuple(languages)
    if len(languages) != len(sizes):
        raise ValueError("languages and sizes length mismatch")
    weights = np.power(np.asarray(sizes, dtype=np.float64), alpha)
    probs = weights / weights.sum()
    return LanguageDistribution(languages, sizes, float(alpha), probs)


class MultilingualSampler:
    """Streams (language, sentence) pairs: the language of each draw is
    i.i.d. from the rebalanced distribution; within a language, sentences
    come uniformly without replacement per epoch. Every draw is a pure
    function of (seed, step), so two samplers with equal arguments emit
    identical streams and a fresh sampler can replay into any prefix.
    """

    def __init__(self, corpora: Mapping[str, Sequence[str]], alpha: float = 0.7, seed: int = 0, dist: LanguageDistribution | None = None):
        if dist is None:
            langs = tuple(sorted(corpora))
            dist = rebalanced_probs([len(corpora[l]) for l in langs], alpha, langs)
        for lang in dist.languages:
            if len(corpora[lang]) == 0:
                raise ValueError(f"language {lang!r} has no sentences")
        self.dist = dist
        self.corpora = {lang: list(corpora[lang]) for lang in dist.languages}
        self.seed = int(seed)
        self.step = 0
        self._queues = {lang: [] for lang in dist.languages}
        self._epochs = {lang: 0 for lang in dist.languages}

    def draw_languages(self, count: int) -> list[str]:
        """Language codes for one batch; consumes one step of the stream."""
        rng = stream_rng(self.seed, STREAM_LANG, self.step)
        self.step += 1
        picks = rng.choice(len(self.dist.languages), size=count, p=self.dist.probs)
        return [self.dist.languages[i] for i in picks]

    def next_index(self, lang: str) -> int:
        queue = self._queues[lang]
        if not queue:
            li = self.dist.languages.index(lang)
            rng = stream_rng(self.seed, STREAM_EPOCH, li, self._epochs[lang])
            self._epochs[lang] += 1
            # reversed so pop() walks the permutation front to back
            queue.extend(rng.permutation(len(self.corpora[lang]))[::-1].tolist())
        return queue.pop()

    def sample(self, batch_size: int) -> list[tuple[str, str]]:
        return [(lang, self.corpora[lang][self.next_index(lang)]) for lang in self.draw_languages(batch_size)]


def sample_batch(corpora, dist: LanguageDistribution, batch_size: int, seed: int, step: int = 0):
    """One raw sentence batch at `step`, replayed from a fresh stream."""
    sampler = MultilingualSampler(corpora, dist=dist, seed=seed)
    for _ in range(step):
        sampler.sample(batch_size)
    return sampler.sample(batch_size)


# ---------------------------------------------------------------------------
# MLM batches
# ---------------------------------------------------------------------------


@dataclass
class TokenBatch:
    input_ids: np.ndarray  # (B, T) int64
    attention_mask: np.ndarray  # (B, T) bool
    language_tags: tuple


@dataclass
class MlmBatch:
    input_ids: np.ndarray  # (B, T) after corruption
    target_ids: np.ndarray  # (B, T), IGNORE_INDEX at unselected positions
    attention_mask: np.ndarray  # (B, T) bool
    language_tags: tuple
    forced_selection: bool = False  # a short row got its single forced pick


def mask_tokens(
    batch: TokenBatch,
    vocab: Vocabulary,
    mask_prob: float = 0.15,
    seed: int = 0,
    step: int = 0,
    force_min_one: bool = True,
) -> MlmBatch:
    """BERT-style corruption: select non-special, non-pad positions with
    probability mask_prob; of those, 80% become [MASK], 10% a uniformly
    random vocab id, 10% stay unchanged. Targets carry the original id only
    at selected positions. A row whose random draw selects nothing gets one
    forced pick among its eligible positions so tiny sequences still train.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ValueError(f"mask_prob must lie in (0, 1): {mask_prob}")
    ids = batch.input_ids
    rng = stream_rng(seed, STREAM_MASK, step)
    eligible = batch.attention_mask & (ids >= NUM_SPECIALS)
    selected = (rng.random(ids.shape) < mask_prob) & eligible
    forced = False
    if force_min_one:
        for b in range(ids.shape[0]):
            if eligible[b].any() and not selected[b].any():
                selected[b, rng.choice(np.flatnonzero(eligible[b]))] = True
                forced = True
    targets = np.full(ids.shape, IGNORE_INDEX, dtype=np.int64)
    targets[selected] = ids[selected]
    roll = rng.random(ids.shape)
    corrupted = ids.copy()
    corrupted[selected & (roll < 0.8)] = MASK_ID
    random_pos = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[random_pos] = rng.integers(0, vocab.size, size=int(random_pos.sum()))
    return MlmBatch(corrupted, targets, batch.attention_mask.copy(), batch.language_tags, forced)


class BlockPacker:
    """Fixed-length training rows for pretraining: each row packs consecutive
    sentences of one language, [BOS] first and [EOS] after every sentence,
    truncated at seq_len. Rows never mix languages, and every row is full,
    so pretraining batches carry no padding.
    """

    def __init__(self, sampler: MultilingualSampler, vocab: Vocabulary, seq_len: int):
        if seq_len < 3:
            raise ValueError("seq_len too small to hold [BOS] + a token + [EOS]")
        self.sampler = sampler
        self.seq_len = seq_len
        self._cache = {
            lang: [tokenize(s, vocab, max_len=seq_len) for s in sents]
            for lang, sents in sampler.corpora.items()
        }

    def next_batch(self, batch_size: int) -> TokenBatch:
        langs = self.sampler.draw_languages(batch_size)
        rows = np.empty((batch_size, self.seq_len), dtype=np.int64)
        for b, lang in enumerate(langs):
            row = [BOS_ID]
            pieces = self._cache[lang]
            while len(row) < self.seq_len:
                row.extend(pieces[self.sampler.next_index(lang)])
                row.append(EOS_ID)
            rows[b] = row[: self.seq_len]
        mask = np.ones((batch_size, self.seq_len), dtype=bool)
        return TokenBatch(rows, mask, tuple(langs))

    def advance_to(self, step: int, batch_size: int) -> None:
        """Replay the stream up to `step` after a resume; draws only."""
        while self.sampler.step < step:
            self.next_batch(batch_size)


# ---------------------------------------------------------------------------
# synthetic base corpus
# ---------------------------------------------------------------------------


@dataclass
class BaseCorpus:
    sentences: list
    labels: list  # topic id per sentence
    n_topics: int


def _zipf_weights(n: int, a: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -a
    return w / w.sum()


def generate_base_corpus(
    n_sentences: int,
    seed: int = 0,
    n_topics: int = 4,
    n_words: int = 400,
    function_fraction: float = 0.3,
    function_rate: float = 0.4,
    collocation_rate: float = 0.3,
    zipf_a: float = 1.2,
    min_len: int = 6,
    max_len: int = 12,
) -> BaseCorpus:
    """Topic-mixture pseudo-language with learnable local structure.

    The inventory splits into topic-neutral function words (high frequency)
    and per-topic content blocks (Zipf within block). Each position either
    continues a fixed collocation of the previous word or draws fresh, so
    masked positions are predictable from context well above the unigram
    rate. The topic is the classification label for finetuning; function
    words carry no label signal by construction.
    """
    if n_topics < 2 or n_words < 2 * n_topics:
        raise ValueError("need at least 2 topics and a few words per topic")
    rng = np.random.default_rng(seed)
    n_func = int(round(function_fraction * n_words))
    words = [f"w{i}" for i in range(n_words)]
    func_ids = np.arange(n_func)
    blocks = np.array_split(np.arange(n_func, n_words), n_topics)

    # fixed collocation partner within each group, so bigrams stay on-topic
    partner = np.arange(n_words)
    for group in [func_ids] + blocks:
        partner[group] = group[rng.permutation(len(group))]

    func_p = _zipf_weights(n_func, zipf_a)
    block_p = [_zipf_weights(len(b), zipf_a) for b in blocks]

    sentences, labels = [], []
    for _ in range(n_sentences):
        topic = int(rng.integers(n_topics))
        length = int(rng.integers(min_len, max_len + 1))
        out = []
        prev = None
        for _ in range(length):
            if prev is not None and rng.random() < collocation_rate:
                w = int(partner[prev])
            elif rng.random() < function_rate:
                w = int(rng.choice(n_func, p=func_p))
            else:
                w = int(blocks[topic][rng.choice(len(blocks[topic]), p=block_p[topic])])
            out.append(words[w])
            prev = w
        sentences.append(" ".join(out))
        labels.append(topic)
    return BaseCorpus(sentences, labels, n_topics)


# ---------------------------------------------------------------------------
# cipher languages
# ---------------------------------------------------------------------------


@dataclass
class ParallelCorpus:
    """Sentence pairs with optional token-level gold alignments."""

    pairs: list  # (source sentence, target sentence, AlignmentSet | None)


@dataclass
class SyntheticWorld:
    languages: tuple
    source: str
    corpora: dict  # lang -> training sentences (disjoint across languages)
    meta_corpus: list  # every training sentence in source-language form
    parallel_dev: dict  # lang -> ParallelCorpus vs the source language
    parallel_test: dict
    lexicons: dict  # lang -> [(foreign form, source form)] over the full lexicon
    task_train: dict  # lang -> [(label, sentence)]
    task_test: dict
    n_topics: int
    config: dict = field(default_factory=dict)


def _cipher_form(word: str, lang_index: int, shared: set) -> str:
    if lang_index == 0 or word in shared:
        return word
    return f"v{lang_index}x{word}"


def _window_permutation(length: int, window: int, rng) -> list[int]:
    perm = []
    for start in range(0, length, window):
        stop = min(start + window, length)
        perm.extend((start + rng.permutation(stop - start)).tolist())
    return perm


def generate_synthetic_multilingual(
    base_corpus,
    n_languages: int = 3,
    overlap_fraction: float = 0.3,
    permute_window: int = 1,
    seed: int = 0,
    n_parallel_dev: int = 400,
    n_parallel_test: int = 400,
    n_task_train: int = 1000,
    n_task_test: int = 300,
) -> SyntheticWorld:
    """Derive `n_languages` cipher languages from a base corpus.

    Language 0 is the base itself (the source). Each other language maps
    every lexicon type to a private form, except a shared fraction that
    keeps its base form; the shared set is the most frequent types, standing
    in for cognates and punctuation. Optional word-order divergence permutes
    each window of `permute_window` positions; gold alignments record the
    permutation exactly. Also splits off parallel dev/test sets and a
    topic-classification task rendered in every language.
    """
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError(f"overlap_fraction must lie in [0, 1]: {overlap_fraction}")
    if n_languages < 1:
        raise ValueError("need at least one language")
    if permute_window < 1:
        raise ValueError("permute_window must be >= 1")

    if isinstance(base_corpus, BaseCorpus):
        sentences, labels, n_topics = base_corpus.sentences, base_corpus.labels, base_corpus.n_topics
    else:
        sentences, labels, n_topics = list(base_corpus), None, 0

    n_eval = n_parallel_dev + n_parallel_test + n_task_train + n_task_test
    if len(sentences) <= n_eval:
        raise ValueError(f"base corpus too small: {len(sentences)} sentences for {n_eval} held out")

    counts = Counter(tok for s in sentences for tok in s.split())
    types = sorted(counts, key=lambda t: (-counts[t], t))
    shared = set(types[: int(round(overlap_fraction * len(types)))])
    languages = tuple(f"l{k}" for k in range(n_languages))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sentences)).tolist()
    b0 = n_parallel_dev
    b1 = b0 + n_parallel_test
    b2 = b1 + n_task_train
    b3 = b2 + n_task_test
    dev_ids, test_ids = order[:b0], order[b0:b1]
    task_train_ids, task_test_ids = order[b1:b2], order[b2:b3]
    train_ids = order[b3:]

    def render(idx: int, k: int):
        """Sentence `idx` in language k: cipher forms + window permutation."""
        src = sentences[idx].split()
        if k == 0:
            return " ".join(src), AlignmentSet(frozenset((i, i) for i in range(len(src))))
        prng = np.random.default_rng(np.random.SeedSequence([seed, k, idx]))
        perm = _window_permutation(len(src), permute_window, prng)
        toks = [_cipher_form(src[p], k, shared) for p in perm]
        gold = AlignmentSet(frozenset((p, j) for j, p in enumerate(perm)))
        return " ".join(toks), gold

    corpora = {lang: [] for lang in languages}
    for pos, idx in enumerate(train_ids):
        k = pos % n_languages
        corpora[languages[k]].append(render(idx, k)[0])
    meta_corpus = [sentences[idx] for idx in train_ids]

    def parallel_set(ids, k):
        pairs = []
        for idx in ids:
            tgt, gold = render(idx, k)
            pairs.append((sentences[idx], tgt, gold))
        return ParallelCorpus(pairs)

    parallel_dev = {languages[k]: parallel_set(dev_ids, k) for k in range(1, n_languages)}
    parallel_test = {languages[k]: parallel_set(test_ids, k) for k in range(1, n_languages)}

    lexicons = {
        languages[k]: [(_cipher_form(t, k, shared), t) for t in types]
        for k in range(1, n_languages)
    }

    task_train, task_test = {}, {}
    if labels is not None:
        for k, lang in enumerate(languages):
            task_train[lang] = [(labels[idx], render(idx, k)[0]) for idx in task_train_ids]
            task_test[lang] = [(labels[idx], render(idx, k)[0]) for idx in task_test_ids]

    config = {
        "n_languages": n_languages,
        "overlap_fraction": overlap_fraction,
        "permute_window": permute_window,
        "seed": seed,
        "n_topics": n_topics,
        "lexicon_size": len(types),
        "shared_types": len(shared),
    }
    return SyntheticWorld(
        languages, languages[0], corpora, meta_corpus, parallel_dev, parallel_test,
        lexicons, task_train, task_test, n_topics, config,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_corpus_file(sentences: Iterable[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(s + "\n")


def read_corpus_file(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def read_corpus_dir(root) -> dict:
    """`<root>/<lang>.txt` per language, one sentence per line."""
    root = Path(root)
    files = sorted(root.glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no corpus files under {root}")
    return {p.stem: read_corpus_file(p) for p in files}


def write_lexicon(pairs: Iterable[tuple], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a, b in pairs:
            f.write(f"{a}\t{b}\n")


def read_lexicon(path) -> tuple[list, int]:
    """Word pairs, tab- or single-space-separated; returns (pairs, skipped)."""
    pairs, skipped = [], 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            fields = line.split("\t") if "\t" in line else line.split(" ")
            if len(fields) == 2 and fields[0] and fields[1]:
                pairs.append((fields[0], fields[1]))
            elif line.strip():
                skipped += 1
    return pairs, skipped


def write_labeled_tsv(rows: Iterable[tuple], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for label, text in rows:
            f.write(f"{label}\t{text}\n")


def read_labeled_tsv(path) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            label, _, text = line.rstrip("\n").partition("\t")
            rows.append((int(label), text))
    return rows


def write_world(world: SyntheticWorld, outdir) -> None:
    """Directory layout consumed by the command-line tools."""
    outdir = Path(outdir)
    for sub in ("corpus", "meta", "parallel", "lexicons", "task"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)
    for lang in world.languages:
        write_corpus_file(world.corpora[lang], outdir / "corpus" / f"{lang}.txt")
    write_corpus_file(world.meta_corpus, outdir / "meta" / "base.txt")
    for split, table in (("dev", world.parallel_dev), ("test", world.parallel_test)):
        for lang, pc in table.items():
            stem = outdir / "parallel" / f"{world.source}-{lang}.{split}"
            write_corpus_file([p[0] for p in pc.pairs], f"{stem}.src")
            write_corpus_file([p[1] for p in pc.pairs], f"{stem}.tgt")
            write_alignment_file([p[2] for p in pc.pairs], f"{stem}.align")
    for lang, pairs in world.lexicons.items():
        write_lexicon(pairs, outdir / "lexicons" / f"{lang}-{world.source}.txt")
    for split, table in (("train", world.task_train), ("test", world.task_test)):
        for lang, rows in table.items():
            write_labeled_tsv(rows, outdir / "task" / f"{lang}.{split}.tsv")
    meta = {
        "languages": list(world.languages),
        "source": world.source,
        "n_topics": world.n_topics,
        "config": world.config,
    }
    with open(outdir / "world.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_parallel_pair(stem) -> ParallelCorpus:
    """Reassemble `<stem>.src/.tgt/.align` into pairs with gold alignments."""
    src = read_corpus_file(f"{stem}.src")
    tgt = read_corpus_file(f"{stem}.tgt")
    golds = read_alignment_file(f"{stem}.align")
    if not (len(src) == len(tgt) == len(golds)):
        raise ValueError(f"parallel files disagree on length at {stem}")
    return ParallelCorpus(list(zip(src, tgt, golds)))


def load_world(outdir) -> SyntheticWorld:
    outdir = Path(outdir)
    with open(outdir / "world.json", encoding="utf-8") as f:
        meta = json.load(f)
    languages = tuple(meta["languages"])
    source = meta["source"]
    corpora = {lang: read_corpus_file(outdir / "corpus" / f"{lang}.txt") for lang in languages}
    meta_corpus = read_corpus_file(outdir / "meta" / "base.txt")
    parallel_dev, parallel_test = {}, {}
    for lang in languages:
        if lang == source:
            continue
        parallel_dev[lang] = read_parallel_pair(outdir / "parallel" / f"{source}-{lang}.dev")
        parallel_test[lang] = read_parallel_pair(outdir / "parallel" / f"{source}-{lang}.test")
    lexicons = {
        lang: read_lexicon(outdir / "lexicons" / f"{lang}-{source}.txt")[0]
        for lang in languages
        if lang != source
    }
    task_train, task_test = {}, {}
    for lang in languages:
        train_p = outdir / "task" / f"{lang}.train.tsv"
        if train_p.exists():
            task_train[lang] = read_labeled_tsv(train_p)
            task_test[lang] = read_labeled_tsv(outdir / "task" / f"{lang}.test.tsv")
    return SyntheticWorld(
        languages, source, corpora, meta_corpus, parallel_dev, parallel_test,
        lexicons, task_train, task_test, meta["n_topics"], meta.get("config", {}),
    )
