"""Feature-based evaluation: per-layer sentence retrieval, optimal-transport
word alignment scored by AER, and the cross-lingual transfer gap."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .model import forward
from .tokenization import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, tokenize

_NUM_SPECIALS = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class AlignmentSet:
    """Gold or hypothesized word alignment for one sentence pair.

    Pairs are (source index, target index), 0-indexed. `sure` must be a
    subset of `possible`; constructing with possible=None copies sure.
    """

    sure: frozenset
    possible: frozenset = None

    def __post_init__(self):
        object.__setattr__(self, "sure", frozenset(tuple(p) for p in self.sure))
        poss = self.sure if self.possible is None else frozenset(tuple(p) for p in self.possible)
        if not self.sure <= poss:
            raise ValueError("sure alignments must be a subset of possible alignments")
        object.__setattr__(self, "possible", poss)


def aer(hypothesis: AlignmentSet, gold: AlignmentSet) -> float:
    """Alignment error rate: 1 - (|A∩S| + |A∩P|) / (|A| + |S|).

    A is the hypothesis sure set, S/P the gold sure/possible sets. The
    degenerate case |A| + |S| = 0 is defined as 0 and flagged with a warning.
    """
    a = hypothesis.sure
    s, p = gold.sure, gold.possible
    denom = len(a) + len(s)
    if denom == 0:
        warnings.warn("AER of two empty alignments defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return 1.0 - (len(a & s) + len(a & p)) / denom


def transfer_gap(scores: Mapping[str, float], source: str) -> float:
    """Source-language score minus the mean score over the other languages."""
    if source not in scores:
        raise ValueError(f"missing source-language score: {source!r}")
    others = [v for k, v in scores.items() if k != source]
    if not others:
        raise ValueError("transfer gap needs at least one non-source language")
    return float(scores[source]) - sum(float(v) for v in others) / len(others)


# ---------------------------------------------------------------------------
# WPT-style alignment files: one line per sentence pair, entries "i-j" (sure)
# and "i?j" (possible), 1-indexed on disk, 0-indexed in memory.
# ---------------------------------------------------------------------------


def parse_alignment_line(line: str) -> AlignmentSet:
    sure, possible = set(), set()
    for entry in line.split():
        sep = "-" if "-" in entry else "?" if "?" in entry else None
        if sep is None:
            raise ValueError(f"malformed alignment entry: {entry!r}")
        i_s, _, j_s = entry.partition(sep)
        try:
            i, j = int(i_s), int(j_s)
        except ValueError:
            raise ValueError(f"malformed alignment entry: {entry!r}") from None
        if i < 1 or j < 1:
            raise ValueError(f"alignment indices are 1-based on disk: {entry!r}")
        pair = (i - 1, j - 1)
        possible.add(pair)
        if sep == "-":
            sure.add(pair)
    return AlignmentSet(frozenset(sure), frozenset(possible))


def read_alignment_file(path) -> list[AlignmentSet]:
    with open(path, encoding="utf-8") as f:
        return [parse_alignment_line(line.rstrip("\n")) for line in f]


def write_alignment_file(alignments: Iterable[AlignmentSet], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for al in alignments:
            entries = [f"{i + 1}-{j + 1}" for i, j in sorted(al.sure)]
            entries += [f"{i + 1}?{j + 1}" for i, j in sorted(al.possible - al.sure)]
            f.write(" ".join(entries) + "\n")


# ---------------------------------------------------------------------------
# Hidden-state extraction: mean-pooled sentence embeddings and per-word
# vectors (subword pieces averaged within each whitespace word).
# ---------------------------------------------------------------------------


def _forward_hiddens(checkpoint, input_ids, attention_mask, layer):
    config = checkpoint.config
    if not 0 <= layer <= config.layers:
        raise ValueError(f"layer must be in [0, {config.layers}], got {layer}")
    hiddens = forward(checkpoint.params, config, input_ids, attention_mask, mode="eval")
    return hiddens[layer].data


def sentence_embed(sentences, checkpoint, layer, include_specials=False, batch_size=32):
    """Embed each sentence as the mean of its layer-k hidden vectors.

    Sentences are tokenized with the checkpoint's vocabulary, wrapped in
    [BOS]/[EOS], and pooled over non-pad positions; special tokens are
    excluded from the pool unless include_specials is set.  A sentence with
    nothing to pool is an error.
    """
    config, vocab = checkpoint.config, checkpoint.vocab
    sentences = list(sentences)
    rows = []
    for idx, text in enumerate(sentences):
        ids = tokenize(text, vocab, max_len=config.max_positions - 2)
        ids = [BOS_ID] + ids + [EOS_ID]
        pool = [
            pos
            for pos, i in enumerate(ids)
            if i != PAD_ID and (include_specials or i >= _NUM_SPECIALS)
        ]
        if not pool:
            raise ValueError(f"sentence {idx} has no positions to pool: {text!r}")
        rows.append((ids, pool))

    out = np.zeros((len(rows), config.hidden), dtype=np.float64)
    for start in range(0, len(rows), batch_size):
        chunk = rows[start : start + batch_size]
        width = max(len(ids) for ids, _ in chunk)
        batch = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=bool)
        for r, (ids, _) in enumerate(chunk):
            batch[r, : len(ids)] = ids
            mask[r, : len(ids)] = True
        hid = _forward_hiddens(checkpoint, batch, mask, layer)
        for r, (_, pool) in enumerate(chunk):
            out[start + r] = hid[r, pool].mean(axis=0)
    return out


def word_vectors(sentence, checkpoint, layer):
    """One vector per whitespace word: the mean of its subword-piece vectors."""
    config, vocab = checkpoint.config, checkpoint.vocab
    words = sentence.split()
    if not words:
        raise ValueError("cannot extract word vectors from an empty sentence")
    ids = [BOS_ID]
    spans = []
    for word in words:
        pieces = tokenize(word, vocab, max_len=config.max_positions)
        spans.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    ids.append(EOS_ID)
    if len(ids) > config.max_positions:
        raise ValueError(
            f"sentence needs {len(ids)} positions, model allows {config.max_positions}"
        )
    hid = _forward_hiddens(
        checkpoint,
        np.asarray([ids], dtype=np.int64),
        np.ones((1, len(ids)), dtype=bool),
        layer,
    )[0]
    return np.stack([hid[a:b].mean(axis=0) for a, b in spans])


# ---------------------------------------------------------------------------
# Sentence retrieval: cosine nearest neighbor over parallel sentence pairs.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalResult:
    src_to_tgt: float
    tgt_to_src: float
    n_pairs: int
    n_excluded: int


def retrieve(src_embeds, tgt_embeds) -> RetrievalResult:
    """Accuracy@1 of cosine nearest-neighbor retrieval in both directions.

    Rows are parallel (gold mate = same index).  A pair is excluded, and
    counted, when either side has a zero-norm embedding.  Ties go to the
    lowest candidate index.
    """
    src = np.asarray(src_embeds, dtype=np.float64)
    tgt = np.asarray(tgt_embeds, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape != tgt.shape:
        raise ValueError(f"expected matching 2-D embeddings, got {src.shape} and {tgt.shape}")
    src_norm = np.linalg.norm(src, axis=1)
    tgt_norm = np.linalg.norm(tgt, axis=1)
    valid = (src_norm > 0) & (tgt_norm > 0)
    n_excluded = int((~valid).sum())
    src, tgt = src[valid], tgt[valid]
    n = src.shape[0]
    if n == 0:
        raise ValueError("no valid pairs left after excluding zero-norm embeddings")
    src = src / np.linalg.norm(src, axis=1, keepdims=True)
    tgt = tgt / np.linalg.norm(tgt, axis=1, keepdims=True)
    sims = src @ tgt.T
    gold = np.arange(n)
    forward_acc = float((sims.argmax(axis=1) == gold).mean())
    backward_acc = float((sims.argmax(axis=0) == gold).mean())
    return RetrievalResult(forward_acc, backward_acc, n, n_excluded)


# ---------------------------------------------------------------------------
# Entropic optimal transport (Sinkhorn) and thresholded word alignment.
# ---------------------------------------------------------------------------


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(cost, eps=0.1, iters=100, tol=1e-6, eps_start=None):
    """Entropic-regularized OT with uniform marginals, in the log domain.

    Returns (plan, converged, n_iters).  Convergence means both marginals of
    the plan are within tol of uniform.  With eps_start > eps the
    regularization is annealed geometrically down to eps, warm-starting the
    dual potentials at each stage; convergence is judged at the final eps.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2 or C.size == 0:
        raise ValueError("cost must be a nonempty 2-D matrix")
    if not np.isfinite(C).all():
        raise ValueError("cost matrix contains non-finite entries")
    if eps <= 0 or iters < 1:
        raise ValueError("eps must be positive and iters at least 1")
    n, m = C.shape
    loga = np.full(n, -math.log(n))
    logb = np.full(m, -math.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    if eps_start is not None and eps_start > eps:
        n_stages = max(2, math.ceil(math.log(eps_start / eps) / math.log(2)) + 1)
        schedule = list(np.geomspace(eps_start, eps, n_stages))
    else:
        schedule = [eps]

    total_iters = 0
    converged = False
    for stage_eps in schedule:
        final = stage_eps == schedule[-1]
        for _ in range(iters):
            total_iters += 1
            f = stage_eps * loga - stage_eps * _logsumexp((g[None, :] - C) / stage_eps, axis=1)
            g = stage_eps * logb - stage_eps * _logsumexp((f[:, None] - C) / stage_eps, axis=0)
            plan = np.exp((f[:, None] + g[None, :] - C) / stage_eps)
            err = max(
                np.abs(plan.sum(axis=1) - np.exp(loga)).max(),
                np.abs(plan.sum(axis=0) - np.exp(logb)).max(),
            )
            if err < tol:
                converged = final
                break
        else:
            converged = False
    return plan, converged, total_iters


def transport_cost(plan, cost):
    return float((np.asarray(plan) * np.asarray(cost, dtype=np.float64)).sum())


@dataclass(frozen=True)
class OtResult:
    """Thresholded OT word alignment plus the raw transport diagnostics."""

    alignment: AlignmentSet
    plan: np.ndarray
    cost: float
    converged: bool
    iterations: int


def ot_align(src_vectors, tgt_vectors, eps=0.1, iters=100, threshold=0.9, tol=1e-6):
    """Align two word-vector sequences through entropic optimal transport.

    The cost is 1 - cosine similarity; the Sinkhorn plan (uniform marginals)
    is thresholded to keep cells with plan_ij >= threshold * max(row i max,
    column j max), which yields a relation rather than a permutation.  If the
    iteration budget runs out the best plan is still used, flagged by
    converged=False on the result.
    """
    src = np.asarray(src_vectors, dtype=np.float64)
    tgt = np.asarray(tgt_vectors, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[0] == 0 or tgt.shape[0] == 0:
        raise ValueError("both sentences must contain at least one word vector")
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    src_n = src / np.maximum(np.linalg.norm(src, axis=1, keepdims=True), 1e-12)
    tgt_n = tgt / np.maximum(np.linalg.norm(tgt, axis=1, keepdims=True), 1e-12)
    C = 1.0 - src_n @ tgt_n.T
    plan, converged, n_iters = sinkhorn(C, eps=eps, iters=iters, tol=tol)
    row_max = plan.max(axis=1)
    col_max = plan.max(axis=0)
    keep = plan >= threshold * np.maximum(row_max[:, None], col_max[None, :])
    pairs = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(keep)))
    return OtResult(AlignmentSet(pairs), plan, transport_cost(plan, C), converged, n_iters)


# ---------------------------------------------------------------------------
# Glue: evaluate a parallel corpus with a checkpoint, one layer at a time.
# ---------------------------------------------------------------------------


def evaluate_retrieval(src_sentences, tgt_sentences, checkpoint, layer, include_specials=False):
    src_sentences, tgt_sentences = list(src_sentences), list(tgt_sentences)
    if len(src_sentences) != len(tgt_sentences) or not src_sentences:
        raise ValueError("need equal, nonzero sentence counts")
    src = sentence_embed(src_sentences, checkpoint, layer, include_specials)
    tgt = sentence_embed(tgt_sentences, checkpoint, layer, include_specials)
    return retrieve(src, tgt)


def evaluate_alignment(
    src_sentences, tgt_sentences, golds, checkpoint, layer,
    eps=0.1, iters=100, threshold=0.9,
):
    """Mean AER of OT alignments against gold sets; also counts non-converged pairs."""
    src_sentences, tgt_sentences, golds = map(list, (src_sentences, tgt_sentences, golds))
    if not (len(src_sentences) == len(tgt_sentences) == len(golds)) or not golds:
        raise ValueError("need equal, nonzero counts of sentences and gold alignments")
    total = 0.0
    unconverged = 0
    for src, tgt, gold in zip(src_sentences, tgt_sentences, golds):
        sv = word_vectors(src, checkpoint, layer)
        tv = word_vectors(tgt, checkpoint, layer)
        result = ot_align(sv, tv, eps=eps, iters=iters, threshold=threshold)
        unconverged += not result.converged
        total += aer(result.alignment, gold)
    return total / len(golds), unconverged


# ---------------------------------------------------------------------------
# EvalReport: the per-layer curves and the transfer gap for one checkpoint.
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-layer retrieval accuracies, per-layer AER, and the transfer gap.

    retrieval maps layer -> {"src_to_tgt": acc, "tgt_to_src": acc};
    alignment maps layer -> AER. Either may cover any subset of layers.
    """

    step: int = 0
    retrieval: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    transfer_gap: float | None = None

    def validate(self):
        for layer, accs in self.retrieval.items():
            for direction in ("src_to_tgt", "tgt_to_src"):
                v = accs[direction]
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"retrieval accuracy out of range at layer {layer}: {v}")
        for layer, v in self.alignment.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"AER out of range at layer {layer}: {v}")
        return self

    def to_dict(self):
        return {
            "step": self.step,
            "retrieval": {str(k): dict(v) for k, v in sorted(self.retrieval.items())},
            "alignment": {str(k): v for k, v in sorted(self.alignment.items())},
            "transfer_gap": self.transfer_gap,
        }


def _atomic_write(path, text):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_eval_report_json(report: EvalReport, path) -> None:
    report.validate()
    _atomic_write(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def write_eval_report_csv(report: EvalReport, path) -> None:
    """Flat rows (step, metric, layer, value) for plotting per-layer curves."""
    report.validate()
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "metric", "layer", "value"])
    for layer in sorted(report.retrieval):
        accs = report.retrieval[layer]
        writer.writerow([report.step, "retrieval_src_to_tgt", layer, accs["src_to_tgt"]])
        writer.writerow([report.step, "retrieval_tgt_to_src", layer, accs["tgt_to_src"]])
    for layer in sorted(report.alignment):
        writer.writerow([report.step, "alignment_aer", layer, report.alignment[layer]])
    if report.transfer_gap is not None:
        writer.writerow([report.step, "transfer_gap", "", report.transfer_gap])
    _atomic_write(path, buf.getvalue())
