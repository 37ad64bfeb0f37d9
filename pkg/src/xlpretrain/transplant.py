"""Checkpoint-to-checkpoint initialization with vocabulary matching.

A model over a new vocabulary starts from an existing checkpoint: the
transformer body can be copied outright (the two bodies share shapes), and
token-embedding rows are copied wherever the two vocabularies can be matched.
Matching tries, in order, the exact token string, its normalized form, and
bilingual-dictionary translations of it.  Everything else stays at the target
model's own random initialization.

Four initialization modes cover the ablation axes: ``none`` (nothing copied),
``body`` (transformer body only), ``emb`` (matched embedding rows only) and
``both``.  A freeze mask can additionally pin the copied body so that training
updates only the embeddings and the LM head.
"""

import dataclasses
import json
import os
import tempfile

import numpy as np

from .autograd import Tensor
from .model import ModelCheckpoint, partition_of
from .tokenization import Vocabulary, normalize

MODES = ("none", "body", "emb", "both")
PROVENANCES = ("exact", "normalized", "dictionary", "unmatched")


@dataclasses.dataclass(frozen=True)
class InitPlan:
    """How to initialize a target model from a source checkpoint."""

    mode: str = "both"
    freeze_body: bool = False
    dictionary_paths: tuple = ()

    def __post_init__(self):
        mode = str(self.mode).lower()
        if mode not in MODES:
            raise ValueError(f"unknown init mode {self.mode!r}, expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "dictionary_paths", tuple(self.dictionary_paths))
        if mode == "none" and self.freeze_body:
            # freezing a randomly initialized body would train nothing useful
            raise ValueError("freeze_body requires a copied body, not mode 'none'")


@dataclasses.dataclass
class TransplantMap:
    """Per-token correspondence between a target and a source vocabulary.

    ``entries`` maps every target id to ``(source_id, provenance)`` where
    provenance is one of ``exact``, ``normalized``, ``dictionary`` or
    ``unmatched`` (source_id is None exactly for unmatched tokens).
    ``dictionary_multi_piece`` counts target tokens that had dictionary
    translations available but none of them was a single source piece.
    """

    entries: dict
    coverage: dict
    dictionary_multi_piece: int = 0

    def __post_init__(self):
        n = len(self.entries)
        if sorted(self.entries) != list(range(n)):
            raise ValueError("entries must cover target ids 0..V-1 exactly once")
        counts = dict.fromkeys(PROVENANCES, 0)
        for tid, (sid, prov) in self.entries.items():
            if prov not in PROVENANCES:
                raise ValueError(f"unknown provenance {prov!r} for target id {tid}")
            if (sid is None) != (prov == "unmatched"):
                raise ValueError(f"source id must be present iff matched (target id {tid})")
            counts[prov] += 1
        if dict(self.coverage) != counts:
            raise ValueError("coverage counts disagree with entries")

    @property
    def n_matched(self):
        return len(self.entries) - self.coverage["unmatched"]

    def matched_pairs(self):
        """Matched (target_ids, source_ids) as parallel int64 arrays."""
        tgt = np.array(
            sorted(t for t, (_, prov) in self.entries.items() if prov != "unmatched"),
            dtype=np.int64,
        )
        src = np.array([self.entries[t][0] for t in tgt], dtype=np.int64)
        return tgt, src


def match_vocab(target, source, lexicons=None):
    """Match every target token to a source token where possible.

    Per target token, in order: exact string lookup in the source vocabulary;
    lookup of the normalized form against normalized source tokens; then for
    each lexicon (a sequence of (target_word, source_word) pairs) in the given
    order, each listed translation is retried through the same two lookups.
    The first hit wins.  Ties inside the normalized index and inside a lexicon
    are broken by listing order.
    """
    if not isinstance(target, Vocabulary) or not isinstance(source, Vocabulary):
        raise TypeError("match_vocab expects Vocabulary instances")
    norm_index = {}
    for sid, tok in enumerate(source.tokens):
        norm_index.setdefault(normalize(tok), sid)

    def find(word):
        sid = source.get(word)
        if sid is not None:
            return sid, "exact"
        sid = norm_index.get(normalize(word))
        if sid is not None:
            return sid, "normalized"
        return None, None

    tables = []
    for pairs in lexicons or ():
        table = {}
        for lhs, rhs in pairs:
            table.setdefault(lhs, [])
            if rhs not in table[lhs]:
                table[lhs].append(rhs)
        tables.append(table)

    entries = {}
    coverage = dict.fromkeys(PROVENANCES, 0)
    multi_piece = 0
    for tid, tok in enumerate(target.tokens):
        sid, how = find(tok)
        if sid is None and tables:
            translated = False
            for table in tables:
                for candidate in table.get(tok, ()):
                    translated = True
                    sid, _ = find(candidate)
                    if sid is not None:
                        how = "dictionary"
                        break
                if sid is not None:
                    break
            if sid is None and translated:
                # translation exists but is not a single source piece
                multi_piece += 1
        if sid is None:
            how = "unmatched"
        entries[tid] = (sid, how)
        coverage[how] += 1
    return TransplantMap(entries, coverage, multi_piece)


def apply_init(target_ckpt, source_ckpt, tmap, plan):
    """Build an initialized checkpoint from a target and a source checkpoint.

    The returned checkpoint keeps the target's config and vocabulary.  Copied
    tensors are bit-exact; everything not copied keeps the target's values.
    The optimizer state is dropped: training starts fresh after a transplant.
    """
    if isinstance(plan, str):
        plan = InitPlan(mode=plan)
    mode = plan.mode
    tc, sc = target_ckpt.config, source_ckpt.config
    for field in ("layers", "hidden", "heads"):
        if getattr(tc, field) != getattr(sc, field):
            raise ValueError(
                f"config mismatch on {field}: target {getattr(tc, field)} "
                f"vs source {getattr(sc, field)}"
            )
    if len(tmap.entries) != tc.vocab_size:
        raise ValueError(
            f"map covers {len(tmap.entries)} tokens, target vocab has {tc.vocab_size}"
        )

    params = {
        name: Tensor(p.data.copy(), requires_grad=True)
        for name, p in target_ckpt.params.items()
    }
    copy_body = mode in ("body", "both")
    copy_emb = mode in ("emb", "both")

    if copy_body:
        for name, p in params.items():
            if partition_of(name) not in ("body", "position_embeddings"):
                continue
            src = source_ckpt.params.get(name)
            if src is None:
                raise ValueError(f"source checkpoint is missing body tensor {name!r}")
            if src.shape != p.shape:
                raise ValueError(
                    f"body shape mismatch for {name!r}: "
                    f"target {p.shape} vs source {src.shape}"
                )
            p.data[...] = src.data

    if copy_emb:
        tgt_ids, src_ids = tmap.matched_pairs()
        src_emb = source_ckpt.params["tok_emb"].data
        if src_ids.size and src_ids.max() >= src_emb.shape[0]:
            raise ValueError("map references source ids beyond the source vocabulary")
        params["tok_emb"].data[tgt_ids] = src_emb[src_ids]
        if "lm_w" in params:
            src_dec = src_emb if sc.tie_lm_head else source_ckpt.params["lm_w"].data
            params["lm_w"].data[tgt_ids] = src_dec[src_ids]

    if mode != "none":
        params["lm_bias"].data[...] = 0.0

    metadata = dict(target_ckpt.metadata or {})
    metadata["init_mode"] = mode
    return ModelCheckpoint(tc, target_ckpt.vocab, params, None, metadata)


def freeze_mask(plan, checkpoint):
    """Per-tensor update mask: True means the optimizer may update the tensor.

    With ``freeze_body`` the transformer body (including its layer norms) is
    pinned while token embeddings, position embeddings, the LM head and any
    task head stay trainable.
    """
    if plan.freeze_body and plan.mode not in ("body", "both"):
        raise ValueError("freeze_body requires mode 'body' or 'both'")
    mask = {}
    for name in checkpoint.params:
        frozen = plan.freeze_body and partition_of(name) == "body"
        mask[name] = not frozen
    return mask


def updatable_set(mask):
    """Names the optimizer is allowed to touch, from a freeze mask."""
    return {name for name, ok in mask.items() if ok}


def transplant_report(tmap, target_vocab, lexicon_lines_skipped=0, sample_size=20):
    """Summary dict: coverage per provenance plus a sample of unmatched tokens."""
    unmatched = [
        target_vocab.token_of(tid)
        for tid in sorted(tmap.entries)
        if tmap.entries[tid][1] == "unmatched"
    ]
    return {
        "target_vocab_size": len(tmap.entries),
        "matched": tmap.n_matched,
        "coverage": dict(tmap.coverage),
        "dictionary_multi_piece": tmap.dictionary_multi_piece,
        "lexicon_lines_skipped": int(lexicon_lines_skipped),
        "unmatched_sample": unmatched[:sample_size],
    }


def write_transplant_report(report, path):
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
