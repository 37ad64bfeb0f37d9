"""The three training phases and their shared machinery.

Meta-pretraining runs MLM on a single-language corpus; cross-lingual
pretraining starts from a transplanted checkpoint and runs MLM over a
rebalanced multilingual stream, optionally distilling from the monolingual
teacher on source-language rows; finetuning attaches a classification head
and reports per-language accuracy.  Every random draw is keyed by (seed,
stream, step), so any run can be resumed from a checkpoint and replay the
identical trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import IGNORE_INDEX, Tensor, cross_entropy
from .corpus import BlockPacker, MultilingualSampler, mask_tokens, read_lexicon
from .model import (
    ModelCheckpoint,
    ModelConfig,
    add_task_head,
    classify,
    forward,
    init_params,
    load_checkpoint,
    mlm_logits,
)
from .optim import AdamState, adam_step
from .seeding import STREAM_DROPOUT, STREAM_LANG, stream_rng
from .tokenization import BOS_ID, EOS_ID, PAD_ID, UNK_ID, build_vocab, tokenize
from .transplant import InitPlan, apply_init, freeze_mask, match_vocab, updatable_set

PHASES = ("meta", "crosslingual", "finetune")


@dataclass(frozen=True)
class KdConfig:
    """Distillation settings: teacher checkpoint (object or path), loss
    weight, softmax temperature, and which language counts as source."""

    teacher: object
    weight: float = 1.0
    temperature: float = 2.0
    source_lang: str | None = None

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("kd weight must be >= 0")
        if self.temperature <= 0:
            raise ValueError("kd temperature must be positive")


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    steps: int
    batch_size: int = 32
    seq_len: int = 64
    lr: float = 3e-4
    warmup_steps: int = -1  # -1 resolves to 10% of steps
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_prob: float = 0.15
    alpha: float = 0.7
    eval_every: int = 0  # 0 disables periodic evaluation
    seed: int = 0
    freeze_body: bool = False  # finetune only; pretraining freezes via init_plan
    init_plan: InitPlan | None = None
    kd: KdConfig | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}, expected one of {PHASES}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.warmup_steps < 0:
            object.__setattr__(self, "warmup_steps", self.steps // 10)
        if self.steps > 0 and self.warmup_steps >= self.steps:
            raise ValueError(f"steps ({self.steps}) must exceed warmup ({self.warmup_steps})")
        if self.kd is not None and self.phase != "crosslingual":
            raise ValueError("kd applies only to the crosslingual phase")
        if self.init_plan is not None and self.phase != "crosslingual":
            raise ValueError("init_plan applies only to the crosslingual phase")
        if self.freeze_body and self.phase != "finetune":
            raise ValueError("freeze_body here is for finetuning; pretraining uses init_plan")
        if self.batch_size < 1 or self.seq_len < 3:
            raise ValueError("batch_size must be >= 1 and seq_len >= 3")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in (0, 1)")
        if self.lr <= 0 or self.alpha < 0 or self.eval_every < 0:
            raise ValueError("lr must be positive, alpha and eval_every non-negative")


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


class MetricLog:
    """Append-only training/eval records, optionally persisted as NDJSON.

    Train records carry strictly increasing steps; eval records may share a
    step with the train record they follow but never go backwards.
    """

    def __init__(self, path=None):
        self.records = []
        self._fh = None
        if path is not None:
            self._fh = open(os.fspath(path), "a", encoding="utf-8", newline="\n")
        self._last_train = None
        self._max_step = None

    def _append(self, record):
        record = {k: _jsonable(v) for k, v in record.items()}
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def log_train(self, step, **fields):
        step = int(step)
        if self._last_train is not None and step <= self._last_train:
            raise ValueError(f"train steps must strictly increase: {step} after {self._last_train}")
        if self._max_step is not None and step < self._max_step:
            raise ValueError(f"log is append-only: step {step} after {self._max_step}")
        self._last_train = step
        self._max_step = step
        self._append({"kind": "train", "step": step, **fields})

    def log_eval(self, step, metric, value):
        step = int(step)
        if self._max_step is not None and step < self._max_step:
            raise ValueError(f"log is append-only: step {step} after {self._max_step}")
        self._max_step = step
        self._append({"kind": "eval", "step": step, "metric": str(metric), "value": value})

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metric_log(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# knowledge distillation
# ---------------------------------------------------------------------------


def kd_loss(student_logits, teacher_logits, mask=None, temperature=2.0):
    """Forward KL(teacher || student) over temperature-softened rows, times T^2.

    Both logit matrices are (N, S) over the same support, row-aligned to the
    same positions.  `mask` optionally selects rows; no selected rows gives
    an exact constant 0.
    """
    teacher = np.asarray(teacher_logits, dtype=np.float64)
    if teacher.shape != tuple(student_logits.shape):
        raise ValueError(
            f"logit shapes differ: student {tuple(student_logits.shape)} vs teacher {teacher.shape}"
        )
    student = student_logits
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        if idx.size == 0:
            return Tensor(0.0)
        student = ag.gather_rows(student, idx)
        teacher = teacher[idx]
    tau = float(temperature)
    t_scaled = teacher / tau
    log_pt = t_scaled - _logsumexp_rows(t_scaled)
    pt = np.exp(log_pt)
    teacher_term = float((pt * log_pt).sum(axis=1).mean())
    log_ps = ag.log_softmax(ag.mul_scalar(student, 1.0 / tau))
    cross = ag.tsum(ag.mul(Tensor(pt, dtype=student.data.dtype), log_ps))
    kl = ag.add_scalar(ag.mul_scalar(cross, -1.0 / pt.shape[0]), teacher_term)
    return ag.mul_scalar(kl, tau * tau)


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


@dataclass
class _KdContext:
    teacher: ModelCheckpoint
    weight: float
    temperature: float
    source_lang: str
    id_table: np.ndarray  # student id -> teacher id ([UNK] when unmatched)
    support_student: np.ndarray
    support_teacher: np.ndarray


def _setup_kd(kd: KdConfig, vocab, seq_len, lexicons=()):
    teacher = kd.teacher
    if not isinstance(teacher, ModelCheckpoint):
        teacher = load_checkpoint(teacher)
    if kd.source_lang is None:
        raise ValueError("kd needs source_lang to pick the distilled examples")
    if seq_len > teacher.config.max_positions:
        raise ValueError(
            f"seq_len {seq_len} exceeds the teacher's {teacher.config.max_positions} positions"
        )
    bridge = match_vocab(vocab, teacher.vocab, lexicons=lexicons or None)
    support_student, support_teacher = bridge.matched_pairs()
    table = np.full(vocab.size, UNK_ID, dtype=np.int64)
    table[support_student] = support_teacher
    return _KdContext(
        teacher, kd.weight, kd.temperature, kd.source_lang,
        table, support_student, support_teacher,
    )


def _kd_term(ctx: _KdContext, mlm_batch, hiddens, params, config):
    """KD loss over masked positions of source-language rows, or None."""
    rows = np.array([tag == ctx.source_lang for tag in mlm_batch.language_tags])
    if not rows.any():
        return None
    B, T = mlm_batch.input_ids.shape
    targets = mlm_batch.target_ids.reshape(-1)
    row_flat = np.repeat(rows, T)
    kd_flat = np.flatnonzero((targets != IGNORE_INDEX) & row_flat)
    if kd_flat.size == 0:
        return None

    hidden = hiddens[-1]
    flat_h = ag.reshape(hidden, (B * T, config.hidden))
    sel = ag.gather_rows(flat_h, kd_flat)
    decoder = params["tok_emb"] if config.tie_lm_head else params["lm_w"]
    sup_dec = ag.gather_rows(decoder, ctx.support_student)
    s_logits = ag.matmul(sel, ag.transpose(sup_dec, (1, 0)))
    bias_col = ag.reshape(params["lm_bias"], (config.vocab_size, 1))
    sup_bias = ag.reshape(ag.gather_rows(bias_col, ctx.support_student), (len(ctx.support_student),))
    s_logits = ag.add(s_logits, sup_bias)

    kd_rows = np.flatnonzero(rows)
    teacher_ids = ctx.id_table[mlm_batch.input_ids[kd_rows]]
    with ag.no_grad():
        t_hidden = forward(
            ctx.teacher.params, ctx.teacher.config,
            teacher_ids, mlm_batch.attention_mask[kd_rows], mode="eval",
        )[-1].data
    sub_row = np.searchsorted(kd_rows, kd_flat // T)
    t_sel = t_hidden[sub_row, kd_flat % T]
    t_cfg = ctx.teacher.config
    t_dec = (
        ctx.teacher.params["tok_emb"] if t_cfg.tie_lm_head else ctx.teacher.params["lm_w"]
    ).data
    t_logits = t_sel @ t_dec[ctx.support_teacher].T + ctx.teacher.params["lm_bias"].data[
        ctx.support_teacher
    ]
    return kd_loss(s_logits, t_logits, temperature=ctx.temperature)


# ---------------------------------------------------------------------------
# shared pretraining loop
# ---------------------------------------------------------------------------


def _normalize_corpora(corpus):
    if isinstance(corpus, Mapping):
        corpora = {str(k): list(v) for k, v in corpus.items()}
    else:
        corpora = {"l0": list(corpus)}
    if not corpora or any(not sents for sents in corpora.values()):
        raise ValueError("every language needs at least one sentence")
    return corpora


def _resolve_model(corpora, model_config, vocab):
    if model_config is None:
        raise ValueError("model_config is required when not resuming")
    if vocab is None:
        lines = [s for sents in corpora.values() for s in sents]
        vocab = build_vocab(lines, max_size=model_config.vocab_size)
    if vocab.size != model_config.vocab_size:
        model_config = dataclasses.replace(model_config, vocab_size=vocab.size)
    return vocab, model_config


def _resume_state(resume, phase):
    ckpt = resume if isinstance(resume, ModelCheckpoint) else load_checkpoint(resume)
    meta = ckpt.metadata or {}
    if meta.get("phase") != phase:
        raise ValueError(f"cannot resume phase {phase!r} from a {meta.get('phase')!r} checkpoint")
    start = int(meta.get("step", 0))
    if start > 0 and ckpt.optimizer is None:
        raise ValueError("checkpoint has no optimizer state to resume from")
    return ckpt, start


def _pretrain_loop(
    params, model_config, vocab, corpora, config, state, updatable,
    log, start_step, kd_ctx=None, eval_hook=None, metadata=None,
):
    sampler = MultilingualSampler(corpora, alpha=config.alpha, seed=config.seed)
    packer = BlockPacker(sampler, vocab, config.seq_len)
    if start_step:
        packer.advance_to(start_step, config.batch_size)

    def snapshot(step):
        meta = dict(metadata or {})
        meta.update({"phase": config.phase, "step": step, "seed": config.seed})
        return ModelCheckpoint(model_config, vocab, params, state, meta)

    for t in range(start_step, config.steps):
        batch = packer.next_batch(config.batch_size)
        mlm_batch = mask_tokens(batch, vocab, config.mask_prob, seed=config.seed, step=t)
        rng = stream_rng(config.seed, STREAM_DROPOUT, t)
        hiddens = forward(
            params, model_config, mlm_batch.input_ids, mlm_batch.attention_mask, "train", rng
        )
        targets = mlm_batch.target_ids.reshape(-1)
        flat_positions = np.flatnonzero(targets != IGNORE_INDEX)
        logits = mlm_logits(params, model_config, hiddens[-1], flat_positions)
        loss = cross_entropy(logits, targets[flat_positions])
        mlm_value = float(loss.data)
        kd_value = None
        if kd_ctx is not None:
            term = _kd_term(kd_ctx, mlm_batch, hiddens, params, model_config)
            if term is None:
                kd_value = 0.0
            else:
                kd_value = float(term.data)
                loss = ag.add(loss, ag.mul_scalar(term, kd_ctx.weight))
        total_value = float(loss.data)
        loss.backward()
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        stepped = adam_step(params, grads, state, updatable)
        for p in params.values():
            p.zero_grad()

        step = t + 1
        lang_rows = Counter(mlm_batch.language_tags)
        record = {
            "phase": config.phase,
            "loss": total_value,
            "mlm_loss": mlm_value,
            "lr": state.lr_at(state.step),
            "n_predicted": len(flat_positions),
            "tokens": {lang: n * config.seq_len for lang, n in sorted(lang_rows.items())},
        }
        if kd_value is not None:
            record["kd_loss"] = kd_value
        if not stepped:
            record["skipped"] = True
        if log is not None:
            log.log_train(step, **record)

        if eval_hook is not None and config.eval_every and step % config.eval_every == 0:
            metrics = eval_hook(step, snapshot(step))
            if log is not None and metrics:
                for name in sorted(metrics):
                    log.log_eval(step, name, metrics[name])

    return snapshot(config.steps)


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


def run_meta_pretraining(
    config: PhaseConfig, corpus, model_config: ModelConfig | None = None,
    vocab=None, log=None, resume=None,
) -> ModelCheckpoint:
    """MLM pretraining on a single-language corpus."""
    if config.phase != "meta":
        raise ValueError(f"expected a meta PhaseConfig, got {config.phase!r}")
    corpora = _normalize_corpora(corpus)
    if len(corpora) != 1:
        raise ValueError(f"meta-pretraining expects one language, got {sorted(corpora)}")
    if resume is not None:
        ckpt, start = _resume_state(resume, "meta")
        vocab, model_config, params = ckpt.vocab, ckpt.config, ckpt.params
        state = ckpt.optimizer or _make_state(config)
    else:
        vocab, model_config = _resolve_model(corpora, model_config, vocab)
        params = init_params(model_config, seed=config.seed)
        state = _make_state(config)
        start = 0
    return _pretrain_loop(
        params, model_config, vocab, corpora, config, state,
        updatable=None, log=log, start_step=start,
    )


def run_crosslingual_pretraining(
    config: PhaseConfig, corpora, meta_checkpoint=None, model_config: ModelConfig | None = None,
    vocab=None, eval_hook=None, log=None, resume=None,
) -> ModelCheckpoint:
    """MLM over a rebalanced multilingual stream, optionally transplant-initialized.

    With meta_checkpoint the init_plan must be present; without it the run is
    the from-scratch baseline.  eval_hook(step, checkpoint) -> {metric: value}
    runs every eval_every steps and its metrics land in the log.
    """
    if config.phase != "crosslingual":
        raise ValueError(f"expected a crosslingual PhaseConfig, got {config.phase!r}")
    corpora = _normalize_corpora(corpora)
    plan = config.init_plan
    if meta_checkpoint is not None and plan is None:
        raise ValueError("a meta checkpoint needs an init_plan")
    if meta_checkpoint is None and plan is not None and plan.mode != "none":
        raise ValueError(f"init mode {plan.mode!r} needs a meta checkpoint")

    metadata = {"init_mode": plan.mode if plan else "none"}
    if resume is not None:
        ckpt, start = _resume_state(resume, "crosslingual")
        vocab, model_config, params = ckpt.vocab, ckpt.config, ckpt.params
        state = ckpt.optimizer or _make_state(config)
        metadata["init_mode"] = (ckpt.metadata or {}).get("init_mode", metadata["init_mode"])
    else:
        vocab, model_config = _resolve_model(corpora, model_config, vocab)
        params = init_params(model_config, seed=config.seed)
        start = 0
        state = _make_state(config)
        if meta_checkpoint is not None:
            if not isinstance(meta_checkpoint, ModelCheckpoint):
                meta_checkpoint = load_checkpoint(meta_checkpoint)
            lexicons = []
            for path in plan.dictionary_paths:
                pairs, _skipped = read_lexicon(path)
                lexicons.append(pairs)
            tmap = match_vocab(vocab, meta_checkpoint.vocab, lexicons=lexicons or None)
            target = ModelCheckpoint(model_config, vocab, params)
            params = apply_init(target, meta_checkpoint, tmap, plan).params
            metadata["transplant_coverage"] = dict(tmap.coverage)

    updatable = None
    if plan is not None and plan.freeze_body:
        holder = ModelCheckpoint(model_config, vocab, params)
        updatable = updatable_set(freeze_mask(plan, holder))

    kd_ctx = None
    if config.kd is not None and config.kd.weight > 0:
        lexicons = []
        if plan is not None:
            for path in plan.dictionary_paths:
                lexicons.append(read_lexicon(path)[0])
        kd_ctx = _setup_kd(config.kd, vocab, config.seq_len, lexicons)

    return _pretrain_loop(
        params, model_config, vocab, corpora, config, state, updatable,
        log, start, kd_ctx=kd_ctx, eval_hook=eval_hook, metadata=metadata,
    )


def _make_state(config: PhaseConfig) -> AdamState:
    return AdamState(
        lr_base=config.lr,
        warmup_steps=config.warmup_steps,
        total_steps=config.steps,
        weight_decay=config.weight_decay,
        clip_norm=config.clip_norm,
    )


# ---------------------------------------------------------------------------
# finetuning
# ---------------------------------------------------------------------------


def _encode_examples(examples, vocab, max_positions, label_to_id):
    rows = []
    for label, text in examples:
        if label not in label_to_id:
            raise ValueError(f"label {label!r} not in the training label set")
        ids = [BOS_ID] + tokenize(text, vocab, max_len=max_positions - 2) + [EOS_ID]
        rows.append((ids, label_to_id[label]))
    return rows


def _pad_batch(rows):
    width = max(len(ids) for ids, _ in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    labels = np.empty(len(rows), dtype=np.int64)
    for r, (row_ids, label) in enumerate(rows):
        ids[r, : len(row_ids)] = row_ids
        mask[r, : len(row_ids)] = True
        labels[r] = label
    return ids, mask, labels


def _accuracy(params, config, encoded, batch_size=64):
    correct = 0
    for start in range(0, len(encoded), batch_size):
        ids, mask, labels = _pad_batch(encoded[start : start + batch_size])
        logits = classify(params, config, forward(params, config, ids, mask)[-1])
        correct += int((logits.data.argmax(axis=1) == labels).sum())
    return correct / len(encoded)


def finetune(checkpoint: ModelCheckpoint, task_train, task_test, config: PhaseConfig, source_lang):
    """Train a classification head on the source language, test on every language.

    task_train/task_test map language -> [(label, text)].  Training uses
    task_train[source_lang]; scores are accuracies on each language's test
    split.  Returns (finetuned checkpoint, {lang: accuracy}).
    """
    if config.phase != "finetune":
        raise ValueError(f"expected a finetune PhaseConfig, got {config.phase!r}")
    if source_lang not in task_train:
        raise ValueError(f"no training split for source language {source_lang!r}")
    train_examples = list(task_train[source_lang])
    if not train_examples:
        raise ValueError("empty training split")
    labels = sorted({label for label, _ in train_examples})
    if len(labels) < 2:
        raise ValueError("finetuning needs at least two classes")
    label_to_id = {label: i for i, label in enumerate(labels)}

    vocab = checkpoint.vocab
    params = {n: Tensor(p.data.copy(), requires_grad=True) for n, p in checkpoint.params.items()}
    model_config = add_task_head(params, checkpoint.config, len(labels), seed=config.seed)

    encoded_train = _encode_examples(train_examples, vocab, model_config.max_positions, label_to_id)
    encoded_test = {
        lang: _encode_examples(examples, vocab, model_config.max_positions, label_to_id)
        for lang, examples in task_test.items()
        if examples
    }

    updatable = {"head.w", "head.b"} if config.freeze_body else None
    state = _make_state(config)
    n = len(encoded_train)
    for t in range(config.steps):
        rng = stream_rng(config.seed, STREAM_LANG, t)
        idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        ids, mask, batch_labels = _pad_batch([encoded_train[i] for i in idx])
        drop_rng = stream_rng(config.seed, STREAM_DROPOUT, t)
        hidden = forward(params, model_config, ids, mask, "train", drop_rng)[-1]
        loss = cross_entropy(classify(params, model_config, hidden), batch_labels)
        loss.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, updatable)
        for p in params.values():
            p.zero_grad()

    scores = {lang: _accuracy(params, model_config, enc) for lang, enc in encoded_test.items()}
    metadata = dict(checkpoint.metadata or {})
    metadata.update(
        {"phase": "finetune", "step": config.steps, "seed": config.seed,
         "labels": labels, "source_lang": source_lang}
    )
    return ModelCheckpoint(model_config, vocab, params, state, metadata), scores


def classification_accuracy(checkpoint: ModelCheckpoint, examples) -> float:
    """Accuracy of a finetuned checkpoint on [(label, text)] examples."""
    labels = (checkpoint.metadata or {}).get("labels")
    if not labels or checkpoint.config.n_classes == 0:
        raise ValueError("checkpoint carries no classification head metadata")
    label_to_id = {label: i for i, label in enumerate(labels)}
    encoded = _encode_examples(examples, checkpoint.vocab, checkpoint.config.max_positions, label_to_id)
    return _accuracy(checkpoint.params, checkpoint.config, encoded)
