import json

import numpy as np
import pytest
from conftest import finite_diff_max_rel_err

from xlpretrain import autograd as ag
from xlpretrain.autograd import IGNORE_INDEX, Tensor, cross_entropy, default_dtype
from xlpretrain.corpus import TokenBatch, mask_tokens
from xlpretrain.model import (
    ModelCheckpoint,
    ModelConfig,
    forward,
    init_params,
    load_checkpoint,
    mlm_logits,
    partition_of,
    save_checkpoint,
)
from xlpretrain.tokenization import SPECIAL_TOKENS, Vocabulary, build_vocab
from xlpretrain.training import (
    KdConfig,
    MetricLog,
    PhaseConfig,
    _kd_term,
    _setup_kd,
    classification_accuracy,
    finetune,
    kd_loss,
    read_metric_log,
    run_crosslingual_pretraining,
    run_meta_pretraining,
)
from xlpretrain.transplant import InitPlan


def distinct_sentences(n, words_per=5, prefix=""):
    """n sentences with mutually disjoint vocabularies, trivially memorizable."""
    return [
        " ".join(f"{prefix}s{i}w{j}" for j in range(words_per)) for i in range(n)
    ]


def permutation_sentences(n=50, n_words=50, length=10, seed=7):
    """Random distinct-word sentences over a shared vocabulary.

    Any few visible words identify the sentence, so masked positions are
    recoverable, while every word keeps its own co-occurrence profile.
    """
    rng = np.random.default_rng(seed)
    words = [f"v{k}" for k in range(n_words)]
    return [" ".join(rng.choice(words, size=length, replace=False)) for _ in range(n)]


def tiny_model(vocab_size, **kw):
    args = dict(vocab_size=vocab_size, layers=2, hidden=32, heads=2,
                max_positions=32, dropout=0.0)
    args.update(kw)
    return ModelConfig(**args)


def meta_cfg(steps, **kw):
    args = dict(phase="meta", steps=steps, batch_size=8, seq_len=24, lr=1e-3, seed=0)
    args.update(kw)
    return PhaseConfig(**args)


def xl_cfg(steps, **kw):
    args = dict(phase="crosslingual", steps=steps, batch_size=8, seq_len=24, lr=1e-3, seed=0)
    args.update(kw)
    return PhaseConfig(**args)


class TestPhaseConfig:
    def test_warmup_defaults_to_tenth(self):
        assert meta_cfg(200).warmup_steps == 20
        assert meta_cfg(200, warmup_steps=5).warmup_steps == 5

    def test_steps_must_exceed_warmup(self):
        with pytest.raises(ValueError):
            meta_cfg(10, warmup_steps=10)
        assert PhaseConfig(phase="meta", steps=0).warmup_steps == 0

    def test_kd_and_init_plan_are_crosslingual_only(self):
        kd = KdConfig(teacher="x.ckpt", source_lang="l0")
        with pytest.raises(ValueError):
            meta_cfg(10, kd=kd)
        with pytest.raises(ValueError):
            meta_cfg(10, init_plan=InitPlan(mode="both"))
        xl_cfg(10, kd=kd, init_plan=InitPlan(mode="both"))

    def test_freeze_body_is_finetune_only(self):
        with pytest.raises(ValueError):
            xl_cfg(10, freeze_body=True)
        PhaseConfig(phase="finetune", steps=10, freeze_body=True)

    def test_bad_values(self):
        with pytest.raises(ValueError):
            PhaseConfig(phase="warmup", steps=10)
        with pytest.raises(ValueError):
            meta_cfg(10, mask_prob=0.0)
        with pytest.raises(ValueError):
            meta_cfg(10, lr=0.0)
        with pytest.raises(ValueError):
            KdConfig(teacher="x", weight=-1.0)


class TestMetricLog:
    def test_train_steps_strictly_increase(self):
        log = MetricLog()
        log.log_train(1, loss=1.0)
        log.log_train(2, loss=0.9)
        with pytest.raises(ValueError):
            log.log_train(2, loss=0.8)

    def test_eval_may_share_a_step_but_not_rewind(self):
        log = MetricLog()
        log.log_train(5, loss=1.0)
        log.log_eval(5, "acc", 0.5)
        log.log_eval(5, "aer", 0.4)
        with pytest.raises(ValueError):
            log.log_eval(4, "acc", 0.5)

    def test_ndjson_round_trip(self, tmp_path):
        p = tmp_path / "metrics.ndjson"
        with MetricLog(p) as log:
            log.log_train(1, loss=np.float32(0.5), tokens={"l0": np.int64(64)})
            log.log_eval(1, "acc", 0.25)
        records = read_metric_log(p)
        assert records == log.records
        assert records[0]["loss"] == 0.5 and records[0]["tokens"]["l0"] == 64
        assert records[1] == {"kind": "eval", "step": 1, "metric": "acc", "value": 0.25}

    def test_append_across_instances(self, tmp_path):
        p = tmp_path / "metrics.ndjson"
        with MetricLog(p) as log:
            log.log_train(1, loss=1.0)
        with MetricLog(p) as log:
            log.log_train(2, loss=0.5)
        assert [r["step"] for r in read_metric_log(p)] == [1, 2]


class TestKdLoss:
    def test_identical_logits_give_zero(self):
        logits = np.random.default_rng(0).normal(size=(4, 6))
        for tau in (1.0, 2.0):
            v = kd_loss(Tensor(logits, dtype=np.float64), logits, temperature=tau)
            assert abs(float(v.data)) < 1e-12

    def test_two_class_hand_case(self):
        teacher = np.log(np.array([[0.9, 0.1]]))
        student = np.zeros((1, 2))
        v = kd_loss(Tensor(student, dtype=np.float64), teacher, temperature=1.0)
        expect = 0.9 * np.log(0.9 / 0.5) + 0.1 * np.log(0.1 / 0.5)
        assert abs(float(v.data) - expect) < 1e-9
        assert abs(float(v.data) - 0.3681) < 1e-4

    def test_temperature_scaling_matches_oracle(self):
        rng = np.random.default_rng(1)
        t_logits = rng.normal(size=(5, 7))
        s_logits = rng.normal(size=(5, 7))
        tau = 2.0
        v = kd_loss(Tensor(s_logits, dtype=np.float64), t_logits, temperature=tau)

        def softmax(x):
            e = np.exp(x - x.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        pt, ps = softmax(t_logits / tau), softmax(s_logits / tau)
        expect = tau**2 * (pt * np.log(pt / ps)).sum(axis=1).mean()
        assert abs(float(v.data) - expect) < 1e-10

    def test_empty_mask_is_exactly_zero(self):
        logits = np.ones((3, 4))
        v = kd_loss(Tensor(logits), logits, mask=np.zeros(3, dtype=bool))
        assert float(v.data) == 0.0

    def test_mask_selects_rows(self):
        rng = np.random.default_rng(2)
        t_logits = rng.normal(size=(4, 5))
        s_logits = rng.normal(size=(4, 5))
        mask = np.array([True, False, True, False])
        v = kd_loss(Tensor(s_logits, dtype=np.float64), t_logits, mask=mask)
        ref = kd_loss(Tensor(s_logits[mask], dtype=np.float64), t_logits[mask])
        assert abs(float(v.data) - float(ref.data)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        t_logits = rng.normal(size=(3, 6))
        params = {"s": Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=np.float64)}

        def lf():
            return float(kd_loss(params["s"], t_logits, temperature=2.0).data)

        kd_loss(params["s"], t_logits, temperature=2.0).backward()
        assert finite_diff_max_rel_err(params, lf, coords_per_tensor=8) < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_loss(Tensor(np.ones((2, 3))), np.ones((2, 4)))


class TestMetaPretraining:
    def test_zero_steps_returns_init_unchanged(self):
        sents = distinct_sentences(10)
        vocab = build_vocab(sents, max_size=100)
        mconfig = tiny_model(vocab.size)
        cfg = PhaseConfig(phase="meta", steps=0, seed=3)
        ckpt = run_meta_pretraining(cfg, sents, mconfig, vocab)
        reference = init_params(mconfig, seed=3)
        for name, p in ckpt.params.items():
            np.testing.assert_array_equal(p.data, reference[name].data)
        assert ckpt.metadata["phase"] == "meta" and ckpt.metadata["step"] == 0

    def test_multilingual_corpus_rejected(self):
        with pytest.raises(ValueError):
            run_meta_pretraining(
                meta_cfg(10), {"l0": ["a b c"], "l1": ["d e f"]}, tiny_model(50)
            )

    def test_loss_decreases(self):
        sents = distinct_sentences(20)
        log = MetricLog()
        run_meta_pretraining(meta_cfg(120), sents, tiny_model(150), log=log)
        losses = [r["loss"] for r in log.records if r["kind"] == "train"]
        assert len(losses) == 120
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_memorizes_small_corpus(self):
        sents = permutation_sentences()
        log = MetricLog()
        cfg = meta_cfg(2000, batch_size=8, seq_len=32, lr=3e-3, mask_prob=0.2, seed=0)
        mconfig = tiny_model(80, hidden=96)
        run_meta_pretraining(cfg, sents, mconfig, log=log)
        final = [r["loss"] for r in log.records[-50:]]
        assert np.mean(final) < 0.1

    def test_deterministic(self):
        sents = distinct_sentences(12)
        log_a, log_b = MetricLog(), MetricLog()
        a = run_meta_pretraining(meta_cfg(25), sents, tiny_model(100), log=log_a)
        b = run_meta_pretraining(meta_cfg(25), sents, tiny_model(100), log=log_b)
        assert log_a.records == log_b.records
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_resume_matches_uninterrupted(self, tmp_path):
        sents = distinct_sentences(12)
        vocab = build_vocab(sents, max_size=100)
        mconfig = tiny_model(vocab.size)
        path = tmp_path / "mid.ckpt"
        hook_steps = []

        def hook(step, snapshot):
            # abuse the eval hook to capture a mid-run checkpoint, then
            # restart the same 40-step run from it
            hook_steps.append(step)
            save_checkpoint(snapshot, path)
            return {}

        run_crosslingual_pretraining(
            xl_cfg(40, eval_every=25, alpha=1.0),
            {"l0": sents}, vocab=vocab, model_config=mconfig, eval_hook=hook,
        )
        assert hook_steps == [25]
        log_b = MetricLog()
        resumed = run_crosslingual_pretraining(
            xl_cfg(40, alpha=1.0),
            {"l0": sents}, vocab=vocab, model_config=mconfig,
            resume=load_checkpoint(path), log=log_b,
        )
        log_ref = MetricLog()
        uninterrupted = run_crosslingual_pretraining(
            xl_cfg(40, alpha=1.0),
            {"l0": sents}, vocab=vocab, model_config=mconfig, log=log_ref,
        )
        for name in uninterrupted.params:
            np.testing.assert_array_equal(
                resumed.params[name].data, uninterrupted.params[name].data
            )
        assert log_b.records == log_ref.records[25:]


class TestCrosslingualPretraining:
    def make_world(self, n=14):
        l0 = distinct_sentences(n, prefix="a")
        l1 = distinct_sentences(n, prefix="b")
        return {"l0": l0, "l1": l1}

    def test_meta_checkpoint_requires_plan(self):
        corpora = self.make_world()
        meta = run_meta_pretraining(meta_cfg(0, seed=1), corpora["l0"], tiny_model(100))
        with pytest.raises(ValueError):
            run_crosslingual_pretraining(xl_cfg(5), corpora, meta_checkpoint=meta)
        with pytest.raises(ValueError):
            run_crosslingual_pretraining(
                xl_cfg(5, init_plan=InitPlan(mode="both")), corpora
            )

    def test_batch_sequence_identical_across_initializations(self):
        corpora = self.make_world()
        meta = run_meta_pretraining(meta_cfg(10, seed=1), corpora["l0"], tiny_model(100))
        log_scratch, log_meta = MetricLog(), MetricLog()
        run_crosslingual_pretraining(
            xl_cfg(15), corpora, model_config=tiny_model(200), log=log_scratch
        )
        run_crosslingual_pretraining(
            xl_cfg(15, init_plan=InitPlan(mode="both")), corpora,
            meta_checkpoint=meta, model_config=tiny_model(200), log=log_meta,
        )
        for a, b in zip(log_scratch.records, log_meta.records):
            assert a["tokens"] == b["tokens"]
            assert a["n_predicted"] == b["n_predicted"]
            assert a["loss"] != b["loss"]  # different initializations

    def test_continuity_from_meta_with_full_overlap(self):
        sents = distinct_sentences(30)
        vocab = build_vocab(sents, max_size=300)
        mconfig = tiny_model(vocab.size, hidden=64)
        meta_log = MetricLog()
        meta = run_meta_pretraining(
            meta_cfg(400, seq_len=32), sents, mconfig, vocab, log=meta_log
        )
        xl_log = MetricLog()
        run_crosslingual_pretraining(
            xl_cfg(1, seq_len=32, init_plan=InitPlan(mode="both")),
            {"l0": sents}, meta_checkpoint=meta, model_config=mconfig,
            vocab=vocab, log=xl_log,
        )
        meta_tail = np.mean([r["mlm_loss"] for r in meta_log.records[-10:]])
        assert abs(xl_log.records[0]["mlm_loss"] - meta_tail) < 0.5

    def test_freeze_body_pins_body_tensors(self):
        corpora = self.make_world()
        meta = run_meta_pretraining(meta_cfg(10, seed=1), corpora["l0"], tiny_model(100))
        plan = InitPlan(mode="both", freeze_body=True)
        out = run_crosslingual_pretraining(
            xl_cfg(25, init_plan=plan), corpora,
            meta_checkpoint=meta, model_config=tiny_model(200),
        )
        for name, p in out.params.items():
            part = partition_of(name)
            if part == "body":
                np.testing.assert_array_equal(p.data, meta.params[name].data)
            elif name == "tok_emb":
                same_shape = p.shape == meta.params[name].shape
                assert not same_shape or (p.data != meta.params[name].data).any()

    def test_eval_hook_runs_on_schedule(self):
        corpora = self.make_world()
        seen = []

        def hook(step, ckpt):
            seen.append((step, ckpt.metadata["step"]))
            return {"probe": step / 100}

        log = MetricLog()
        run_crosslingual_pretraining(
            xl_cfg(9, eval_every=3), corpora, model_config=tiny_model(200),
            eval_hook=hook, log=log,
        )
        assert seen == [(3, 3), (6, 6), (9, 9)]
        evals = [r for r in log.records if r["kind"] == "eval"]
        assert [(r["step"], r["value"]) for r in evals] == [(3, 0.03), (6, 0.06), (9, 0.09)]

    def test_kd_zero_weight_is_bit_identical_to_no_kd(self):
        corpora = self.make_world()
        meta = run_meta_pretraining(meta_cfg(10, seed=1), corpora["l0"], tiny_model(100))
        log_plain, log_kd = MetricLog(), MetricLog()
        plain = run_crosslingual_pretraining(
            xl_cfg(12, init_plan=InitPlan(mode="both")), corpora,
            meta_checkpoint=meta, model_config=tiny_model(200), log=log_plain,
        )
        kd = KdConfig(teacher=meta, weight=0.0, source_lang="l0")
        with_kd = run_crosslingual_pretraining(
            xl_cfg(12, init_plan=InitPlan(mode="both"), kd=kd), corpora,
            meta_checkpoint=meta, model_config=tiny_model(200), log=log_kd,
        )
        assert log_plain.records == log_kd.records
        for name in plain.params:
            np.testing.assert_array_equal(plain.params[name].data, with_kd.params[name].data)

    def test_kd_trains_and_logs_the_term(self):
        corpora = self.make_world()
        meta = run_meta_pretraining(
            meta_cfg(30, seed=1), corpora["l0"], tiny_model(100)
        )
        kd = KdConfig(teacher=meta, weight=0.5, temperature=2.0, source_lang="l0")
        log = MetricLog()
        run_crosslingual_pretraining(
            xl_cfg(8, init_plan=InitPlan(mode="both"), kd=kd), corpora,
            meta_checkpoint=meta, model_config=tiny_model(200), log=log,
        )
        kd_values = [r["kd_loss"] for r in log.records if r["kind"] == "train"]
        assert len(kd_values) == 8 and all(v >= 0.0 for v in kd_values)
        assert any(v > 0.0 for v in kd_values)

    def test_kd_zero_when_no_source_rows(self):
        corpora = {"l1": distinct_sentences(10, prefix="b")}
        teacher_corpus = distinct_sentences(10, prefix="a")
        meta = run_meta_pretraining(meta_cfg(5, seed=1), teacher_corpus, tiny_model(80))
        kd = KdConfig(teacher=meta, weight=1.0, source_lang="l0")
        log = MetricLog()
        run_crosslingual_pretraining(
            xl_cfg(6, kd=kd), corpora, model_config=tiny_model(80), log=log,
        )
        assert all(r["kd_loss"] == 0.0 for r in log.records if r["kind"] == "train")

    def test_kd_requires_source_lang_and_length_budget(self):
        sents = distinct_sentences(8)
        vocab = build_vocab(sents, max_size=80)
        meta = run_meta_pretraining(meta_cfg(0), sents, tiny_model(vocab.size), vocab)
        with pytest.raises(ValueError):
            _setup_kd(KdConfig(teacher=meta), vocab, seq_len=16)
        with pytest.raises(ValueError):
            _setup_kd(KdConfig(teacher=meta, source_lang="l0"), vocab, seq_len=64)

    def test_total_loss_with_kd_passes_gradient_check(self):
        with default_dtype(np.float64):
            words = [f"w{i}" for i in range(20)]
            student_vocab = Vocabulary(SPECIAL_TOKENS + tuple(words))
            teacher_vocab = Vocabulary(SPECIAL_TOKENS + tuple(words[:15]))
            s_cfg = tiny_model(student_vocab.size, layers=1, hidden=16, max_positions=16)
            t_cfg = tiny_model(teacher_vocab.size, layers=1, hidden=16, max_positions=16)
            params = init_params(s_cfg, seed=0)
            teacher = ModelCheckpoint(t_cfg, teacher_vocab, init_params(t_cfg, seed=1))
            ctx = _setup_kd(
                KdConfig(teacher=teacher, weight=0.7, source_lang="l0"),
                student_vocab, seq_len=12,
            )
            rng = np.random.default_rng(2)
            ids = rng.integers(5, student_vocab.size, size=(2, 12))
            batch = TokenBatch(ids, np.ones((2, 12), dtype=bool), ("l0", "l1"))
            mb = mask_tokens(batch, student_vocab, mask_prob=0.3, seed=3)

            def total():
                hiddens = forward(params, s_cfg, mb.input_ids, mb.attention_mask, "eval")
                targets = mb.target_ids.reshape(-1)
                fp = np.flatnonzero(targets != IGNORE_INDEX)
                logits = mlm_logits(params, s_cfg, hiddens[-1], fp)
                loss = cross_entropy(logits, targets[fp])
                term = _kd_term(ctx, mb, hiddens, params, s_cfg)
                return ag.add(loss, ag.mul_scalar(term, 0.7))

            loss = total()
            loss.backward()
            err = finite_diff_max_rel_err(params, lambda: float(total().data), coords_per_tensor=4)
        assert err < 1e-4


def labeled_split(n_per_class=8, prefix=""):
    rows = []
    for c in range(2):
        for i in range(n_per_class):
            rows.append((f"topic{c}", f"{prefix}c{c}x{i} {prefix}c{c}y{i} {prefix}mark{c}"))
    return rows


class TestFinetune:
    def make_checkpoint(self, rows_by_lang):
        lines = [text for rows in rows_by_lang.values() for _, text in rows]
        vocab = build_vocab(lines, max_size=400)
        mconfig = tiny_model(vocab.size)
        return ModelCheckpoint(mconfig, vocab, init_params(mconfig, seed=0))

    def test_memorizes_identical_split(self):
        train = {"l0": labeled_split()}
        ckpt = self.make_checkpoint(train)
        cfg = PhaseConfig(phase="finetune", steps=150, batch_size=8, lr=1e-3, seed=0)
        model, scores = finetune(ckpt, train, train, cfg, source_lang="l0")
        assert scores["l0"] >= 0.99
        assert classification_accuracy(model, train["l0"]) == scores["l0"]

    def test_reports_every_language(self):
        train = {"l0": labeled_split()}
        test = {"l0": labeled_split(), "l1": labeled_split(prefix="b")}
        ckpt = self.make_checkpoint({**train, **test})
        cfg = PhaseConfig(phase="finetune", steps=20, batch_size=8, seed=0)
        _, scores = finetune(ckpt, train, test, cfg, source_lang="l0")
        assert sorted(scores) == ["l0", "l1"]
        assert all(0.0 <= v <= 1.0 for v in scores.values())

    def test_label_set_mismatch_rejected(self):
        train = {"l0": labeled_split()}
        bad_test = {"l0": [("topic9", "c0x0 c0y0 mark0")]}
        ckpt = self.make_checkpoint(train)
        cfg = PhaseConfig(phase="finetune", steps=5, seed=0)
        with pytest.raises(ValueError):
            finetune(ckpt, train, bad_test, cfg, source_lang="l0")

    def test_seed_controls_the_run(self):
        data = {"l0": labeled_split()}
        ckpt = self.make_checkpoint(data)
        heads = {}
        for seed in (0, 0, 1):
            cfg = PhaseConfig(phase="finetune", steps=12, batch_size=8, seed=seed)
            model, _ = finetune(ckpt, data, data, cfg, source_lang="l0")
            heads.setdefault(seed, []).append(model.params["head.w"].data)
        np.testing.assert_array_equal(heads[0][0], heads[0][1])
        assert (heads[0][0] != heads[1][0]).any()

    def test_freeze_body_trains_only_the_head(self):
        train = {"l0": labeled_split()}
        ckpt = self.make_checkpoint(train)
        cfg = PhaseConfig(phase="finetune", steps=15, batch_size=8, freeze_body=True, seed=0)
        model, _ = finetune(ckpt, train, train, cfg, source_lang="l0")
        for name, p in model.params.items():
            if name.startswith("head."):
                continue
            np.testing.assert_array_equal(p.data, ckpt.params[name].data)

    def test_missing_source_language(self):
        train = {"l0": labeled_split()}
        ckpt = self.make_checkpoint(train)
        cfg = PhaseConfig(phase="finetune", steps=5, seed=0)
        with pytest.raises(ValueError):
            finetune(ckpt, train, train, cfg, source_lang="l9")

    def test_source_checkpoint_not_mutated(self):
        train = {"l0": labeled_split()}
        ckpt = self.make_checkpoint(train)
        before = {n: p.data.copy() for n, p in ckpt.params.items()}
        cfg = PhaseConfig(phase="finetune", steps=10, batch_size=8, seed=0)
        finetune(ckpt, train, train, cfg, source_lang="l0")
        assert "head.w" not in ckpt.params
        for name, p in ckpt.params.items():
            np.testing.assert_array_equal(p.data, before[name])
