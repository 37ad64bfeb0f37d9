"""Command-line surface tying corpus generation, training, and evaluation
into reproducible experiments.

Every command resolves its options from explicit flags, then an optional
--config JSON file, then built-in defaults, writes all outputs atomically
under --out, and records an experiment manifest there. `rerun` replays a
manifest. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

import argparse
import csv
import hashlib
import io
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path
from types import SimpleNamespace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# keep heavy imports (numpy and the rest of the package) inside handlers so
# XLPRETRAIN_THREADS can still influence BLAS thread pools at startup

REQUIRED = object()


class CliError(Exception):
    code = EXIT_CONFIG


class ConfigError(CliError):
    code = EXIT_CONFIG


class DataError(CliError):
    code = EXIT_DATA


class NumericError(CliError):
    code = EXIT_NUMERIC


def _apply_thread_env() -> None:
    raw = os.environ.get("XLPRETRAIN_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"XLPRETRAIN_THREADS must be a positive integer: {raw!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


# ---------------------------------------------------------------------------
# atomic output helpers
# ---------------------------------------------------------------------------


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_json(path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _atomic_write_dir(out: Path, build) -> None:
    """Build a directory under a temp sibling, then move files into place."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        build(tmp)
        for f in sorted(tmp.rglob("*")):
            if f.is_file():
                target = out / f.relative_to(tmp)
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(f, target)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def _metrics_text(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _hash_inputs(files, params: dict) -> str:
    h = hashlib.sha256()
    for label, path in sorted((str(a), Path(b)) for a, b in files):
        h.update(label.encode("utf-8"))
        if path.is_dir():
            for f in sorted(path.rglob("*")):
                if f.is_file():
                    h.update(str(f.relative_to(path)).encode("utf-8"))
                    h.update(f.read_bytes())
        elif path.is_file():
            h.update(path.read_bytes())
    h.update(json.dumps(params, sort_keys=True, default=str).encode("utf-8"))
    return "sha256:" + h.hexdigest()


def _write_manifest(out: Path, command: str, o, input_files, seeds) -> None:
    params = {k: v for k, v in vars(o).items() if k not in ("out", "config")}
    digest = _hash_inputs(input_files, params)
    manifest = {
        "experiment_id": f"{command}-{digest[7:19]}",
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in params.items()},
        "seeds": list(seeds),
        "out": str(out),
        "input_hash": digest,
    }
    _atomic_write_json(Path(out) / "manifest.json", manifest)


# ---------------------------------------------------------------------------
# option tables: (flag, type, default, help); default REQUIRED means the
# resolved value must come from the flag or the config file
# ---------------------------------------------------------------------------

_TRAIN_OPTS = [
    ("--steps", int, 1000, "training steps"),
    ("--batch-size", int, 32, "rows per batch"),
    ("--seq-len", int, 64, "packed block length in tokens"),
    ("--lr", float, 3e-4, "peak learning rate"),
    ("--warmup", int, -1, "warmup steps; negative means a tenth of steps"),
    ("--weight-decay", float, 0.01, "decoupled weight decay"),
    ("--clip-norm", float, 1.0, "global gradient-norm clip"),
    ("--mask-prob", float, 0.15, "fraction of positions selected for MLM"),
    ("--seed", int, 0, "run seed"),
]

_MODEL_OPTS = [
    ("--vocab-size", int, 8000, "maximum vocabulary size"),
    ("--layers", int, 4, "encoder layers"),
    ("--hidden", int, 128, "hidden width"),
    ("--heads", int, 4, "attention heads"),
    ("--max-positions", int, 128, "maximum sequence length"),
    ("--dropout", float, 0.1, "dropout probability"),
]

_OPTIONS = {
    "gen-corpus": [
        ("--base", str, None, "base corpus file (TSV label<TAB>text, or plain text); generated when omitted"),
        ("--base-sentences", int, 6000, "generated base corpus size"),
        ("--topics", int, 4, "topics in the generated base corpus"),
        ("--base-words", int, 400, "word inventory of the generated base corpus"),
        ("--languages", int, 3, "number of cipher languages (source included)"),
        ("--overlap", float, 0.3, "fraction of lexicon types shared with the source"),
        ("--permute-window", int, 1, "word-order permutation window (1 = no divergence)"),
        ("--parallel-dev", int, 400, "held-out parallel dev pairs per language"),
        ("--parallel-test", int, 400, "held-out parallel test pairs per language"),
        ("--task-train", int, 1000, "classification training examples"),
        ("--task-test", int, 300, "classification test examples"),
        ("--seed", int, 0, "generation seed"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "meta-pretrain": [
        ("--corpus", str, REQUIRED, "monolingual corpus file, one sentence per line"),
        *_TRAIN_OPTS,
        *_MODEL_OPTS,
        ("--resume", str, None, "checkpoint to resume from"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "xl-pretrain": [
        ("--corpus-dir", str, REQUIRED, "directory of <lang>.txt corpora (a gen-corpus root also works)"),
        ("--meta", str, None, "meta-pretrained checkpoint to transplant from"),
        ("--init-mode", str, None, "transplant mode: none | body | emb | both (default: both with --meta, else none)"),
        ("--freeze-body", bool, False, "freeze transplanted body tensors"),
        ("--dict", list, None, "bilingual lexicon file for dictionary matching; repeatable"),
        ("--kd-teacher", str, None, "teacher checkpoint for knowledge distillation"),
        ("--kd-weight", float, 1.0, "distillation loss weight"),
        ("--kd-temperature", float, 2.0, "distillation temperature"),
        ("--kd-source-lang", str, "l0", "language whose rows receive the distillation loss"),
        ("--alpha", float, 0.7, "rebalanced language-sampling exponent"),
        ("--save-every", int, 0, "also save a checkpoint every N steps (0 = final only)"),
        *_TRAIN_OPTS,
        *_MODEL_OPTS,
        ("--resume", str, None, "checkpoint to resume from"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "finetune": [
        ("--checkpoint", str, REQUIRED, "pretrained checkpoint"),
        ("--world", str, None, "gen-corpus directory providing task/<lang>.{train,test}.tsv"),
        ("--train", str, None, "labeled TSV training file (alternative to --world)"),
        ("--test", str, None, "labeled TSV test file (alternative to --world)"),
        ("--source-lang", str, None, "language finetuned on (default: the world's source)"),
        ("--steps", int, 300, "finetuning steps"),
        ("--batch-size", int, 32, "rows per batch"),
        ("--lr", float, 3e-4, "peak learning rate"),
        ("--warmup", int, -1, "warmup steps; negative means a tenth of steps"),
        ("--freeze-body", bool, False, "train only the classification head"),
        ("--seed", int, 0, "run seed"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "eval/retrieval": [
        ("--checkpoint", str, REQUIRED, "model checkpoint"),
        ("--src", str, REQUIRED, "source-side sentences, one per line"),
        ("--tgt", str, REQUIRED, "target-side sentences, parallel to --src"),
        ("--layer", int, None, "encoder layer to pool (default: final layer)"),
        ("--include-specials", bool, False, "pool [BOS]/[EOS] positions too"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "eval/align": [
        ("--checkpoint", str, REQUIRED, "model checkpoint"),
        ("--pair", str, None, "parallel stem: reads <stem>.src/.tgt/.align"),
        ("--src", str, None, "source sentences (alternative to --pair)"),
        ("--tgt", str, None, "target sentences (alternative to --pair)"),
        ("--gold", str, None, "gold alignment file (alternative to --pair)"),
        ("--layer", int, None, "encoder layer (default: final layer)"),
        ("--eps", float, 0.1, "Sinkhorn entropic regularization"),
        ("--iters", int, 100, "Sinkhorn iteration budget"),
        ("--threshold", float, 0.9, "alignment keep threshold relative to row/column maxima"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "eval/sweep-layers": [
        ("--checkpoint", str, REQUIRED, "model checkpoint"),
        ("--pair", str, None, "parallel stem: reads <stem>.src/.tgt/.align"),
        ("--src", str, None, "source sentences (alternative to --pair)"),
        ("--tgt", str, None, "target sentences (alternative to --pair)"),
        ("--gold", str, None, "gold alignment file (alternative to --pair)"),
        ("--eps", float, 0.1, "Sinkhorn entropic regularization"),
        ("--iters", int, 100, "Sinkhorn iteration budget"),
        ("--threshold", float, 0.9, "alignment keep threshold relative to row/column maxima"),
        ("--include-specials", bool, False, "pool [BOS]/[EOS] positions too"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "eval/gap": [
        ("--scores-file", str, None, "JSON {language: score} (e.g. finetune scores.json)"),
        ("--source-lang", str, "l0", "source language key in --scores-file"),
        ("--source-score", float, None, "source-language score (alternative to --scores-file)"),
        ("--target-scores", str, None, "comma-separated target-language scores"),
        ("--step", int, 0, "training step the scores belong to"),
        ("--out", str, REQUIRED, "output directory"),
    ],
    "compare": [
        ("--world", str, REQUIRED, "gen-corpus directory"),
        ("--meta", str, REQUIRED, "meta-pretrained checkpoint for the initialized arm"),
        ("--seeds", int, 5, "number of seeds (0..N-1) unless --seed-list is given"),
        ("--seed-list", str, None, "comma-separated explicit seeds"),
        ("--init-mode", str, "both", "transplant mode of the meta arm: body | emb | both"),
        ("--eval-every", int, 0, "finetune-and-score every N steps (0 = final step only)"),
        ("--finetune-steps", int, 300, "finetuning steps per evaluation"),
        ("--finetune-lr", float, 3e-4, "finetuning learning rate"),
        ("--finetune-batch", int, 32, "finetuning batch size"),
        ("--alpha", float, 0.7, "rebalanced language-sampling exponent"),
        *_TRAIN_OPTS,
        *_MODEL_OPTS,
        ("--out", str, REQUIRED, "output directory"),
    ],
}


def _add_options(parser: argparse.ArgumentParser, table) -> None:
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file of option defaults (keys = flag names without --)")
    for flag, typ, default, help_text in table:
        shown = "required" if default is REQUIRED else default
        if typ is bool:
            parser.add_argument(flag, action="store_true", default=None,
                                help=f"{help_text} (default: {shown})")
        elif typ is list:
            parser.add_argument(flag, action="append", default=None,
                                help=f"{help_text} (default: none)")
        else:
            parser.add_argument(flag, type=typ, default=None,
                                help=f"{help_text} (default: {shown})")


def _resolve(ns: argparse.Namespace, table) -> SimpleNamespace:
    """Flag > config file > default; REQUIRED defaults must be filled."""
    file_cfg = {}
    if getattr(ns, "config", None):
        path = Path(ns.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"config file is not valid JSON: {path}: {e}")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config file must hold a JSON object: {path}")
    known = {flag.lstrip("-").replace("-", "_"): (typ, default)
             for flag, typ, default, _ in table}
    unknown = set(file_cfg) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {"config": getattr(ns, "config", None)}
    for dest, (typ, default) in known.items():
        value = getattr(ns, dest)
        if value is None:
            value = file_cfg.get(dest)
        if value is None and dest == "out":
            value = os.environ.get("XLPRETRAIN_OUT")
        if value is None:
            value = False if typ is bool else default
        if value is REQUIRED:
            hint = " (or set XLPRETRAIN_OUT)" if dest == "out" else ""
            raise ConfigError(f"--{dest.replace('_', '-')} is required{hint}")
        if typ in (int, float) and value is not None and not isinstance(value, bool):
            try:
                value = typ(value)
            except (TypeError, ValueError):
                raise ConfigError(f"--{dest.replace('_', '-')} must be {typ.__name__}: {value!r}")
        resolved[dest] = value
    return SimpleNamespace(**resolved)


# ---------------------------------------------------------------------------
# shared handler plumbing
# ---------------------------------------------------------------------------


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _need_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_ckpt(path, what: str = "checkpoint"):
    from .model import CheckpointError, load_checkpoint

    p = _need_file(path, what)
    try:
        return load_checkpoint(p)
    except CheckpointError as e:
        raise DataError(f"cannot load {what} {p}: {e}")


def _read_sentences(path, what: str):
    from .corpus import read_corpus_file

    lines = read_corpus_file(_need_file(path, what))
    if not lines:
        raise DataError(f"{what} is empty: {path}")
    return lines


def _check_numeric(records) -> None:
    import math

    run = worst = 0
    for r in records:
        if r.get("kind") != "train":
            continue
        bad = not math.isfinite(r["loss"])
        run = run + 1 if bad else 0
        worst = max(worst, run)
    if worst > 50:
        raise NumericError(f"training loss non-finite for {worst} consecutive steps")


def _model_config(o, vocab_size: int):
    from .model import ModelConfig

    try:
        config = ModelConfig(
            vocab_size=vocab_size, layers=o.layers, hidden=o.hidden, heads=o.heads,
            max_positions=o.max_positions, dropout=o.dropout,
        )
    except ValueError as e:
        raise ConfigError(str(e))
    if o.seq_len > config.max_positions:
        raise ConfigError(
            f"--seq-len {o.seq_len} exceeds --max-positions {config.max_positions}"
        )
    return config


def _phase_config(o, phase: str, **extra):
    from .training import PhaseConfig

    try:
        return PhaseConfig(
            phase=phase, steps=o.steps, batch_size=o.batch_size, seq_len=o.seq_len,
            lr=o.lr, warmup_steps=o.warmup, weight_decay=o.weight_decay,
            clip_norm=o.clip_norm, mask_prob=o.mask_prob, seed=o.seed, **extra,
        )
    except ValueError as e:
        raise ConfigError(str(e))


def _finetune_config(*, steps, batch_size, lr, seed, freeze_body=False, warmup=-1):
    from .training import PhaseConfig

    try:
        return PhaseConfig(
            phase="finetune", steps=steps, batch_size=batch_size, lr=lr,
            warmup_steps=warmup, seed=seed, freeze_body=freeze_body,
        )
    except ValueError as e:
        raise ConfigError(str(e))


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------


def _cmd_gen_corpus(o) -> None:
    from .corpus import (
        BaseCorpus,
        generate_base_corpus,
        generate_synthetic_multilingual,
        read_corpus_file,
        read_labeled_tsv,
        write_world,
    )

    inputs = []
    if o.base:
        path = _need_file(o.base, "base corpus")
        inputs.append(("base", path))
        if path.suffix == ".tsv":
            rows = read_labeled_tsv(path)
            base = BaseCorpus([t for _, t in rows], [l for l, _ in rows],
                              len({l for l, _ in rows}))
        else:
            base = read_corpus_file(path)
    else:
        try:
            base = generate_base_corpus(
                o.base_sentences, seed=o.seed, n_topics=o.topics, n_words=o.base_words,
            )
        except ValueError as e:
            raise ConfigError(str(e))
    try:
        world = generate_synthetic_multilingual(
            base,
            n_languages=o.languages,
            overlap_fraction=o.overlap,
            permute_window=o.permute_window,
            seed=o.seed,
            n_parallel_dev=o.parallel_dev,
            n_parallel_test=o.parallel_test,
            n_task_train=o.task_train,
            n_task_test=o.task_test,
        )
    except ValueError as e:
        raise (DataError if o.base else ConfigError)(str(e))
    out = Path(o.out)
    _atomic_write_dir(out, lambda d: write_world(world, d))
    _write_manifest(out, "gen-corpus", o, inputs, [o.seed])
    print(f"wrote {len(world.languages)}-language world to {out}")


def _run_and_persist(out: Path, run) -> None:
    """Run a pretraining phase, then write checkpoint + metrics atomically."""
    from .model import save_checkpoint
    from .training import MetricLog

    log = MetricLog()
    ckpt = run(log)
    _check_numeric(log.records)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    _atomic_write_text(out / "metrics.ndjson", _metrics_text(log.records))
    last = [r for r in log.records if r.get("kind") == "train"][-5:]
    if last:
        mean = sum(r["loss"] for r in last) / len(last)
        print(f"final loss (mean of last {len(last)} steps): {mean:.4f}")


def _cmd_meta_pretrain(o) -> None:
    from .training import run_meta_pretraining

    corpus = _read_sentences(o.corpus, "corpus")
    config = _phase_config(o, "meta")
    model_config = _model_config(o, o.vocab_size)
    inputs = [("corpus", Path(o.corpus))]
    resume = None
    if o.resume:
        resume = _load_ckpt(o.resume, "resume checkpoint")
        inputs.append(("resume", Path(o.resume)))
    out = Path(o.out)

    def run(log):
        try:
            return run_meta_pretraining(config, corpus, model_config, log=log, resume=resume)
        except ValueError as e:
            raise DataError(str(e))

    _run_and_persist(out, run)
    _write_manifest(out, "meta-pretrain", o, inputs, [o.seed])


def _corpora_root(path) -> Path:
    root = _need_dir(path, "corpus directory")
    return root / "corpus" if (root / "corpus").is_dir() else root


def _cmd_xl_pretrain(o) -> None:
    from .corpus import read_corpus_dir, read_lexicon
    from .model import save_checkpoint
    from .tokenization import build_vocab
    from .training import KdConfig, run_crosslingual_pretraining
    from .transplant import (
        InitPlan,
        match_vocab,
        transplant_report,
        write_transplant_report,
    )

    root = _corpora_root(o.corpus_dir)
    try:
        corpora = read_corpus_dir(root)
    except FileNotFoundError as e:
        raise DataError(str(e))
    inputs = [("corpus-dir", root)]

    meta = None
    if o.meta:
        meta = _load_ckpt(o.meta, "meta checkpoint")
        inputs.append(("meta", Path(o.meta)))
    mode = o.init_mode or ("both" if meta else "none")
    if mode not in ("none", "body", "emb", "both"):
        raise ConfigError(f"--init-mode must be none, body, emb, or both: {mode!r}")
    if mode != "none" and meta is None:
        raise ConfigError(f"--init-mode {mode} requires --meta (no meta checkpoint given)")

    dict_paths = [str(_need_file(p, "lexicon")) for p in (o.dict or [])]
    inputs.extend(("dict", Path(p)) for p in dict_paths)
    try:
        plan = InitPlan(mode=mode, freeze_body=o.freeze_body,
                        dictionary_paths=tuple(dict_paths))
    except ValueError as e:
        raise ConfigError(str(e))

    kd = None
    if o.kd_teacher:
        teacher = _load_ckpt(o.kd_teacher, "KD teacher checkpoint")
        inputs.append(("kd-teacher", Path(o.kd_teacher)))
        try:
            kd = KdConfig(teacher=teacher, weight=o.kd_weight,
                          temperature=o.kd_temperature, source_lang=o.kd_source_lang)
        except ValueError as e:
            raise ConfigError(str(e))

    config = _phase_config(o, "crosslingual", alpha=o.alpha, init_plan=plan, kd=kd,
                           eval_every=o.save_every)
    lines = [s for sents in corpora.values() for s in sents]
    vocab = build_vocab(lines, max_size=o.vocab_size)
    model_config = _model_config(o, vocab.size)
    resume = None
    if o.resume:
        resume = _load_ckpt(o.resume, "resume checkpoint")
        inputs.append(("resume", Path(o.resume)))
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)

    hook = None
    if o.save_every:
        def hook(step, snapshot):
            save_checkpoint(snapshot, out / f"checkpoint_step{step}.ckpt")
            return {}

    def run(log):
        try:
            return run_crosslingual_pretraining(
                config, corpora, meta_checkpoint=meta, model_config=model_config,
                vocab=vocab, eval_hook=hook, log=log, resume=resume,
            )
        except ValueError as e:
            raise DataError(str(e))

    _run_and_persist(out, run)

    if meta is not None and mode != "none":
        skipped = 0
        lexicons = []
        for p in dict_paths:
            pairs, bad = read_lexicon(p)
            lexicons.append(pairs)
            skipped += bad
        tmap = match_vocab(vocab, meta.vocab, lexicons or None)
        report = transplant_report(tmap, vocab, lexicon_lines_skipped=skipped)
        write_transplant_report(report, out / "transplant_report.json")
        print(f"transplant coverage: {report['coverage']}")
    _write_manifest(out, "xl-pretrain", o, inputs, [o.seed])


def _read_task_table(root: Path, split: str) -> dict:
    from .corpus import read_labeled_tsv

    table = {}
    for path in sorted((root / "task").glob(f"*.{split}.tsv")):
        table[path.name.split(".")[0]] = read_labeled_tsv(path)
    if not table:
        raise DataError(f"no task/<lang>.{split}.tsv files under {root}")
    return table


def _cmd_finetune(o) -> None:
    from .training import finetune

    ckpt = _load_ckpt(o.checkpoint, "checkpoint")
    inputs = [("checkpoint", Path(o.checkpoint))]
    if o.world:
        root = _need_dir(o.world, "world directory")
        task_train = _read_task_table(root, "train")
        task_test = _read_task_table(root, "test")
        source = o.source_lang
        if source is None:
            meta_path = root / "world.json"
            if meta_path.is_file():
                source = json.loads(meta_path.read_text(encoding="utf-8"))["source"]
            else:
                raise ConfigError("--source-lang is required when world.json is missing")
        inputs.append(("world-task", root / "task"))
    else:
        if not (o.train and o.test):
            raise ConfigError("finetune needs --world, or both --train and --test")
        from .corpus import read_labeled_tsv

        source = o.source_lang or "l0"
        task_train = {source: read_labeled_tsv(_need_file(o.train, "training TSV"))}
        task_test = {source: read_labeled_tsv(_need_file(o.test, "test TSV"))}
        inputs += [("train", Path(o.train)), ("test", Path(o.test))]

    config = _finetune_config(
        steps=o.steps, batch_size=o.batch_size, lr=o.lr, seed=o.seed,
        freeze_body=o.freeze_body, warmup=o.warmup,
    )
    from .evaluation import transfer_gap
    from .model import save_checkpoint

    try:
        model, scores = finetune(ckpt, task_train, task_test, config, source)
    except ValueError as e:
        raise DataError(str(e))
    out = Path(o.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.ckpt")
    _atomic_write_json(out / "scores.json", {"scores": scores, "source": source})
    rows = [("accuracy", lang, scores[lang]) for lang in sorted(scores)]
    if len(scores) > 1:
        rows.append(("transfer_gap", source, transfer_gap(scores, source)))
    _atomic_write_text(out / "scores.csv", _csv_text(("metric", "language", "value"), rows))
    _write_manifest(out, "finetune", o, inputs, [o.seed])
    for lang in sorted(scores):
        print(f"{lang}: {scores[lang]:.4f}")


def _final_layer(o, ckpt) -> int:
    layer = o.layer if o.layer is not None else ckpt.config.layers
    if not 0 <= layer <= ckpt.config.layers:
        raise ConfigError(f"--layer must lie in [0, {ckpt.config.layers}]: {layer}")
    return layer


def _parallel_inputs(o):
    from .evaluation import read_alignment_file

    if o.pair:
        src_path = _need_file(f"{o.pair}.src", "parallel source")
        tgt_path = _need_file(f"{o.pair}.tgt", "parallel target")
        gold_path = _need_file(f"{o.pair}.align", "gold alignments")
    else:
        if not (o.src and o.tgt and o.gold):
            raise ConfigError("need --pair, or all of --src/--tgt/--gold")
        src_path = _need_file(o.src, "source sentences")
        tgt_path = _need_file(o.tgt, "target sentences")
        gold_path = _need_file(o.gold, "gold alignments")
    src = _read_sentences(src_path, "source sentences")
    tgt = _read_sentences(tgt_path, "target sentences")
    try:
        golds = read_alignment_file(gold_path)
    except ValueError as e:
        raise DataError(f"bad gold alignment file {gold_path}: {e}")
    if not (len(src) == len(tgt) == len(golds)):
        raise DataError(
            f"parallel inputs disagree on length: {len(src)} vs {len(tgt)} vs {len(golds)}"
        )
    return src, tgt, golds, [("src", src_path), ("tgt", tgt_path), ("gold", gold_path)]


def _cmd_eval_retrieval(o) -> None:
    from .evaluation import evaluate_retrieval

    ckpt = _load_ckpt(o.checkpoint, "checkpoint")
    src = _read_sentences(o.src, "source sentences")
    tgt = _read_sentences(o.tgt, "target sentences")
    layer = _final_layer(o, ckpt)
    try:
        r = evaluate_retrieval(src, tgt, ckpt, layer, o.include_specials)
    except ValueError as e:
        raise DataError(str(e))
    rows = [
        (layer, "retrieval_src_to_tgt", r.src_to_tgt),
        (layer, "retrieval_tgt_to_src", r.tgt_to_src),
    ]
    out = Path(o.out)
    _atomic_write_text(out / "retrieval.csv", _csv_text(("layer", "metric", "value"), rows))
    _write_manifest(out, "eval/retrieval", o,
                    [("checkpoint", Path(o.checkpoint)), ("src", Path(o.src)),
                     ("tgt", Path(o.tgt))], [])
    print(f"layer {layer}: src->tgt {r.src_to_tgt:.4f}, tgt->src {r.tgt_to_src:.4f}")


def _cmd_eval_align(o) -> None:
    import math

    from .evaluation import evaluate_alignment

    ckpt = _load_ckpt(o.checkpoint, "checkpoint")
    src, tgt, golds, inputs = _parallel_inputs(o)
    layer = _final_layer(o, ckpt)
    try:
        aer, unconverged = evaluate_alignment(
            src, tgt, golds, ckpt, layer,
            eps=o.eps, iters=o.iters, threshold=o.threshold,
        )
    except ValueError as e:
        raise DataError(str(e))
    if not math.isfinite(aer):
        raise NumericError(f"alignment produced a non-finite AER at layer {layer}")
    rows = [
        (layer, "alignment_aer", aer),
        (layer, "alignment_unconverged", unconverged),
    ]
    out = Path(o.out)
    _atomic_write_text(out / "align.csv", _csv_text(("layer", "metric", "value"), rows))
    _write_manifest(out, "eval/align", o,
                    [("checkpoint", Path(o.checkpoint))] + inputs, [])
    print(f"layer {layer}: AER {aer:.4f} ({unconverged} pairs unconverged)")


def _cmd_eval_sweep(o) -> None:
    import math

    from .evaluation import evaluate_alignment, evaluate_retrieval

    ckpt = _load_ckpt(o.checkpoint, "checkpoint")
    src, tgt, golds, inputs = _parallel_inputs(o)
    rows = []
    for layer in range(ckpt.config.layers + 1):
        try:
            r = evaluate_retrieval(src, tgt, ckpt, layer, o.include_specials)
            aer, _ = evaluate_alignment(
                src, tgt, golds, ckpt, layer,
                eps=o.eps, iters=o.iters, threshold=o.threshold,
            )
        except ValueError as e:
            raise DataError(str(e))
        if not math.isfinite(aer):
            raise NumericError(f"alignment produced a non-finite AER at layer {layer}")
        rows.append((layer, "retrieval_src_to_tgt", r.src_to_tgt))
        rows.append((layer, "retrieval_tgt_to_src", r.tgt_to_src))
        rows.append((layer, "alignment_aer", aer))
    out = Path(o.out)
    _atomic_write_text(out / "sweep.csv", _csv_text(("layer", "metric", "value"), rows))
    _write_manifest(out, "eval/sweep-layers", o,
                    [("checkpoint", Path(o.checkpoint))] + inputs, [])
    best = min((r for r in rows if r[1] == "alignment_aer"), key=lambda r: r[2])
    print(f"best alignment layer: {best[0]} (AER {best[2]:.4f})")


def _cmd_eval_gap(o) -> None:
    from .evaluation import transfer_gap

    if o.scores_file:
        path = _need_file(o.scores_file, "scores file")
        payload = json.loads(path.read_text(encoding="utf-8"))
        scores = payload.get("scores", payload)
        source = payload.get("source", o.source_lang)
        if not isinstance(scores, dict) or not scores:
            raise DataError(f"scores file holds no {{language: score}} map: {path}")
        try:
            gap = transfer_gap(scores, source)
        except ValueError as e:
            raise DataError(str(e))
        en = float(scores[source])
        others = [float(v) for k, v in scores.items() if k != source]
        inputs = [("scores", path)]
    elif o.source_score is not None and o.target_scores:
        try:
            others = [float(v) for v in str(o.target_scores).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--target-scores must be comma-separated numbers: {o.target_scores!r}")
        if not others:
            raise ConfigError("--target-scores lists no scores")
        en = float(o.source_score)
        gap = en - sum(others) / len(others)
        inputs = []
    else:
        raise ConfigError("need --scores-file, or both --source-score and --target-scores")
    other_avg = sum(others) / len(others)
    out = Path(o.out)
    _atomic_write_text(
        out / "gap.csv",
        _csv_text(("step", "en_score", "other_avg", "gap"), [(o.step, en, other_avg, gap)]),
    )
    _write_manifest(out, "eval/gap", o, inputs, [])
    print(f"gap: {gap:.1f} (source {en:.1f}, others {other_avg:.4g})")


def _cmd_compare(o) -> None:
    from .corpus import read_corpus_dir
    from .tokenization import build_vocab
    from .transplant import InitPlan

    root = _need_dir(o.world, "world directory")
    corpora = read_corpus_dir(_corpora_root(root))
    task_train = _read_task_table(root, "train")
    task_test = _read_task_table(root, "test")
    world_meta = json.loads((root / "world.json").read_text(encoding="utf-8")) \
        if (root / "world.json").is_file() else {}
    source = world_meta.get("source", "l0")
    meta = _load_ckpt(o.meta, "meta checkpoint")
    if o.init_mode not in ("none", "body", "emb", "both"):
        raise ConfigError(f"--init-mode must be none, body, emb, or both: {o.init_mode!r}")

    if o.seed_list:
        try:
            seeds = [int(s) for s in str(o.seed_list).split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seed-list must be comma-separated integers: {o.seed_list!r}")
    else:
        seeds = list(range(o.seeds))
    if not seeds:
        raise ConfigError("no seeds to run")

    eval_every = o.eval_every or o.steps
    lines = [s for sents in corpora.values() for s in sents]
    vocab = build_vocab(lines, max_size=o.vocab_size)
    model_config = _model_config(o, vocab.size)

    arms = {"scratch": None, "meta": InitPlan(mode=o.init_mode)}
    series = []
    finals = {arm: {} for arm in arms}
    for seed in seeds:
        for arm, plan in arms.items():
            rows = _paired_run(
                o, arm, plan, seed, corpora, vocab, model_config, meta,
                task_train, task_test, source, eval_every,
            )
            series.extend(rows)
            finals[arm][seed] = rows[-1]

    aggregate = {}
    for arm in arms:
        final_rows = [finals[arm][s] for s in seeds]
        aggregate[arm] = {
            metric: {
                "mean": _mean([r[metric] for r in final_rows]),
                "std": _std([r[metric] for r in final_rows]),
            }
            for metric in ("en_score", "other_avg", "gap")
        }
    win_counts = {
        "en_score": sum(finals["meta"][s]["en_score"] > finals["scratch"][s]["en_score"] for s in seeds),
        "other_avg": sum(finals["meta"][s]["other_avg"] > finals["scratch"][s]["other_avg"] for s in seeds),
        "gap": sum(finals["meta"][s]["gap"] < finals["scratch"][s]["gap"] for s in seeds),
    }
    report = {
        "source": source,
        "seeds": seeds,
        "steps": o.steps,
        "eval_every": eval_every,
        "init_mode": o.init_mode,
        "aggregate": aggregate,
        "win_counts": {k: int(v) for k, v in win_counts.items()},
        "series": series,
    }
    out = Path(o.out)
    _atomic_write_json(out / "report.json", report)
    csv_rows = [
        (r["arm"], r["seed"], r["step"], r["en_score"], r["other_avg"], r["gap"])
        for r in series
    ]
    _atomic_write_text(
        out / "series.csv",
        _csv_text(("arm", "seed", "step", "en_score", "other_avg", "gap"), csv_rows),
    )
    _write_manifest(out, "compare", o,
                    [("world", root), ("meta", Path(o.meta))], seeds)
    for arm in arms:
        a = aggregate[arm]
        print(f"{arm}: source {a['en_score']['mean']:.4f} "
              f"others {a['other_avg']['mean']:.4f} gap {a['gap']['mean']:.4f}")
    print(f"meta wins: {report['win_counts']}")


def _paired_run(o, arm, plan, seed, corpora, vocab, model_config, meta,
                task_train, task_test, source, eval_every):
    import dataclasses

    from .training import MetricLog, finetune, run_crosslingual_pretraining

    config = _phase_config(o, "crosslingual", alpha=o.alpha, init_plan=plan,
                           eval_every=eval_every)
    config = dataclasses.replace(config, seed=seed)
    ft_config = _finetune_config(
        steps=o.finetune_steps, batch_size=o.finetune_batch,
        lr=o.finetune_lr, seed=seed,
    )
    rows = []

    def score(step, snapshot):
        try:
            _, scores = finetune(snapshot, task_train, task_test, ft_config, source)
        except ValueError as e:
            raise DataError(str(e))
        others = [v for k, v in scores.items() if k != source]
        row = {
            "arm": arm,
            "seed": seed,
            "step": step,
            "en_score": scores[source],
            "other_avg": _mean(others),
            "gap": scores[source] - _mean(others),
        }
        rows.append(row)
        return {k: row[k] for k in ("en_score", "other_avg", "gap")}

    log = MetricLog()
    try:
        final = run_crosslingual_pretraining(
            config, corpora, meta_checkpoint=(meta if plan else None),
            model_config=model_config, vocab=vocab, eval_hook=score, log=log,
        )
    except ValueError as e:
        raise DataError(str(e))
    _check_numeric(log.records)
    if not rows or rows[-1]["step"] != config.steps:
        score(config.steps, final)
    return rows


def _mean(xs):
    xs = list(xs)
    return sum(xs) / len(xs)


def _std(xs):
    xs = list(xs)
    m = _mean(xs)
    return (sum((x - m) ** 2 for x in xs) / len(xs)) ** 0.5


def _cmd_rerun(ns) -> None:
    path = _need_file(ns.manifest, "manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {path}: {e}")
    command = manifest.get("command")
    if command not in _HANDLERS:
        raise DataError(f"manifest names an unknown command: {command!r}")
    args = dict(manifest.get("args", {}))
    args["out"] = ns.out or manifest.get("out")
    if not args["out"]:
        raise DataError("manifest records no output directory and --out was not given")
    table = _OPTIONS[command]
    known = {flag.lstrip("-").replace("-", "_") for flag, *_ in table} | {"config"}
    unknown = set(args) - known
    if unknown:
        raise DataError(f"manifest holds unknown options for {command}: {sorted(unknown)}")
    o = SimpleNamespace(**{k: args.get(k) for k in known})
    for flag, typ, default, _ in table:
        dest = flag.lstrip("-").replace("-", "_")
        if getattr(o, dest) is None:
            if default is REQUIRED:
                raise DataError(f"manifest is missing required option {flag}")
            setattr(o, dest, False if typ is bool else default)
    _HANDLERS[command](o)


# ---------------------------------------------------------------------------
# parser & entry point
# ---------------------------------------------------------------------------

_HANDLERS = {
    "gen-corpus": _cmd_gen_corpus,
    "meta-pretrain": _cmd_meta_pretrain,
    "xl-pretrain": _cmd_xl_pretrain,
    "finetune": _cmd_finetune,
    "eval/retrieval": _cmd_eval_retrieval,
    "eval/align": _cmd_eval_align,
    "eval/sweep-layers": _cmd_eval_sweep,
    "eval/gap": _cmd_eval_gap,
    "compare": _cmd_compare,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlpretrain",
        description="Two-phase cross-lingual masked-LM pretraining experiments.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    descriptions = {
        "gen-corpus": "Generate a synthetic multilingual world (corpora, parallel data, lexicons, tasks).",
        "meta-pretrain": "Masked-LM pretraining on one monolingual corpus.",
        "xl-pretrain": "Cross-lingual masked-LM pretraining with optional transplant, freezing, and distillation.",
        "finetune": "Train a classification head and score every language.",
        "compare": "Paired from-scratch vs meta-initialized experiment across seeds.",
    }
    for name in ("gen-corpus", "meta-pretrain", "xl-pretrain", "finetune", "compare"):
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name],
                           allow_abbrev=False)
        _add_options(p, _OPTIONS[name])

    ev = sub.add_parser("eval", help="Evaluate checkpoints: retrieval, alignment, transfer gap.",
                        allow_abbrev=False)
    ev_sub = ev.add_subparsers(dest="eval_command", required=True, metavar="what")
    for short, desc in (
        ("retrieval", "Parallel sentence retrieval accuracy at one layer."),
        ("align", "Optimal-transport word alignment error rate at one layer."),
        ("sweep-layers", "Retrieval and alignment at every layer."),
        ("gap", "Transfer gap from per-language scores."),
    ):
        p = ev_sub.add_parser(short, help=desc, description=desc, allow_abbrev=False)
        _add_options(p, _OPTIONS[f"eval/{short}"])

    rr = sub.add_parser("rerun", help="Re-execute a recorded experiment manifest.",
                        allow_abbrev=False)
    rr.add_argument("manifest", help="path to a manifest.json written by any command")
    rr.add_argument("--out", default=None, help="redirect outputs (default: the manifest's out)")
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_env()
        parser = _build_parser()
        try:
            ns = parser.parse_args(argv)
        except SystemExit as e:
            # argparse exits 2 on bad flags, 0 on --help; both are config-side
            return int(e.code or 0)
        if ns.command == "rerun":
            _cmd_rerun(ns)
        else:
            name = ns.command if ns.command != "eval" else f"eval/{ns.eval_command}"
            o = _resolve(ns, _OPTIONS[name])
            _HANDLERS[name](o)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
