"""Command-line driver: every pipeline stage as a subcommand.

All stages read and write plain files. Path flags default to fixed names
inside ``--out`` so that a whole recipe runs with one working directory::

    deskmt --out run datagen
    deskmt --out run filter --input run/parent --output run/parent.f
    ...

Exit status is 0 on success, 1 on a runtime failure and 2 on a configuration
error; failures print one ``deskmt: error: ...`` line on stderr.
"""
from __future__ import annotations

import os

# thread count must be fixed before numpy is first imported
_threads = os.environ.get("DESKMT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import logging
import sys
from pathlib import Path

from .corpus import (ParallelCorpus, augment_back_translation, filter_pairs, gen_synthetic, make_pseudo_parent,
                     reverse, sample_ratio, translate)
from .evaluate import bleu, calibration_report
from .experiment import ExperimentConfig
from .model import ModelCheckpoint, ModelConfig, new_checkpoint
from .subword import BpeModel, Codec, build_vocab, learn_bpe, word_counts
from .train import TrainingLog, Validation, encode_pairs, train_child, train_model
from .transfer import tl_init, tm_init

log = logging.getLogger("deskmt")


class ConfigError(Exception):
    """Invalid or missing configuration; exits with status 2."""


# ---------------------------------------------------------------- helpers


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _write_lines(path, lines):
    Path(path).write_text("".join(s + "\n" for s in lines), encoding="utf-8")


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"missing input {p}")


def _load_corpus(prefix) -> ParallelCorpus:
    _require(f"{prefix}.src", f"{prefix}.tgt")
    return ParallelCorpus.load(prefix)


def _load_codec(prefix, role) -> Codec:
    _require(f"{prefix}.bpe", f"{prefix}.vocab")
    return Codec.load(prefix, role)


def _load_ckpt(path) -> ModelCheckpoint:
    _require(path)
    return ModelCheckpoint.load(path)


def _model_config(cfg: ExperimentConfig, src: Codec, tgt: Codec) -> ModelConfig:
    return ModelConfig(len(src.vocab), len(tgt.vocab), **cfg.model)


def _validation(cfg: ExperimentConfig, prefix, src: Codec, tgt: Codec, swap=False) -> Validation | None:
    if prefix is None:
        return None
    corpus = _load_corpus(prefix)
    if swap:
        corpus = reverse(corpus)
    return Validation([src.encode(s, role="source") for s in corpus.src], list(corpus.tgt), tgt, cfg.max_len)


def _save_model(ckpt: ModelCheckpoint, lg: TrainingLog, path):
    ckpt.save(path)
    lg.save(f"{path}.log")
    print(f"saved {path} best_epoch={lg.best_epoch} best_bleu={lg.best_bleu:.2f}")


# ---------------------------------------------------------------- subcommands


def cmd_datagen(cfg, args):
    out, s, spec = Path(args.out), cfg.data_seed, cfg.spec
    sets = {
        "parent": (cfg.n_parent, s, cfg.parent_lang),
        "parent_valid": (cfg.n_valid, s + 1, cfg.parent_lang),
        "child": (cfg.n_child, s + 2, cfg.child_lang),
        "child_valid": (cfg.n_valid, s + 3, cfg.child_lang),
        "child_test": (cfg.n_test, s + 4, cfg.child_lang),
        "mono": (cfg.n_mono, s + 5, cfg.child_lang),
    }
    for name, (n, seed, lang) in sets.items():
        gen_synthetic(spec, n, seed, lang).save(out / name)
        print(f"wrote {out / name} ({n} pairs)")


def cmd_bpe_train(cfg, args):
    sentences = [s for f in args.input for s in _read_lines(f)]
    merges = args.merges if args.merges is not None else cfg.parent_merges
    learn_bpe(word_counts(sentences), merges).save(f"{args.codec}.bpe")
    print(f"wrote {args.codec}.bpe ({merges} merges)")


def cmd_build_vocab(cfg, args):
    _require(f"{args.codec}.bpe")
    bpe = BpeModel.load(f"{args.codec}.bpe")
    vocab = build_vocab(bpe, [s for f in args.input for s in _read_lines(f)], args.role)
    vocab.save(f"{args.codec}.vocab")
    print(f"wrote {args.codec}.vocab ({len(vocab)} types)")


def cmd_filter(cfg, args):
    corpus = _load_corpus(args.input)
    out = filter_pairs(corpus, cfg.filter_max_len, cfg.filter_max_ratio)
    if args.sample_ratio is not None:
        out = sample_ratio(out, args.sample_ratio, args.seed or 0)
    out.save(args.output)
    print(f"kept {len(out)} of {len(corpus)} pairs")


def _train_parent(cfg, args, swap: bool):
    src = _load_codec(args.src_codec, "source")
    tgt = _load_codec(args.tgt_codec, "target")
    if swap:
        src, tgt = Codec(tgt.bpe, tgt.vocab.with_role("source")), Codec(src.bpe, src.vocab.with_role("target"))
    data = _load_corpus(args.data)
    if swap:
        data = reverse(data)
    init = new_checkpoint(_model_config(cfg, src, tgt), args.init_seed, src.vocab.fingerprint(),
                          tgt.vocab.fingerprint())
    tc = cfg.train_config(args.mode, **({"seed": args.seed} if args.seed is not None else {}))
    ckpt, lg = train_model(init, encode_pairs(data, src, tgt), tc, _validation(cfg, args.valid, src, tgt, swap),
                           label=Path(args.output).stem)
    _save_model(ckpt, lg, args.output)


def cmd_train_parent(cfg, args):
    _train_parent(cfg, args, swap=False)


def cmd_train_reversed(cfg, args):
    _train_parent(cfg, args, swap=True)


def cmd_transfer_init(cfg, args):
    parent = _load_ckpt(args.parent)
    src = _load_codec(args.src_codec, "source")
    tgt = _load_codec(args.tgt_codec, "target")
    child_cfg = _model_config(cfg, src, tgt)
    seed = args.seed if args.seed is not None else 1
    if args.method == "tm":
        parent_src = _load_codec(args.parent_src_codec, "source")
        child, rep = tm_init(parent, child_cfg, (src.vocab, tgt.vocab), seed, parent_src.vocab)
    else:
        child, rep = tl_init(parent, child_cfg, (src.vocab, tgt.vocab), seed)
    child.save(args.output)
    rep.save(args.report or f"{args.output}.report.json")
    print(f"wrote {args.output} matched={rep.matched} random={rep.randomly_initialized}")


def cmd_make_pseudo(cfg, args):
    data = _load_corpus(args.data)
    rev = _load_ckpt(args.reversed)
    tgt = _load_codec(args.tgt_codec, "source")
    parent_src = _load_codec(args.parent_src_codec, "target")
    method = args.method or cfg.pseudo_method
    out = make_pseudo_parent(data, rev, tgt, parent_src, method, cfg.beam, cfg.len_penalty, cfg.max_len,
                             seed=args.seed if args.seed is not None else 17, parent_lang=cfg.parent_lang)
    out.save(args.output)
    print(f"wrote {args.output} ({len(out)} pseudo parent sources, {method})")


def cmd_augment_bt(cfg, args):
    data = _load_corpus(args.data)
    _require(args.mono)
    model = _load_ckpt(args.reversed_child)
    tgt = _load_codec(args.tgt_codec, "source")
    src = _load_codec(args.src_codec, "target")
    out = augment_back_translation(data, _read_lines(args.mono), model, tgt, src, args.ratio, "beam", cfg.beam,
                                   cfg.len_penalty, cfg.max_len)
    out.save(args.output)
    print(f"wrote {args.output} {out.counts()}")


def cmd_train_child(cfg, args):
    if args.consist and not args.pseudo:
        raise ConfigError("consistency training needs --pseudo (pseudo parent corpus)")
    if args.consist and not (args.parent and args.parent_src_codec):
        raise ConfigError("consistency training needs --parent and --parent-src-codec")
    init = _load_ckpt(args.init)
    src = _load_codec(args.src_codec, "source")
    tgt = _load_codec(args.tgt_codec, "target")
    data = _load_corpus(args.data)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.rdrop:
        overrides["rdrop"] = cfg.rdrop_weight
    pseudo = parent = parent_src = None
    if args.consist:
        overrides["consist"] = dict(cfg.consist)
        pseudo = _load_corpus(args.pseudo)
        parent = _load_ckpt(args.parent)
        parent_src = _load_codec(args.parent_src_codec, "source")
    tc = cfg.train_config(args.mode, **overrides)
    ckpt, lg = train_child(init, data, tc, src, tgt, _validation(cfg, args.valid, src, tgt), pseudo, parent,
                           parent_src, label=Path(args.output).stem)
    _save_model(ckpt, lg, args.output)


def cmd_translate(cfg, args):
    _require(args.input)
    model = _load_ckpt(args.model)
    src = _load_codec(args.src_codec, "source")
    tgt = _load_codec(args.tgt_codec, "target")
    hyps = translate(model, _read_lines(args.input), src, tgt, args.method, cfg.beam, cfg.len_penalty, cfg.max_len,
                     seed=args.seed or 0)
    _write_lines(args.output, hyps)
    print(f"wrote {args.output} ({len(hyps)} lines)")


def cmd_evaluate(cfg, args):
    _require(args.hyp, args.ref)
    score = bleu(_read_lines(args.hyp), _read_lines(args.ref))
    print(f"BLEU {score:.1f}")


def cmd_calibrate(cfg, args):
    model = _load_ckpt(args.model)
    src = _load_codec(args.src_codec, "source")
    tgt = _load_codec(args.tgt_codec, "target")
    data = _load_corpus(args.data)
    rep = calibration_report(model, data.src, data.tgt, src, tgt, args.method, cfg.beam, cfg.len_penalty,
                             cfg.max_len)
    rep.save(args.output)
    print(f"confidence {rep.mean_confidence:.4f} accuracy {rep.token_accuracy:.4f} gap {rep.gap:.4f}")


def _label(path: str) -> str:
    name = Path(path).name
    for suffix in (".log", ".ckpt"):
        name = name[: -len(suffix)] if name.endswith(suffix) else name
    return name


def _group(label: str) -> str:
    """``consist-s2`` -> ``consist``: seeds are averaged in the ablation table."""
    head, _, tail = label.rpartition("-s")
    return head if head and tail.isdigit() else label


def curve_table(logs: dict[str, TrainingLog]) -> str:
    labels = list(logs)
    epochs = sorted({e for lg in logs.values() for e, _ in lg.curve()})
    curves = {k: dict(lg.curve()) for k, lg in logs.items()}
    rows = ["epoch\t" + "\t".join(labels)]
    for e in epochs:
        rows.append(f"{e}\t" + "\t".join(f"{curves[k][e]:.2f}" if e in curves[k] else "-" for k in labels))
    return "\n".join(rows) + "\n"


def ablation_table(logs: dict[str, TrainingLog]) -> str:
    groups: dict[str, list[TrainingLog]] = {}
    for k, lg in logs.items():
        groups.setdefault(_group(k), []).append(lg)
    rows = ["run\truns\tmean_best_valid_bleu\tmean_best_epoch"]
    for g, lgs in groups.items():
        mean_bleu = sum(lg.best_bleu for lg in lgs) / len(lgs)
        mean_epoch = sum(lg.best_epoch for lg in lgs) / len(lgs)
        rows.append(f"{g}\t{len(lgs)}\t{mean_bleu:.2f}\t{mean_epoch:.1f}")
    return "\n".join(rows) + "\n"


def cmd_report(cfg, args):
    _require(*args.logs)
    logs = {_label(p): TrainingLog.load(p, _label(p)) for p in args.logs}
    out = Path(args.out)
    (out / "curves.tsv").write_text(curve_table(logs), encoding="utf-8")
    (out / "ablation.tsv").write_text(ablation_table(logs), encoding="utf-8")
    sys.stdout.write(curve_table(logs) + "\n" + ablation_table(logs))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deskmt", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="experiment config (JSON); omitted keys take their defaults")
    p.add_argument("--seed", type=int, help="overrides the seed of the stage that uses one")
    p.add_argument("--out", default=".", help="working directory for outputs and default paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    add("datagen", cmd_datagen, "write the synthetic parent, child and monolingual corpora")

    sp = add("bpe-train", cmd_bpe_train, "learn BPE merges")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--merges", type=int)
    sp.add_argument("--codec", required=True, help="output prefix; writes PREFIX.bpe")

    sp = add("build-vocab", cmd_build_vocab, "build the vocabulary of a segmented corpus")
    sp.add_argument("--input", nargs="+", required=True)
    sp.add_argument("--codec", required=True, help="reads PREFIX.bpe, writes PREFIX.vocab")
    sp.add_argument("--role", choices=("source", "target"), default="target")

    sp = add("filter", cmd_filter, "length/ratio filter with optional seeded subsampling")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--sample-ratio", type=float)

    for name, fn, what in (("train-parent", cmd_train_parent, "train the parent model"),
                           ("train-reversed", cmd_train_reversed, "train a target->source model on the same files")):
        sp = add(name, fn, what)
        sp.add_argument("--data", required=True)
        sp.add_argument("--valid")
        sp.add_argument("--src-codec", required=True)
        sp.add_argument("--tgt-codec", required=True)
        sp.add_argument("--output", required=True)
        sp.add_argument("--mode", choices=("parent", "scratch"), default="parent")
        sp.add_argument("--init-seed", type=int, default=0 if name == "train-parent" else 1)

    sp = add("transfer-init", cmd_transfer_init, "initialize a child from the parent")
    sp.add_argument("method", choices=("tl", "tm"))
    sp.add_argument("--parent", required=True)
    sp.add_argument("--parent-src-codec")
    sp.add_argument("--src-codec", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--report")

    sp = add("make-pseudo", cmd_make_pseudo, "back-translate child targets into the parent source language")
    sp.add_argument("--data", required=True)
    sp.add_argument("--reversed", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--parent-src-codec", required=True)
    sp.add_argument("--method", choices=("beam", "greedy", "sample"))
    sp.add_argument("--output", required=True)

    sp = add("augment-bt", cmd_augment_bt, "append back-translated pairs from target monolingual text")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mono", required=True, help="one target sentence per line")
    sp.add_argument("--reversed-child", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--src-codec", required=True)
    sp.add_argument("--ratio", type=float, default=1.0)
    sp.add_argument("--output", required=True)

    sp = add("train-child", cmd_train_child, "fine-tune a child (TM-TL, TL, vanilla or consistency)")
    sp.add_argument("--init", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--valid")
    sp.add_argument("--src-codec", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--consist", action="store_true", help="add the cross-model consistency term")
    sp.add_argument("--pseudo")
    sp.add_argument("--parent")
    sp.add_argument("--parent-src-codec")
    sp.add_argument("--rdrop", action="store_true")
    sp.add_argument("--mode", choices=("transfer", "scratch"), default="transfer")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--output", required=True)

    sp = add("translate", cmd_translate, "translate a file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--src-codec", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--method", choices=("beam", "greedy", "sample"), default="beam")

    sp = add("evaluate", cmd_evaluate, "corpus BLEU of a hypothesis file")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)

    sp = add("calibrate", cmd_calibrate, "confidence/accuracy report on a test corpus")
    sp.add_argument("--model", required=True)
    sp.add_argument("--src-codec", required=True)
    sp.add_argument("--tgt-codec", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=("beam", "greedy"), default="beam")
    sp.add_argument("--output", required=True)

    sp = add("report", cmd_report, "learning-curve and ablation tables from training logs")
    sp.add_argument("logs", nargs="+")
    return p


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    try:
        return ExperimentConfig.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise ConfigError(f"config {path}: {msg}") from exc


def _fail(msg: str, status: int) -> int:
    print(f"deskmt: error: {' '.join(str(msg).split())}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        args.fn(cfg, args)
    except ConfigError as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - one-line report for any stage failure
        log.debug("failure", exc_info=True)
        return _fail(f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
