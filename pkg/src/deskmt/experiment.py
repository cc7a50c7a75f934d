"""The synthetic transfer testbed, end to end.

One :class:`ExperimentConfig` fixes everything: the synthetic languages,
corpus sizes, subword budgets, model shape, per-mode training schedules, the
consistency settings and decoding. :class:`Testbed` builds the data once,
trains (and caches) the parent and the reversed parent, and then runs any
child method on any seed.

Parent: P -> E on 20k pairs. Child: C -> E on 500 pairs, where C shares a
fraction of its word forms with P. Every model predicts into one shared E
vocabulary learned on the parent targets.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .consist import ConsistConfig
from .corpus import (ParallelCorpus, SyntheticLanguageSpec, augment_back_translation, filter_pairs,
                     gen_synthetic, make_pseudo_parent, render, reverse, sample_base, to_base, translate)
from .evaluate import bleu, calibration_report, token_accuracy_labels
from .model import ModelCheckpoint, ModelConfig, new_checkpoint
from .subword import BpeModel, Codec, Vocabulary, build_vocab
from .train import TrainConfig, TrainingLog, Validation, encode_pairs, train_child, train_model
from .transfer import tl_init, tm_init, tm_init_target, vanilla_init

log = logging.getLogger(__name__)

METHODS = ("vanilla", "tl", "tm", "consist")


def _default_model():
    return {"layers": 2, "model_dim": 64, "ffn_dim": 128, "heads": 4, "max_positions": 64}


def _default_languages():
    # Half of the target concepts have a second surface form used 40% of the time, so a
    # source sentence has several valid translations and a single reference is a sample.
    d = SyntheticLanguageSpec().to_dict()
    d["languages"]["E"].update(synonym_fraction=0.5, synonym_prob=0.4)
    return d


def _default_train():
    # Desk-scale schedules: a few hundred steps per run instead of tens of thousands.
    return {
        "parent": {"mode": "parent", "epochs": 12, "max_tokens_per_batch": 2000, "warmup_steps": 200,
                   "peak_lr": 2e-3, "seed": 1},
        "scratch": {"mode": "scratch", "epochs": 60, "max_tokens_per_batch": 1000, "warmup_steps": 300,
                    "peak_lr": 1e-3},
        "transfer": {"mode": "transfer", "epochs": 100, "max_tokens_per_batch": 1000, "warmup_steps": 60,
                     "peak_lr": 1e-3, "dropout": 0.1},
    }


@dataclass
class ExperimentConfig:
    languages: dict = field(default_factory=_default_languages)
    parent_lang: str = "P"
    child_lang: str = "C"
    n_parent: int = 20000
    n_child: int = 500
    n_valid: int = 200
    n_test: int = 500
    n_mono: int = 500
    data_seed: int = 1000
    parent_merges: int = 2000
    child_merges: int = 400
    model: dict = field(default_factory=_default_model)
    train: dict = field(default_factory=_default_train)
    consist: dict = field(default_factory=lambda: ConsistConfig().to_dict())
    rdrop_weight: float = 1.0  # 5 over-regularizes the small child next to the consistency term
    pseudo_method: str = "beam"
    beam: int = 5
    len_penalty: float = 1.0
    max_len: int = 40
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    filter_max_len: int = 60
    filter_max_ratio: float = 1.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown experiment config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self):
        """Build every nested section once so that unknown or invalid keys fail early."""
        try:
            self.spec
            ModelConfig(1, 1, **self.model)
            unknown = sorted(set(self.train) - {"parent", "scratch", "transfer"})
            if unknown:
                raise KeyError(f"unknown train sections: {', '.join(unknown)}")
            for kind in self.train:
                self.train_config(kind)
            ConsistConfig.from_dict(self.consist)
        except TypeError as exc:
            raise KeyError(str(exc)) from exc

    @property
    def spec(self) -> SyntheticLanguageSpec:
        return SyntheticLanguageSpec.from_dict(self.languages)

    def train_config(self, kind: str, **overrides) -> TrainConfig:
        d = dict(self.train[kind])
        d.update(overrides)
        return TrainConfig.from_dict(d)


@dataclass
class ChildResult:
    method: str
    seed: int
    valid_bleu: float
    test_bleu: float
    log: TrainingLog
    ckpt: ModelCheckpoint
    variant: str = ""

    def summary(self) -> dict:
        return {"method": self.method, "variant": self.variant, "seed": self.seed,
                "valid_bleu": round(self.valid_bleu, 4), "test_bleu": round(self.test_bleu, 4),
                "best_epoch": self.log.best_epoch}


class Testbed:
    """Lazily built data, codecs and parent models for one :class:`ExperimentConfig`.

    Trained parents are cached under ``workdir`` when one is given.
    """

    def __init__(self, cfg: ExperimentConfig, workdir: str | Path | None = None):
        self.cfg = cfg
        self.spec = cfg.spec
        self.workdir = Path(workdir) if workdir else None
        if self.workdir:
            self.workdir.mkdir(parents=True, exist_ok=True)
        self._cache: dict = {}
        self._build_data()

    # ------------------------------------------------------------ data

    def _build_data(self):
        c, s = self.cfg, self.cfg.data_seed
        self.parent_data = filter_pairs(gen_synthetic(self.spec, c.n_parent, s, c.parent_lang),
                                        c.filter_max_len, c.filter_max_ratio)
        self.parent_valid = gen_synthetic(self.spec, c.n_valid, s + 1, c.parent_lang)
        self.child_data = filter_pairs(gen_synthetic(self.spec, c.n_child, s + 2, c.child_lang),
                                       c.filter_max_len, c.filter_max_ratio)
        self.child_valid = gen_synthetic(self.spec, c.n_valid, s + 3, c.child_lang)
        self.child_test = gen_synthetic(self.spec, c.n_test, s + 4, c.child_lang)
        mono = gen_synthetic(self.spec, c.n_mono, s + 5, c.child_lang)
        self.mono_targets, self.mono_base = mono.tgt, mono.base
        self.parent_src = Codec.train(self.parent_data.src, c.parent_merges, "source")
        self.tgt = Codec.train(self.parent_data.tgt, c.parent_merges, "target")
        self.child_src = Codec.train(self.child_data.src, c.child_merges, "source")

    def model_config(self, src: Codec, tgt: Codec) -> ModelConfig:
        return ModelConfig(len(src.vocab), len(tgt.vocab), **self.cfg.model)

    def validation(self, corpus: ParallelCorpus, src: Codec, tgt: Codec) -> Validation:
        return Validation([src.encode(x, role="source") for x in corpus.src], list(corpus.tgt), tgt,
                          self.cfg.max_len)

    # ------------------------------------------------------------ parents

    def _cached(self, name, build):
        if name in self._cache:
            return self._cache[name]
        path = self.workdir / f"{name}.ckpt" if self.workdir else None
        if path is not None and path.exists():
            ckpt = ModelCheckpoint.load(path)
            lg = TrainingLog.load(path.with_suffix(".log"), name) if path.with_suffix(".log").exists() else None
        else:
            ckpt, lg = build()
            if path is not None:
                ckpt.save(path)
                if lg is not None:
                    lg.save(path.with_suffix(".log"))
        self._cache[name] = (ckpt, lg)
        return ckpt, lg

    def parent(self) -> ModelCheckpoint:
        def build():
            src, tgt = self.parent_src, self.tgt
            init = new_checkpoint(self.model_config(src, tgt), 0, src.vocab.fingerprint(), tgt.vocab.fingerprint())
            return train_model(init, encode_pairs(self.parent_data, src, tgt), self.cfg.train_config("parent"),
                               self.validation(self.parent_valid, src, tgt), label="parent")

        return self._cached("parent", build)[0]

    def reversed_codecs(self) -> tuple[Codec, Codec]:
        """(E as source, P as target) for the reversed parent."""
        return (Codec(self.tgt.bpe, self.tgt.vocab.with_role("source")),
                Codec(self.parent_src.bpe, self.parent_src.vocab.with_role("target")))

    def reversed_parent(self) -> ModelCheckpoint:
        def build():
            src, tgt = self.reversed_codecs()
            init = new_checkpoint(self.model_config(src, tgt), 1, src.vocab.fingerprint(), tgt.vocab.fingerprint())
            return train_model(init, encode_pairs(reverse(self.parent_data), src, tgt),
                               self.cfg.train_config("parent"),
                               self.validation(reverse(self.parent_valid), src, tgt), label="reversed-parent")

        return self._cached("reversed", build)[0]

    def reversed_child(self) -> ModelCheckpoint:
        """E -> C model for back-translation, transferred from the reversed parent."""
        def build():
            src, parent_tgt = self.reversed_codecs()
            tgt = Codec(self.child_src.bpe, self.child_src.vocab.with_role("target"))
            init, _ = tm_init_target(self.reversed_parent(), self.model_config(src, tgt), (src.vocab, tgt.vocab), 2,
                                     parent_tgt.vocab)
            return train_model(init, encode_pairs(reverse(self.child_data), src, tgt),
                               self.cfg.train_config("transfer", seed=7),
                               self.validation(reverse(self.child_valid), src, tgt), label="reversed-child")

        return self._cached("reversed_child", build)[0]

    # ------------------------------------------------------------ pseudo sources

    def pseudo_parent(self, corpus: ParallelCorpus | None = None, method: str | None = None) -> ParallelCorpus:
        corpus = corpus if corpus is not None else self.child_data
        method = method or self.cfg.pseudo_method
        key = ("pseudo", method, len(corpus), hash(tuple(corpus.tgt)))
        if key not in self._cache:
            src, tgt = self.reversed_codecs()
            self._cache[key] = make_pseudo_parent(corpus, self.reversed_parent(), src, tgt, method, self.cfg.beam,
                                                  self.cfg.len_penalty, self.cfg.max_len, seed=17,
                                                  parent_lang=self.cfg.parent_lang)
        return self._cache[key]

    def pseudo_accuracy(self, pseudo: ParallelCorpus, truth_base) -> float:
        """Word-level accuracy of pseudo parent sources against the true parent renderings."""
        correct = total = 0
        for hyp, base in zip(pseudo.src, truth_base):
            ref = render(self.spec, base, self.cfg.parent_lang).split()
            labels = token_accuracy_labels(hyp.split(), ref)
            correct += sum(labels)
            total += max(len(labels), len(ref))
        return correct / max(total, 1)

    def bt_corpus(self) -> ParallelCorpus:
        if "bt" not in self._cache:
            src, _ = self.reversed_codecs()
            tgt = Codec(self.child_src.bpe, self.child_src.vocab.with_role("target"))
            self._cache["bt"] = augment_back_translation(
                self.child_data, self.mono_targets, self.reversed_child(), src, tgt, 1.0, "beam", self.cfg.beam,
                self.cfg.len_penalty, self.cfg.max_len, mono_base=self.mono_base)
        return self._cache["bt"]

    # ------------------------------------------------------------ children

    def child_init(self, method: str, seed: int):
        cfg = self.model_config(self.child_src, self.tgt)
        vocabs = (self.child_src.vocab, self.tgt.vocab)
        if method == "vanilla":
            return vanilla_init(cfg, vocabs, seed), None
        if method == "tl":
            return tl_init(self.parent(), cfg, vocabs, seed)
        if method in ("tm", "consist"):
            return tm_init(self.parent(), cfg, vocabs, seed, self.parent_src.vocab)
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")

    def run_child(self, method: str, seed: int, *, data: ParallelCorpus | None = None,
                  pseudo_method: str | None = None, rdrop: bool = False, consist: dict | None = None,
                  variant: str = "", epochs: int | None = None) -> ChildResult:
        data = data if data is not None else self.child_data
        init, _ = self.child_init(method, seed)
        overrides = {"seed": seed}
        if epochs is not None:
            overrides["epochs"] = epochs
        if rdrop:
            overrides["rdrop"] = self.cfg.rdrop_weight
        pseudo = parent = None
        if method == "consist":
            overrides["consist"] = dict(self.cfg.consist, **(consist or {}))
            pseudo = self.pseudo_parent(data, pseudo_method)
            parent = self.parent()
        tc = self.cfg.train_config("scratch" if method == "vanilla" else "transfer", **overrides)
        label = f"{method}{'-' + variant if variant else ''}-s{seed}"
        best, lg = train_child(init, data, tc, self.child_src, self.tgt,
                               self.validation(self.child_valid, self.child_src, self.tgt),
                               pseudo, parent, self.parent_src, label=label)
        return ChildResult(method, seed, lg.best_bleu, self.test_bleu(best), lg, best, variant)

    def test_bleu(self, ckpt: ModelCheckpoint, corpus: ParallelCorpus | None = None) -> float:
        corpus = corpus if corpus is not None else self.child_test
        hyps = translate(ckpt, corpus.src, self.child_src, self.tgt, "beam", self.cfg.beam, self.cfg.len_penalty,
                         self.cfg.max_len)
        return bleu(hyps, corpus.tgt)

    def calibration(self, ckpt: ModelCheckpoint, corpus: ParallelCorpus | None = None):
        corpus = corpus if corpus is not None else self.child_test
        return calibration_report(ckpt, corpus.src, corpus.tgt, self.child_src, self.tgt, "beam", self.cfg.beam,
                                  self.cfg.len_penalty, self.cfg.max_len)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
