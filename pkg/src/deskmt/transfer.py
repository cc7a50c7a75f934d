"""Parent-to-child parameter transfer.

Both initialisers copy every non-embedding parameter verbatim and keep the
target-side tables, since parent and child share one target vocabulary.
They differ only in how the child's source embedding rows are filled.
``tm_init_target`` is the mirror image for back-translation models, which
share the parent's source side instead.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelCheckpoint, ModelConfig, new_checkpoint
from .subword import SPECIALS, Vocabulary


@dataclass
class TransferReport:
    method: str
    matched_tokens: list[str] = field(default_factory=list)
    randomly_initialized: int = 0
    copied_parameter_names: list[str] = field(default_factory=list)

    @property
    def matched(self) -> int:
        return len(self.matched_tokens)

    def to_text(self) -> str:
        d = asdict(self)
        d["matched"] = self.matched
        return json.dumps(d, indent=1, sort_keys=True, ensure_ascii=False) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


class ArchitectureMismatch(ValueError):
    pass


def _check_compatible(parent: ModelCheckpoint, child_config: ModelConfig, child_src: Vocabulary,
                      child_tgt: Vocabulary):
    pc = parent.config
    if child_config.src_vocab_size != len(child_src):
        raise ArchitectureMismatch(f"child config has src_vocab_size {child_config.src_vocab_size} "
                                   f"but the child source vocabulary holds {len(child_src)} tokens")
    if parent.tgt_vocab and parent.tgt_vocab != child_tgt.fingerprint():
        raise ArchitectureMismatch("parent and child target vocabularies differ; a shared target vocabulary "
                                   "is required")
    ps, cs = pc.parameter_shapes(), child_config.parameter_shapes()
    bad = [f"{k}: parent {ps.get(k)} vs child {cs.get(k)}"
           for k in sorted(set(ps) | set(cs)) if k != "src_embed" and ps.get(k) != cs.get(k)]
    if bad:
        raise ArchitectureMismatch("incompatible architectures: " + "; ".join(bad))


def _assemble(parent, child_config, child_src, child_tgt, src_embed, report):
    params = {}
    for name, arr in parent.params.items():
        if name == "src_embed":
            continue
        params[name] = arr.copy()
        report.copied_parameter_names.append(name)
    params["src_embed"] = src_embed.astype(parent.params["src_embed"].dtype)
    report.copied_parameter_names.sort()
    ckpt = ModelCheckpoint(child_config, params, child_src.fingerprint(), child_tgt.fingerprint(),
                           meta={"init": report.method})
    ckpt.validate()
    return ckpt, report


def tl_init(parent: ModelCheckpoint, child_config: ModelConfig, child_vocabs: tuple[Vocabulary, Vocabulary],
            seed: int) -> tuple[ModelCheckpoint, TransferReport]:
    """Each child source token takes a uniformly random parent source row (with replacement)."""
    child_src, child_tgt = child_vocabs
    _check_compatible(parent, child_config, child_src, child_tgt)
    rng = np.random.default_rng(seed)
    table = parent.params["src_embed"]
    rows = rng.integers(0, table.shape[0], size=len(child_src))
    report = TransferReport("tl", [], len(child_src))
    return _assemble(parent, child_config, child_src, child_tgt, table[rows].copy(), report)


def tm_init(parent: ModelCheckpoint, child_config: ModelConfig, child_vocabs: tuple[Vocabulary, Vocabulary],
            seed: int, parent_src_vocab: Vocabulary) -> tuple[ModelCheckpoint, TransferReport]:
    """Token matching: rows of child source tokens also in the parent source vocabulary are copied.

    Matching is exact on the subword string, end-of-word marker included;
    the special symbols are not subwords and never match.
    Unmatched rows are drawn from N(0, model_dim^-1/2).
    """
    child_src, child_tgt = child_vocabs
    _check_compatible(parent, child_config, child_src, child_tgt)
    if parent.src_vocab and parent.src_vocab != parent_src_vocab.fingerprint():
        raise ArchitectureMismatch("parent_src_vocab does not match the parent checkpoint")
    rng = np.random.default_rng(seed)
    table = parent.params["src_embed"]
    emb = rng.normal(0.0, child_config.model_dim ** -0.5, size=(len(child_src), child_config.model_dim))
    emb = emb.astype(table.dtype)
    matched = []
    for i, tok in enumerate(child_src.tokens):
        if tok in SPECIALS:
            continue
        j = parent_src_vocab.index.get(tok)
        if j is not None:
            emb[i] = table[j]
            matched.append(tok)
    report = TransferReport("tm", matched, len(child_src) - len(matched))
    return _assemble(parent, child_config, child_src, child_tgt, emb, report)


def vanilla_init(child_config: ModelConfig, child_vocabs: tuple[Vocabulary, Vocabulary], seed: int) -> ModelCheckpoint:
    src, tgt = child_vocabs
    return new_checkpoint(child_config, seed, src.fingerprint(), tgt.fingerprint())


def tm_init_target(parent: ModelCheckpoint, child_config: ModelConfig, child_vocabs: tuple[Vocabulary, Vocabulary],
                   seed: int, parent_tgt_vocab: Vocabulary) -> tuple[ModelCheckpoint, TransferReport]:
    """Token matching on the target side, for models that share the parent's source language.

    Used for the reversed child (E -> C) that back-translates monolingual
    targets: the reversed parent (E -> P) already reads E, so everything but
    the target table is copied and matched C/P subwords keep the P rows.
    """
    child_src, child_tgt = child_vocabs
    if parent.src_vocab and parent.src_vocab != child_src.fingerprint():
        raise ArchitectureMismatch("parent and child source vocabularies differ")
    if parent.tgt_vocab and parent.tgt_vocab != parent_tgt_vocab.fingerprint():
        raise ArchitectureMismatch("parent_tgt_vocab does not match the parent checkpoint")
    if child_config.tgt_vocab_size != len(child_tgt):
        raise ArchitectureMismatch(f"child config has tgt_vocab_size {child_config.tgt_vocab_size} "
                                   f"but the child target vocabulary holds {len(child_tgt)} tokens")
    if not (parent.config.tie_target_embeddings and child_config.tie_target_embeddings):
        raise ArchitectureMismatch("target-side matching needs tied target embeddings")
    ps, cs = parent.config.parameter_shapes(), child_config.parameter_shapes()
    bad = [k for k in sorted(set(ps) | set(cs)) if k != "tgt_embed" and ps.get(k) != cs.get(k)]
    if bad:
        raise ArchitectureMismatch("incompatible architectures: " + ", ".join(bad))
    rng = np.random.default_rng(seed)
    table = parent.params["tgt_embed"]
    emb = rng.normal(0.0, child_config.model_dim ** -0.5, size=(len(child_tgt), child_config.model_dim))
    emb = emb.astype(table.dtype)
    matched = []
    for i, tok in enumerate(child_tgt.tokens):
        j = parent_tgt_vocab.index.get(tok)
        # specials keep their parent rows here: they play the same role on both target sides
        if j is not None:
            emb[i] = table[j]
            if tok not in SPECIALS:
                matched.append(tok)
    report = TransferReport("tm-target", matched, len(child_tgt) - len(matched) - len(SPECIALS))
    params = {k: (emb if k == "tgt_embed" else v.copy()) for k, v in parent.params.items()}
    report.copied_parameter_names = sorted(k for k in params if k != "tgt_embed")
    ckpt = ModelCheckpoint(child_config, params, child_src.fingerprint(), child_tgt.fingerprint(),
                           meta={"init": report.method})
    ckpt.validate()
    return ckpt, report
