"""Parallel corpora: synthetic generation, filtering, pseudo parent sources and back-translation.

The synthetic testbed renders one stream of "base" sentences (sequences of
concept ids drawn from a seeded Markov chain) into several surface
languages. A surface language is a bijective relabelling of the concepts
plus a deterministic local reordering (each block of ``window`` words is
reversed), so two renderings of the same base sentence are semantically
equivalent by construction and can be mapped back to it exactly.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelCheckpoint, decode_batch
from .subword import Codec

PROVENANCE = ("real", "pseudo_parent", "back_translated")

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class ParallelCorpus:
    src: list[str]
    tgt: list[str]
    provenance: list[str] | None = None
    src_lang: str = "src"
    tgt_lang: str = "tgt"
    base: list[tuple[int, ...]] | None = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise ValueError(f"unaligned corpus: {len(self.src)} sources vs {len(self.tgt)} targets")
        if self.provenance is None:
            self.provenance = ["real"] * len(self.src)
        if len(self.provenance) != len(self.src):
            raise ValueError("provenance length does not match corpus")
        bad = set(self.provenance) - set(PROVENANCE)
        if bad:
            raise ValueError(f"unknown provenance tags {sorted(bad)}")
        if self.base is not None and len(self.base) != len(self.src):
            raise ValueError("base alignment length does not match corpus")

    def __len__(self):
        return len(self.src)

    def subset(self, idx: Sequence[int]) -> "ParallelCorpus":
        idx = list(idx)
        return ParallelCorpus([self.src[i] for i in idx], [self.tgt[i] for i in idx],
                              [self.provenance[i] for i in idx], self.src_lang, self.tgt_lang,
                              None if self.base is None else [self.base[i] for i in idx])

    def concat(self, other: "ParallelCorpus") -> "ParallelCorpus":
        base = None
        if self.base is not None and other.base is not None:
            base = self.base + other.base
        return ParallelCorpus(self.src + other.src, self.tgt + other.tgt, self.provenance + other.provenance,
                              self.src_lang, self.tgt_lang, base)

    def counts(self) -> dict[str, int]:
        return {p: self.provenance.count(p) for p in PROVENANCE if p in self.provenance}

    def save(self, prefix):
        prefix = str(prefix)
        Path(prefix + ".src").write_text("".join(s + "\n" for s in self.src), encoding="utf-8")
        Path(prefix + ".tgt").write_text("".join(s + "\n" for s in self.tgt), encoding="utf-8")
        Path(prefix + ".prov").write_text("".join(s + "\n" for s in self.provenance), encoding="utf-8")
        if self.base is not None:
            Path(prefix + ".base").write_text("".join(" ".join(map(str, b)) + "\n" for b in self.base),
                                              encoding="utf-8")

    @classmethod
    def load(cls, prefix, src_lang: str = "src", tgt_lang: str = "tgt") -> "ParallelCorpus":
        prefix = str(prefix)

        def lines(suffix):
            text = Path(prefix + suffix).read_text(encoding="utf-8")
            return text.split("\n")[:-1] if text else []

        prov = lines(".prov") if Path(prefix + ".prov").exists() else None
        base = None
        if Path(prefix + ".base").exists():
            base = [tuple(int(x) for x in ln.split()) for ln in lines(".base")]
        return cls(lines(".src"), lines(".tgt"), prov, src_lang, tgt_lang, base)


# ---------------------------------------------------------------- synthetic languages


@dataclass(frozen=True)
class LanguageSpec:
    """Surface rendering of the base concepts.

    ``identity`` reuses the target language's primary forms. ``share_with``
    copies the forms of another language for a seeded ``share_fraction`` of
    concepts (cognates). ``synonym_fraction`` of concepts get a second form,
    chosen per occurrence with probability ``synonym_prob``.
    """

    form_seed: int
    window: int = 0
    identity: bool = False
    share_with: str | None = None
    share_fraction: float = 0.0
    synonym_fraction: float = 0.0
    synonym_prob: float = 0.3


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    base_vocab: int = 200
    grammar_seed: int = 0
    min_len: int = 4
    max_len: int = 12
    zipf: float = 1.0
    successors: int = 6
    markov_weight: float = 0.8
    target: str = "E"
    languages: tuple[tuple[str, LanguageSpec], ...] = field(default_factory=lambda: (
        ("E", LanguageSpec(form_seed=11)),
        ("P", LanguageSpec(form_seed=23, window=3)),
        ("C", LanguageSpec(form_seed=37, window=3, share_with="P", share_fraction=0.5)),
    ))

    def language(self, name: str) -> LanguageSpec:
        for n, spec in self.languages:
            if n == name:
                return spec
        raise KeyError(f"unknown synthetic language {name!r}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("base_vocab", "grammar_seed", "min_len", "max_len", "zipf",
                                           "successors", "markov_weight", "target")}
        d["languages"] = {n: vars(s).copy() for n, s in self.languages}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticLanguageSpec":
        d = dict(d)
        langs = tuple((n, LanguageSpec(**s)) for n, s in d.pop("languages").items())
        return cls(languages=langs, **d)


def _random_word(rng: random.Random) -> str:
    return "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(rng.choice((2, 2, 3))))


@lru_cache(maxsize=None)
def _forms(spec: SyntheticLanguageSpec, name: str) -> tuple[tuple[str, ...], dict]:
    """(primary form per concept, {concept: synonym form})."""
    lang = spec.language(name)
    if lang.identity:
        return _forms(spec, spec.target)[0], {}
    rng = random.Random(lang.form_seed)
    n = spec.base_vocab
    forms: list[str | None] = [None] * n
    taken: set[str] = set()
    if lang.share_with is not None:
        other = _forms(spec, lang.share_with)[0]
        taken.update(other)
        k = int(round(lang.share_fraction * n))
        for c in sorted(rng.sample(range(n), k)):
            forms[c] = other[c]
    for c in range(n):
        if forms[c] is None:
            w = _random_word(rng)
            while w in taken:
                w = _random_word(rng)
            taken.add(w)
            forms[c] = w
    synonyms = {}
    k = int(round(lang.synonym_fraction * n))
    for c in sorted(rng.sample(range(n), k)):
        w = _random_word(rng)
        while w in taken:
            w = _random_word(rng)
        taken.add(w)
        synonyms[c] = w
    return tuple(forms), synonyms


@lru_cache(maxsize=None)
def _grammar(spec: SyntheticLanguageSpec):
    rng = np.random.default_rng(spec.grammar_seed)
    n = spec.base_vocab
    unigram = 1.0 / np.arange(1, n + 1) ** spec.zipf
    unigram /= unigram.sum()
    succ = np.stack([rng.choice(n, size=spec.successors, replace=False, p=unigram) for _ in range(n)])
    weights = rng.dirichlet(np.ones(spec.successors), size=n)
    return unigram, succ, weights


def sample_base(spec: SyntheticLanguageSpec, n: int, seed: int) -> list[tuple[int, ...]]:
    unigram, succ, weights = _grammar(spec)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = [int(rng.choice(spec.base_vocab, p=unigram))]
        for _ in range(length - 1):
            prev = sent[-1]
            if rng.random() < spec.markov_weight:
                sent.append(int(succ[prev][rng.choice(spec.successors, p=weights[prev])]))
            else:
                sent.append(int(rng.choice(spec.base_vocab, p=unigram)))
        out.append(tuple(sent))
    return out


def _reorder(tokens: list, window: int) -> list:
    if window < 2:
        return list(tokens)
    out = []
    for i in range(0, len(tokens), window):
        out.extend(reversed(tokens[i:i + window]))
    return out


def render(spec: SyntheticLanguageSpec, base: Sequence[int], lang: str, rng: np.random.Generator | None = None) -> str:
    """Surface sentence of ``base`` in ``lang``; synonyms need ``rng``."""
    forms, synonyms = _forms(spec, lang)
    p = spec.language(lang).synonym_prob
    words = []
    for c in base:
        if c in synonyms and rng is not None and rng.random() < p:
            words.append(synonyms[c])
        else:
            words.append(forms[c])
    return " ".join(_reorder(words, spec.language(lang).window))


def to_base(spec: SyntheticLanguageSpec, sentence: str, lang: str) -> tuple[int, ...]:
    """Invert :func:`render`. Unknown words map to -1."""
    forms, synonyms = _forms(spec, lang)
    inv = {w: c for c, w in enumerate(forms)}
    inv.update({w: c for c, w in synonyms.items()})
    words = _reorder(sentence.split(), spec.language(lang).window)
    return tuple(inv.get(w, -1) for w in words)


def gen_synthetic(spec: SyntheticLanguageSpec, n_pairs: int, seed: int, pair: str) -> ParallelCorpus:
    """``n_pairs`` sentence pairs from source language ``pair`` into the target language."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    bases = sample_base(spec, n_pairs, seed)
    rng = np.random.default_rng([seed, 1])
    src = [render(spec, b, pair) for b in bases]
    tgt = [render(spec, b, spec.target, rng) for b in bases]
    return ParallelCorpus(src, tgt, None, pair, spec.target, bases)


def reverse(corpus: ParallelCorpus) -> ParallelCorpus:
    return ParallelCorpus(list(corpus.tgt), list(corpus.src), list(corpus.provenance),
                          corpus.tgt_lang, corpus.src_lang, corpus.base)


# ---------------------------------------------------------------- filtering


def filter_pairs(corpus: ParallelCorpus, max_len: int = 60, max_ratio: float = 1.5) -> ParallelCorpus:
    """Drop pairs with an empty side, a side over ``max_len`` words, or a length ratio over ``max_ratio``."""
    keep = []
    for i, (s, t) in enumerate(zip(corpus.src, corpus.tgt)):
        a, b = len(s.split()), len(t.split())
        if a == 0 or b == 0 or a > max_len or b > max_len:
            continue
        if max(a, b) / min(a, b) > max_ratio:
            continue
        keep.append(i)
    return corpus.subset(keep)


def sample_ratio(corpus: ParallelCorpus, ratio: float, seed: int) -> ParallelCorpus:
    """Seeded random subset holding ``round(ratio * len)`` pairs, in original order."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    n = int(round(ratio * len(corpus)))
    idx = np.sort(np.random.default_rng(seed).choice(len(corpus), size=n, replace=False))
    return corpus.subset(idx.tolist())


# ---------------------------------------------------------------- back-translation


def translate(ckpt: ModelCheckpoint, sentences: Sequence[str], src_codec: Codec, tgt_codec: Codec,
              method: str = "beam", beam: int = 5, len_penalty: float = 1.0, max_len: int = 100,
              seed: int = 0, batch_size: int = 64) -> list[str]:
    """Translate raw sentences; a failing chunk is retried line by line to name the bad line."""
    ids = [src_codec.encode(s, role="source") for s in sentences]
    out: list[str] = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        try:
            hyps = decode_batch(ckpt, chunk, method, beam, len_penalty, max_len, seed + start, batch_size)
        except Exception:
            for j, one in enumerate(chunk):
                try:
                    decode_batch(ckpt, [one], method, beam, len_penalty, max_len, seed + start + j, 1)
                except Exception as exc:
                    raise RuntimeError(f"decoding failed on line {start + j + 1}: {exc}") from exc
            raise
        out.extend(tgt_codec.decode(h) for h in hyps)
    return out


def make_pseudo_parent(child: ParallelCorpus, reversed_parent: ModelCheckpoint, tgt_codec: Codec,
                       parent_src_codec: Codec, method: str = "beam", beam: int = 5, len_penalty: float = 1.0,
                       max_len: int = 100, seed: int = 0, parent_lang: str = "P") -> ParallelCorpus:
    """Back-translate every child target into the parent source language.

    Output pair ``i`` is ``(x~_p, y_i)`` for input pair ``i``; targets are copied verbatim.
    """
    pseudo = translate(reversed_parent, child.tgt, tgt_codec, parent_src_codec, method, beam, len_penalty,
                       max_len, seed)
    return ParallelCorpus(pseudo, list(child.tgt), ["pseudo_parent"] * len(child), parent_lang,
                          child.tgt_lang, child.base)


def augment_back_translation(child: ParallelCorpus, target_mono: Sequence[str], reversed_child: ModelCheckpoint,
                             tgt_codec: Codec, child_src_codec: Codec, ratio: float | None = 1.0,
                             method: str = "beam", beam: int = 5, len_penalty: float = 1.0, max_len: int = 100,
                             seed: int = 0, mono_base: Sequence[tuple[int, ...]] | None = None) -> ParallelCorpus:
    """Real pairs followed by back-translated pairs built from target-side monolingual text.

    ``ratio`` caps the synthetic part at ``ratio * len(child)`` sentences; ``None`` uses all of it.
    """
    mono = list(target_mono)
    if ratio is not None:
        mono = mono[: int(round(ratio * len(child)))]
    if not mono:
        return child
    bt = translate(reversed_child, mono, tgt_codec, child_src_codec, method, beam, len_penalty, max_len, seed)
    base = None
    if child.base is not None and mono_base is not None:
        base = list(mono_base[: len(mono)])
    extra = ParallelCorpus(bt, mono, ["back_translated"] * len(mono), child.src_lang, child.tgt_lang, base)
    if base is None:
        child = ParallelCorpus(child.src, child.tgt, child.provenance, child.src_lang, child.tgt_lang, None)
    return child.concat(extra)
