"""Byte-pair encoding and vocabularies.

Words are split on whitespace, then into characters with the last character
carrying the end-of-word marker ``</w>``. Merges are learned greedily by
pair frequency; ties go to the lexicographically smallest pair so that the
merge list is a pure function of the corpus.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

EOW = "</w>"
PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3


def word_counts(sentences: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for s in sentences:
        counts.update(s.split())
    return counts


def _chars(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge in BPE model")

    @property
    def merge_count(self) -> int:
        return len(self.merges)

    @property
    def ranks(self) -> dict[tuple[str, str], int]:
        r = self.__dict__.get("_ranks")
        if r is None:
            r = {m: i for i, m in enumerate(self.merges)}
            object.__setattr__(self, "_ranks", r)
        return r

    def segment_word(self, word: str) -> list[str]:
        cache = self.__dict__.setdefault("_cache", {})
        hit = cache.get(word)
        if hit is not None:
            return list(hit)
        symbols = list(_chars(word))
        ranks = self.ranks
        while len(symbols) > 1:
            best, best_rank = None, None
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            a, b = symbols[best], symbols[best + 1]
            merged, i = [], 0
            while i < len(symbols):
                if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(symbols[i])
                    i += 1
            symbols = merged
        cache[word] = tuple(symbols)
        return symbols

    def segment(self, text: str) -> list[str]:
        out: list[str] = []
        for w in text.split():
            out.extend(self.segment_word(w))
        return out

    def save(self, path):
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(tuple(merges))


def learn_bpe(corpus: Mapping[str, int], merge_count: int) -> BpeModel:
    """Learn up to ``merge_count`` merges from a word-frequency table.

    Stops early once no adjacent pair is left to merge.
    """
    if not corpus:
        raise ValueError("learn_bpe: empty corpus")
    if merge_count < 0:
        raise ValueError("merge_count must be non-negative")
    words = [(list(_chars(w)), f) for w, f in sorted(corpus.items()) if w and f > 0]
    stats: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for k, (sym, f) in enumerate(words):
        for pair in zip(sym, sym[1:]):
            stats[pair] += f
            where.setdefault(pair, set()).add(k)
    merges: list[tuple[str, str]] = []
    for _ in range(merge_count):
        stats = +stats
        if not stats:
            break
        top = max(stats.values())
        pair = min(p for p, c in stats.items() if c == top)
        merges.append(pair)
        a, b = pair
        for k in sorted(where.pop(pair, ())):
            sym, f = words[k]
            for old in zip(sym, sym[1:]):
                stats[old] -= f
            merged, i = [], 0
            while i < len(sym):
                if i < len(sym) - 1 and sym[i] == a and sym[i + 1] == b:
                    merged.append(a + b)
                    i += 2
                else:
                    merged.append(sym[i])
                    i += 1
            sym[:] = merged
            for new in zip(sym, sym[1:]):
                stats[new] += f
                where.setdefault(new, set()).add(k)
    return BpeModel(tuple(merges))


@dataclass
class Vocabulary:
    """Bijective token/id table. Ids 0-3 are the special tokens."""

    tokens: list[str]
    role: str = "target"
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if self.role not in ("source", "target"):
            raise ValueError(f"unknown vocabulary role {self.role!r}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens are not unique")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def with_role(self, role: str) -> "Vocabulary":
        return Vocabulary(list(self.tokens), role)

    def save(self, path):
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.tokens)), encoding="utf-8")

    @classmethod
    def load(cls, path, role: str = "target") -> "Vocabulary":
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        return cls([t for _, t in rows], role)


def build_vocab(model: BpeModel, sentences: Iterable[str], role: str = "target") -> Vocabulary:
    """Every symbol of the segmented corpus, most frequent first (ties by string)."""
    counts: Counter = Counter()
    for w, f in word_counts(sentences).items():
        for sym in model.segment_word(w):
            counts[sym] += f
        for ch in _chars(w):
            counts.setdefault(ch, 0)
    ordered = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ordered, role)


def encode(text: str, model: BpeModel, vocab: Vocabulary, role: str | None = None) -> list[int]:
    ids = [vocab.id(sym) for sym in model.segment(text)]
    if (role or vocab.role) == "target":
        ids.append(EOS_ID)
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    cur = ""
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} outside vocabulary of size {n}")
        if i in (PAD_ID, BOS_ID, EOS_ID):
            continue
        if i == UNK_ID:
            if cur:
                words.append(cur)
                cur = ""
            words.append(UNK)
            continue
        tok = vocab.tokens[i]
        if tok.endswith(EOW):
            words.append(cur + tok[: -len(EOW)])
            cur = ""
        else:
            cur += tok
    if cur:
        words.append(cur)
    return " ".join(words)


@dataclass(frozen=True)
class Codec:
    """A BPE model paired with the vocabulary built from it."""

    bpe: BpeModel
    vocab: Vocabulary

    def encode(self, text: str, role: str | None = None) -> list[int]:
        return encode(text, self.bpe, self.vocab, role)

    def decode(self, ids: Sequence[int]) -> str:
        return decode(ids, self.vocab)

    @classmethod
    def train(cls, sentences: Sequence[str], merge_count: int, role: str) -> "Codec":
        bpe = learn_bpe(word_counts(sentences), merge_count)
        return cls(bpe, build_vocab(bpe, sentences, role))

    def save(self, prefix):
        """Writes ``prefix.bpe`` and ``prefix.vocab``."""
        self.bpe.save(f"{prefix}.bpe")
        self.vocab.save(f"{prefix}.vocab")

    @classmethod
    def load(cls, prefix, role: str) -> "Codec":
        return cls(BpeModel.load(f"{prefix}.bpe"), Vocabulary.load(f"{prefix}.vocab", role))
