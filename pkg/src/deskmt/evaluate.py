"""Corpus BLEU and inference calibration."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelCheckpoint, beam_decode_batch, forward_teacher, greedy_decode_batch
from .subword import EOS_ID, Codec


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses: Sequence[str], references: Sequence[str], order: int = 4):
    correct = [0] * order
    total = [0] * order
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        ht, rt = h.split(), r.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)
    return correct, total, hyp_len, ref_len


def bleu(hypotheses: Sequence[str], references: Sequence[str], order: int = 4) -> float:
    """Corpus BLEU-4 on whitespace tokens with exponential smoothing, in [0, 100].

    An n-gram order with zero matches gets precision ``1 / (2^k * total)``,
    ``k`` counting the zero-match orders so far. An order with no n-grams at
    all contributes a zero precision, which drives the score to 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("bleu needs at least one hypothesis")
    correct, total, hyp_len, ref_len = bleu_stats(hypotheses, references, order)
    if hyp_len == 0 or correct[0] == 0:
        return 0.0
    precisions = [0.0] * order
    smooth = 1.0
    for n in range(order):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions[n] = 1.0 / (smooth * total[n])
        else:
            precisions[n] = correct[n] / total[n]
    if min(precisions) <= 0:
        return 0.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / order)


def token_accuracy_labels(hypothesis: Sequence, reference: Sequence) -> list[bool]:
    """Mark each hypothesis token correct iff a minimum edit alignment matches it.

    Unit costs; on ties the backtrace prefers match, then substitution,
    insertion (extra hypothesis token) and deletion.
    """
    h, r = list(hypothesis), list(reference)
    n, m = len(h), len(r)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (h[i - 1] != r[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    labels = [False] * n
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and h[i - 1] == r[j - 1] and d[i, j] == d[i - 1, j - 1]:
            labels[i - 1] = True
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    return labels


@dataclass
class CalibrationReport:
    mean_confidence: float
    token_accuracy: float
    gap: float
    buckets: list[dict] = field(default_factory=list)
    total_tokens: int = 0

    def to_text(self) -> str:
        lines = [
            f"tokens\t{self.total_tokens}",
            f"mean_confidence\t{self.mean_confidence:.6f}",
            f"token_accuracy\t{self.token_accuracy:.6f}",
            f"gap\t{self.gap:.6f}",
            "bucket\tlow\thigh\tcount\tconfidence\taccuracy",
        ]
        for b in self.buckets:
            lines.append(f"{b['bucket']}\t{b['low']:.1f}\t{b['high']:.1f}\t{b['count']}\t"
                         f"{b['confidence']:.6f}\t{b['accuracy']:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


def calibration_from_tokens(confidences: Sequence[float], correct: Sequence[bool]) -> CalibrationReport:
    c = np.asarray(confidences, dtype=np.float64)
    a = np.asarray(correct, dtype=np.float64)
    if c.shape != a.shape:
        raise ValueError("one correctness label per confidence is required")
    if c.size == 0:
        return CalibrationReport(0.0, 0.0, 0.0, [], 0)
    conf, acc = float(c.mean()), float(a.mean())
    which = np.minimum((c * 10).astype(int), 9)
    buckets = []
    for b in range(10):
        sel = which == b
        k = int(sel.sum())
        buckets.append({"bucket": b, "low": b / 10, "high": (b + 1) / 10, "count": k,
                        "confidence": float(c[sel].mean()) if k else 0.0,
                        "accuracy": float(a[sel].mean()) if k else 0.0})
    return CalibrationReport(conf, acc, conf - acc, buckets, int(c.size))


def generated_token_confidences(ckpt: ModelCheckpoint, src_ids: Sequence[int], out_ids: Sequence[int]) -> list[float]:
    """Probability (tau = 1) the model assigned to each emitted token given its prefix."""
    if not out_ids:
        return []
    dist = forward_teacher(ckpt, src_ids, list(out_ids) + [EOS_ID], tau=1.0)
    return [float(dist[t, tok]) for t, tok in enumerate(out_ids)]


def calibration_report(ckpt: ModelCheckpoint, sources: Sequence[str], references: Sequence[str],
                       src_codec: Codec, tgt_codec: Codec, method: str = "beam", beam: int = 5,
                       len_penalty: float = 1.0, max_len: int = 100, batch_size: int = 64) -> CalibrationReport:
    """Decode each source and compare per-token confidence with per-token correctness.

    Tokens are target-side subword units without the closing eos; a token is
    correct when the edit alignment against the reference's units matches it.
    """
    if not sources:
        raise ValueError("calibration_report needs a non-empty test set")
    confs: list[float] = []
    labels: list[bool] = []
    srcs = [src_codec.encode(s, role="source") for s in sources]
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        if method == "greedy":
            hyps, chunk_confs = greedy_decode_batch(ckpt, chunk, max_len, return_scores=True)
        else:
            hyps = beam_decode_batch(ckpt, chunk, beam, len_penalty, max_len)
            chunk_confs = [generated_token_confidences(ckpt, s, h) for s, h in zip(chunk, hyps)]
        for k, (hyp, hc) in enumerate(zip(hyps, chunk_confs)):
            ref = tgt_codec.encode(references[start + k], role="source")
            confs.extend(hc)
            labels.extend(token_accuracy_labels(hyp, ref))
    return calibration_from_tokens(confs, labels)
