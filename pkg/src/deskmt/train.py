"""Adam + inverse-square-root training with best-validation-BLEU checkpoint selection."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .consist import ConsistConfig, consist_loss, rdrop_loss, total_loss
from .corpus import ParallelCorpus
from .evaluate import bleu
from .model import ModelCheckpoint, decode_batch, source_batch, target_batch, teacher_logits
from .subword import Codec

log = logging.getLogger(__name__)

MODE_DEFAULTS = {
    "parent": dict(warmup_steps=10000, peak_lr=1e-3, dropout=0.1, attention_dropout=0.0, activation_dropout=0.0),
    "scratch": dict(warmup_steps=8000, peak_lr=5e-4, dropout=0.3, attention_dropout=0.1, activation_dropout=0.1),
    "transfer": dict(warmup_steps=1000, peak_lr=2e-4, dropout=0.3, attention_dropout=0.1, activation_dropout=0.1),
}


@dataclass
class TrainConfig:
    mode: str = "transfer"
    warmup_steps: int | None = None
    peak_lr: float | None = None
    epochs: int = 200
    max_tokens_per_batch: int = 1000
    dropout: float | None = None
    attention_dropout: float | None = None
    activation_dropout: float | None = None
    seed: int = 1
    consist: ConsistConfig | None = None
    rdrop: float | None = None
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    validate_every: int = 1
    valid_max_len: int = 60

    def __post_init__(self):
        if self.mode not in MODE_DEFAULTS:
            raise ValueError(f"unknown training mode {self.mode!r}")
        for k, v in MODE_DEFAULTS[self.mode].items():
            if getattr(self, k) is None:
                setattr(self, k, v)
        if isinstance(self.consist, Mapping):
            self.consist = ConsistConfig.from_dict(self.consist)
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**d)


def lr_at(step: int, warmup: int, peak: float) -> float:
    """``peak * min(step / warmup, sqrt(warmup / step))``."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    """Adam with bias correction; state is a pair of moment maps plus a step counter."""

    def __init__(self, betas=(0.9, 0.98), eps=1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float):
        bad = [k for k, g in grads.items() if not np.isfinite(g).all()]
        if bad:
            raise T.NonFiniteError(f"non-finite gradient in {', '.join(sorted(bad))}; step aborted")
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            p = params[k]
            m = self.m.setdefault(k, np.zeros_like(p))
            v = self.v.setdefault(k, np.zeros_like(p))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params, grads, state: Adam, lr: float):
    state.step(params, grads, lr)
    return params, state


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(f)
    return norm


def make_batches(src_lens: Sequence[int], tgt_lens: Sequence[int], max_tokens: int,
                 rng: np.random.Generator) -> list[list[int]]:
    """Length-sorted batches whose padded size stays within ``max_tokens``; batch order shuffled."""
    order = sorted(range(len(src_lens)), key=lambda i: (tgt_lens[i], src_lens[i], i))
    batches, cur, width = [], [], 0
    for i in order:
        w = max(width, src_lens[i] + 1, tgt_lens[i])
        if cur and w * (len(cur) + 1) > max_tokens:
            batches.append(cur)
            cur, w = [], max(src_lens[i] + 1, tgt_lens[i])
        cur.append(i)
        width = w
    if cur:
        batches.append(cur)
    perm = rng.permutation(len(batches))
    return [batches[k] for k in perm]


@dataclass
class EpochRecord:
    epoch: int
    bleu: float | None
    nll: float
    l_d: float | None
    lr: float
    seconds: float
    rdrop: float | None = None


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_bleu: float = -1.0
    label: str = ""

    def to_lines(self, with_time: bool = True) -> str:
        out = []
        for r in self.records:
            d = asdict(r)
            if not with_time:
                d.pop("seconds")
            out.append(json.dumps(d, sort_keys=True))
        return "\n".join(out) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_lines(), encoding="utf-8")

    @classmethod
    def load(cls, path, label: str = "") -> "TrainingLog":
        recs = [EpochRecord(**json.loads(ln)) for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
        return cls.from_records(recs, label)

    @classmethod
    def from_records(cls, recs: Sequence[EpochRecord], label: str = "") -> "TrainingLog":
        """Rebuild the best-epoch fields (first epoch wins ties)."""
        lg = cls(list(recs), label=label)
        scored = [r for r in recs if r.bleu is not None]
        if scored:
            best = max(scored, key=lambda r: (r.bleu, -r.epoch))
            lg.best_epoch, lg.best_bleu = best.epoch, best.bleu
        return lg

    def curve(self) -> list[tuple[int, float]]:
        return [(r.epoch, r.bleu) for r in self.records if r.bleu is not None]


@dataclass
class Validation:
    sources: list[list[int]]
    references: list[str]
    codec: Codec
    max_len: int = 60
    method: str = "greedy"

    def score(self, ckpt: ModelCheckpoint) -> float:
        hyps = decode_batch(ckpt, self.sources, self.method, max_len=self.max_len, batch_size=128)
        return bleu([self.codec.decode(h) for h in hyps], self.references)


def train_model(init: ModelCheckpoint, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], cfg: TrainConfig,
                valid: Validation | None = None, parent: ModelCheckpoint | None = None,
                pseudo_sources: Sequence[Sequence[int]] | None = None,
                label: str = "") -> tuple[ModelCheckpoint, TrainingLog]:
    """Train a copy of ``init``; returns the best-validation checkpoint (last one without validation).

    With ``cfg.consist``, every batch also runs ``parent`` (no dropout, no
    gradient) on the aligned pseudo parent sources and adds the weighted
    consistency term. With ``cfg.rdrop``, a second dropout forward is taken,
    the NLL is averaged over both forwards and the symmetric-KL term added.
    """
    if cfg.consist is not None:
        if parent is None or pseudo_sources is None:
            raise ValueError("consistency training needs both a parent checkpoint and pseudo parent sources")
        if len(pseudo_sources) != len(pairs):
            raise ValueError(f"pseudo parent sources ({len(pseudo_sources)}) are not aligned with "
                             f"training pairs ({len(pairs)})")
    if not pairs:
        raise ValueError("no training pairs")
    ckpt = init.copy()
    ckpt.config = ckpt.config.replace(dropout=cfg.dropout, attention_dropout=cfg.attention_dropout,
                                      activation_dropout=cfg.activation_dropout)
    mcfg = ckpt.config
    params = ckpt.tensors(requires_grad=True)
    parent_p = parent.tensors() if cfg.consist is not None else None
    opt = Adam(cfg.betas, cfg.adam_eps)
    batch_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    src_lens = [len(s) for s, _ in pairs]
    tgt_lens = [len(t) for _, t in pairs]
    log_ = TrainingLog(label=label)
    best = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"nll": 0.0, "l_d": 0.0, "rdrop": 0.0}
        ntok = 0
        for idx in make_batches(src_lens, tgt_lens, cfg.max_tokens_per_batch, batch_rng):
            step += 1
            src = source_batch([pairs[i][0] for i in idx])
            tgt_in, gold, mask = target_batch([pairs[i][1] for i in idx])
            logits = teacher_logits(params, mcfg, src, tgt_in, True, drop_rng)
            nll = T.smoothed_nll(T.log_softmax_t(logits), gold, mask, cfg.label_smoothing)
            loss = nll
            rd = None
            if cfg.rdrop is not None:
                logits_b = teacher_logits(params, mcfg, src, tgt_in, True, drop_rng)
                nll_b = T.smoothed_nll(T.log_softmax_t(logits_b), gold, mask, cfg.label_smoothing)
                loss = T.scale(T.add(nll, nll_b), 0.5)
                rd = rdrop_loss(T.softmax_t(logits), T.softmax_t(logits_b), mask, cfg.rdrop)
            ld = None
            if cfg.consist is not None:
                psrc = source_batch([pseudo_sources[i] for i in idx])
                with T.no_grad():
                    plogits = teacher_logits(parent_p, parent.config, psrc, tgt_in, False, None)
                    pdist = T.softmax_t(plogits, cfg.consist.tau).data
                ld = consist_loss(T.softmax_t(logits, cfg.consist.tau), pdist, mask, cfg.consist)
                loss = total_loss(loss, ld, cfg.consist)
            if rd is not None:
                loss = T.add(loss, rd)
            if not np.isfinite(loss.data).all():
                raise T.NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            grads = {}
            for k, p in params.items():
                grads[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.grad = None
            clip_grads(grads, cfg.clip_norm)
            lr = lr_at(step, cfg.warmup_steps, cfg.peak_lr)
            opt.step(ckpt.params, grads, lr)
            n = int(mask.sum())
            ntok += n
            sums["nll"] += float(nll.data) * n
            if ld is not None:
                sums["l_d"] += float(ld.data) * n
            if rd is not None:
                sums["rdrop"] += float(rd.data) * n
        score = None
        if valid is not None and (epoch % cfg.validate_every == 0 or epoch == cfg.epochs):
            score = valid.score(ckpt)
            if score > log_.best_bleu:
                log_.best_bleu, log_.best_epoch = score, epoch
                best = ckpt.copy()
        rec = EpochRecord(epoch, score, sums["nll"] / max(ntok, 1),
                          sums["l_d"] / max(ntok, 1) if cfg.consist is not None else None,
                          lr_at(max(step, 1), cfg.warmup_steps, cfg.peak_lr), time.perf_counter() - t0,
                          sums["rdrop"] / max(ntok, 1) if cfg.rdrop is not None else None)
        log_.records.append(rec)
        log.info("%s epoch %d nll %.4f l_d %s bleu %s", label, epoch, rec.nll, rec.l_d, score)
    if best is None:
        best = ckpt.copy()
    best.meta = dict(best.meta, best_epoch=log_.best_epoch, best_bleu=log_.best_bleu)
    return best, log_


def encode_pairs(corpus: ParallelCorpus, src_codec: Codec, tgt_codec: Codec):
    return [(src_codec.encode(s, role="source"), tgt_codec.encode(t, role="target"))
            for s, t in zip(corpus.src, corpus.tgt)]


def train_child(child_init: ModelCheckpoint, data: ParallelCorpus, cfg: TrainConfig, src_codec: Codec,
                tgt_codec: Codec, valid: Validation | None = None, pseudo: ParallelCorpus | None = None,
                parent: ModelCheckpoint | None = None, parent_src_codec: Codec | None = None,
                label: str = "") -> tuple[ModelCheckpoint, TrainingLog]:
    """Child training on ``data``; ``pseudo`` must be pair-aligned with it when consistency is on."""
    pseudo_ids = None
    if cfg.consist is not None:
        if pseudo is None or parent is None or parent_src_codec is None:
            raise ValueError("consistency training needs pseudo, parent and parent_src_codec")
        if len(pseudo) != len(data) or pseudo.tgt != data.tgt:
            raise ValueError("pseudo parent corpus is not aligned with the child data")
        pseudo_ids = [parent_src_codec.encode(s, role="source") for s in pseudo.src]
    return train_model(child_init, encode_pairs(data, src_codec, tgt_codec), cfg, valid, parent, pseudo_ids, label)
