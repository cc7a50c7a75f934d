"""Pre-norm Transformer encoder-decoder on top of :mod:`deskmt.tensor`.

Parameters live in a flat ``name -> ndarray`` map inside a
:class:`ModelCheckpoint`. The forward pass is functional: it takes a map of
:class:`~deskmt.tensor.Tensor` wrappers so that the trainer can attach
gradients while inference wraps the same arrays without recording a tape.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .subword import BOS_ID, EOS_ID, PAD_ID
from .tensor import Tensor

FORMAT_VERSION = 1
_MAGIC = "deskmt-checkpoint"
_NEG = -1e9


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 128
    heads: int = 4
    dropout: float = 0.1
    attention_dropout: float = 0.0
    activation_dropout: float = 0.0
    max_positions: int = 128
    tie_target_embeddings: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        for name in ("dropout", "attention_dropout", "activation_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        return ModelConfig(**d)

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f = self.model_dim, self.ffn_dim
        shapes: dict[str, tuple[int, ...]] = {
            "src_embed": (self.src_vocab_size, d),
            "tgt_embed": (self.tgt_vocab_size, d),
            "src_pos": (self.max_positions, d),
            "tgt_pos": (self.max_positions, d),
        }
        if not self.tie_target_embeddings:
            shapes["out_proj"] = (self.tgt_vocab_size, d)

        def ln(p):
            shapes[p + ".g"] = (d,)
            shapes[p + ".b"] = (d,)

        def attn(p):
            for w in ("q", "k", "v", "o"):
                shapes[f"{p}.w{w}"] = (d, d)
                shapes[f"{p}.b{w}"] = (d,)

        def ffn(p):
            shapes[p + ".w1"], shapes[p + ".b1"] = (d, f), (f,)
            shapes[p + ".w2"], shapes[p + ".b2"] = (f, d), (d,)

        for i in range(self.layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.self")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        ln("enc.ln")
        for i in range(self.layers):
            ln(f"dec.{i}.ln1")
            attn(f"dec.{i}.self")
            ln(f"dec.{i}.ln2")
            attn(f"dec.{i}.cross")
            ln(f"dec.{i}.ln3")
            ffn(f"dec.{i}.ffn")
        ln("dec.ln")
        return shapes


EMBEDDING_PARAMS = ("src_embed", "tgt_embed", "out_proj")


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    src_vocab: str = ""
    tgt_vocab: str = ""
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def validate(self):
        shapes = self.config.parameter_shapes()
        missing = sorted(set(shapes) - set(self.params))
        extra = sorted(set(self.params) - set(shapes))
        if missing or extra:
            raise ValueError(f"checkpoint parameters do not match config: missing={missing} extra={extra}")
        bad = [f"{k}: {self.params[k].shape} != {s}" for k, s in shapes.items() if self.params[k].shape != s]
        if bad:
            raise ValueError("parameter shape mismatch: " + "; ".join(bad))

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                               self.src_vocab, self.tgt_vocab, self.format_version, dict(self.meta))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k, dtype=v.dtype) for k, v in self.params.items()}

    def astype(self, dtype) -> "ModelCheckpoint":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return out

    def save(self, path):
        names = sorted(self.params)
        directory, offset = [], 0
        blobs = []
        for n in names:
            arr = np.ascontiguousarray(self.params[n], dtype="<f4")
            directory.append({"name": n, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = json.dumps({
            "format_version": self.format_version,
            "config": self.config.to_dict(),
            "vocab_fingerprints": {"source": self.src_vocab, "target": self.tgt_vocab},
            "meta": self.meta,
            "dtype": "float32-le",
            "parameters": directory,
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(f"{_MAGIC} {len(header)}\n".encode("ascii"))
            fh.write(header)
            fh.write(b"\n")
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        magic, size = raw[:nl].decode("ascii").split(" ")
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        start = nl + 1
        header = json.loads(raw[start:start + int(size)].decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header['format_version']}")
        body = start + int(size) + 1
        params = {}
        for entry in header["parameters"]:
            n = int(np.prod(entry["shape"]))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=body + entry["offset"])
            params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        fps = header["vocab_fingerprints"]
        ckpt = cls(ModelConfig.from_dict(header["config"]), params, fps["source"], fps["target"],
                   header["format_version"], header.get("meta", {}))
        ckpt.validate()
        return ckpt


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Vanilla initialisation: N(0, d^-1/2) embeddings, Xavier-uniform matrices."""
    rng = np.random.default_rng(seed)
    std = cfg.model_dim ** -0.5
    params = {}
    for name, shape in cfg.parameter_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if name in EMBEDDING_PARAMS or name.endswith("_pos"):
            arr = rng.normal(0.0, std, size=shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    return params


def new_checkpoint(cfg: ModelConfig, seed: int, src_vocab: str = "", tgt_vocab: str = "") -> ModelCheckpoint:
    return ModelCheckpoint(cfg, init_params(cfg, seed), src_vocab, tgt_vocab)


# ---------------------------------------------------------------- batching


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> np.ndarray:
    width = max((len(s) for s in seqs), default=0)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def source_batch(srcs: Sequence[Sequence[int]]) -> np.ndarray:
    # every source gets a closing eos so that no row is empty
    return pad_batch([list(s) + [EOS_ID] for s in srcs])


def target_batch(tgts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(decoder input, gold output, mask). Gold sequences already end in eos."""
    gold = pad_batch(tgts)
    inp = np.full_like(gold, PAD_ID)
    if gold.shape[1]:
        inp[:, 0] = BOS_ID
        inp[:, 1:] = gold[:, :-1]
    inp[gold == PAD_ID] = PAD_ID
    return inp, gold, gold != PAD_ID


# ---------------------------------------------------------------- layers


def _ln(p, name, x):
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"])


def _attention(p, name, xq, xkv, mask, cfg: ModelConfig, train, rng):
    b, tq, d = xq.shape
    tk = xkv.shape[1]
    h = cfg.heads
    dh = d // h
    q = T.transpose(T.reshape(xq @ p[name + ".wq"] + p[name + ".bq"], (b, tq, h, dh)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(xkv @ p[name + ".wk"] + p[name + ".bk"], (b, tk, h, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(xkv @ p[name + ".wv"] + p[name + ".bv"], (b, tk, h, dh)), (0, 2, 1, 3))
    scores = T.add(T.scale(q @ k, 1.0 / math.sqrt(dh)), mask)
    a = T.dropout(T.softmax_t(scores, 1.0), cfg.attention_dropout, rng, train)
    o = T.reshape(T.transpose(a @ v, (0, 2, 1, 3)), (b, tq, d))
    return o @ p[name + ".wo"] + p[name + ".bo"]


def _ffn(p, name, x, cfg, train, rng):
    hdn = T.relu(x @ p[name + ".w1"] + p[name + ".b1"])
    hdn = T.dropout(hdn, cfg.activation_dropout, rng, train)
    return hdn @ p[name + ".w2"] + p[name + ".b2"]


def _embed(p, table, pos, ids, cfg):
    n = ids.shape[1]
    if n > cfg.max_positions:
        raise ValueError(f"sequence length {n} exceeds max_positions {cfg.max_positions}")
    x = T.scale(T.embedding(p[table], ids), math.sqrt(cfg.model_dim))
    return x + T.embedding(p[pos], np.arange(n))


def _mask(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, dtype=dtype)


def encode_source(p: Mapping[str, Tensor], cfg: ModelConfig, src: np.ndarray, train=False, rng=None):
    """Encoder states [B,S,d] and the additive key mask for cross attention."""
    dt = p["src_embed"].data.dtype
    key_mask = _mask(np.where(src == PAD_ID, _NEG, 0.0)[:, None, None, :], dt)
    x = T.dropout(_embed(p, "src_embed", "src_pos", src, cfg), cfg.dropout, rng, train)
    for i in range(cfg.layers):
        x = _enc_layer(p, i, x, key_mask, cfg, train, rng)
    return _ln(p, "enc.ln", x), key_mask


def _enc_layer(p, i, x, key_mask, cfg, train, rng):
    y = _ln(p, f"enc.{i}.ln1", x)
    x = x + T.dropout(_attention(p, f"enc.{i}.self", y, y, key_mask, cfg, train, rng), cfg.dropout, rng, train)
    y = _ln(p, f"enc.{i}.ln2", x)
    return x + T.dropout(_ffn(p, f"enc.{i}.ffn", y, cfg, train, rng), cfg.dropout, rng, train)


def decode_states(p, cfg: ModelConfig, enc, key_mask, tgt_in: np.ndarray, train=False, rng=None):
    dt = p["tgt_embed"].data.dtype
    t = tgt_in.shape[1]
    causal = _mask(np.triu(np.full((t, t), _NEG), 1)[None, None], dt)
    x = T.dropout(_embed(p, "tgt_embed", "tgt_pos", tgt_in, cfg), cfg.dropout, rng, train)
    for i in range(cfg.layers):
        y = _ln(p, f"dec.{i}.ln1", x)
        x = x + T.dropout(_attention(p, f"dec.{i}.self", y, y, causal, cfg, train, rng), cfg.dropout, rng, train)
        y = _ln(p, f"dec.{i}.ln2", x)
        x = x + T.dropout(_attention(p, f"dec.{i}.cross", y, enc, key_mask, cfg, train, rng),
                          cfg.dropout, rng, train)
        y = _ln(p, f"dec.{i}.ln3", x)
        x = x + T.dropout(_ffn(p, f"dec.{i}.ffn", y, cfg, train, rng), cfg.dropout, rng, train)
    return _ln(p, "dec.ln", x)


def output_logits(p, cfg: ModelConfig, states: Tensor) -> Tensor:
    w = p["tgt_embed"] if cfg.tie_target_embeddings else p["out_proj"]
    return states @ T.transpose(w, (1, 0))


def teacher_logits(p, cfg: ModelConfig, src: np.ndarray, tgt_in: np.ndarray, train=False, rng=None) -> Tensor:
    enc, key_mask = encode_source(p, cfg, src, train, rng)
    return output_logits(p, cfg, decode_states(p, cfg, enc, key_mask, tgt_in, train, rng))


def forward_teacher(ckpt: ModelCheckpoint, src_ids: Sequence[int], tgt_ids: Sequence[int], tau: float = 1.0,
                    train_mode: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-position distributions [len(tgt_ids), |V_target|] under teacher forcing."""
    inp, _, _ = target_batch([list(tgt_ids)])
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    with T.no_grad():
        logits = teacher_logits(ckpt.tensors(), ckpt.config, source_batch([src_ids]), inp, train_mode, rng)
        return T.softmax_t(logits, tau).data[0]


# ---------------------------------------------------------------- decoding


class _StepScorer:
    """Runs the encoder once, then the decoder on growing prefixes."""

    def __init__(self, ckpt: ModelCheckpoint, srcs: Sequence[Sequence[int]], repeat: int = 1):
        self.p = ckpt.tensors()
        self.cfg = ckpt.config
        src = source_batch(srcs)
        with T.no_grad():
            enc, mask = encode_source(self.p, self.cfg, src)
        if repeat > 1:
            enc = Tensor(np.repeat(enc.data, repeat, axis=0), dtype=enc.data.dtype)
            mask = Tensor(np.repeat(mask.data, repeat, axis=0), dtype=mask.data.dtype)
        self.enc, self.mask = enc, mask

    def log_probs(self, prefix: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        enc, mask = self.enc, self.mask
        if rows is not None:
            enc = Tensor(enc.data[rows], dtype=enc.data.dtype)
            mask = Tensor(mask.data[rows], dtype=mask.data.dtype)
        with T.no_grad():
            h = decode_states(self.p, self.cfg, enc, mask, prefix)
            last = Tensor(h.data[:, -1:, :], dtype=h.data.dtype)
            lp = T.log_softmax_t(output_logits(self.p, self.cfg, last)).data[:, 0, :].astype(np.float64)
        # pad and bos are never generated
        lp[:, PAD_ID] = -np.inf
        lp[:, BOS_ID] = -np.inf
        return lp


def _check_len(cfg, max_len):
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    return min(max_len, cfg.max_positions - 1)


def greedy_decode_batch(ckpt: ModelCheckpoint, srcs: Sequence[Sequence[int]], max_len: int,
                        return_scores: bool = False):
    """Argmax decoding; ties go to the lowest id. Output excludes eos."""
    max_len = _check_len(ckpt.config, max_len)
    n = len(srcs)
    scorer = _StepScorer(ckpt, srcs)
    prefix = np.full((n, 1), BOS_ID, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(n)]
    confs: list[list[float]] = [[] for _ in range(n)]
    for _ in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        lp = scorer.log_probs(prefix[rows], rows)
        nxt = lp.argmax(axis=1)
        col = np.full(n, PAD_ID, dtype=np.int64)
        for r, tok, row_lp in zip(rows, nxt, lp):
            if tok == EOS_ID:
                alive[r] = False
            else:
                outs[r].append(int(tok))
                confs[r].append(float(np.exp(row_lp[tok])))
                col[r] = tok
        prefix = np.concatenate([prefix, col[:, None]], axis=1)
    return (outs, confs) if return_scores else outs


def greedy_decode(ckpt: ModelCheckpoint, src_ids: Sequence[int], max_len: int) -> list[int]:
    return greedy_decode_batch(ckpt, [src_ids], max_len)[0]


def sample_decode_batch(ckpt: ModelCheckpoint, srcs: Sequence[Sequence[int]], seed: int, max_len: int):
    """Ancestral sampling from the full per-step distribution."""
    max_len = _check_len(ckpt.config, max_len)
    rng = np.random.default_rng(seed)
    n = len(srcs)
    scorer = _StepScorer(ckpt, srcs)
    prefix = np.full((n, 1), BOS_ID, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    outs: list[list[int]] = [[] for _ in range(n)]
    for _ in range(max_len):
        rows = np.flatnonzero(alive)
        if rows.size == 0:
            break
        probs = np.exp(scorer.log_probs(prefix[rows], rows))
        cdf = np.cumsum(probs, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(rows.size)
        nxt = (cdf > u[:, None]).argmax(axis=1)
        col = np.full(n, PAD_ID, dtype=np.int64)
        for r, tok in zip(rows, nxt):
            if tok == EOS_ID:
                alive[r] = False
            else:
                outs[r].append(int(tok))
                col[r] = tok
        prefix = np.concatenate([prefix, col[:, None]], axis=1)
    return outs


def sample_decode(ckpt: ModelCheckpoint, src_ids: Sequence[int], seed: int, max_len: int) -> list[int]:
    return sample_decode_batch(ckpt, [src_ids], seed, max_len)[0]


def hypothesis_score(logprob_sum: float, length: int, len_penalty: float) -> float:
    """Beam ranking score; ``length`` counts the closing eos."""
    return logprob_sum / (length ** len_penalty)


def beam_decode_batch(ckpt: ModelCheckpoint, srcs: Sequence[Sequence[int]], beam: int = 5,
                      len_penalty: float = 1.0, max_len: int = 100, return_scores: bool = False):
    """Beam search over a batch of sources.

    Candidates are ranked by cumulative log-probability with a stable sort,
    so equal scores resolve by beam rank and then by token id. An eos
    candidate is finalised only when it ranks within the top ``beam``; a
    sentence stops once ``beam`` hypotheses are finished. At ``max_len`` only
    eos may be emitted.
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    max_len = _check_len(ckpt.config, max_len)
    n, k = len(srcs), beam
    scorer = _StepScorer(ckpt, srcs, repeat=k)
    prefix = np.full((n * k, 1), BOS_ID, dtype=np.int64)
    scores = np.full((n, k), -np.inf)
    scores[:, 0] = 0.0
    finished: list[list[tuple[float, tuple[int, ...], float]]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    for step in range(max_len + 1):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        rows = (active[:, None] * k + np.arange(k)).reshape(-1)
        lp = scorer.log_probs(prefix[rows], rows).reshape(active.size, k, -1)
        v = lp.shape[-1]
        if step == max_len:
            forced = np.full_like(lp, -np.inf)
            forced[..., EOS_ID] = lp[..., EOS_ID]
            lp = forced
        cand = (scores[active][:, :, None] + lp).reshape(active.size, -1)
        new_prefix = prefix.copy()
        new_col = np.full(n * k, PAD_ID, dtype=np.int64)
        for a, s in enumerate(active):
            order = np.argsort(-cand[a], kind="stable")[: 2 * k]
            nxt: list[tuple[int, int, float]] = []
            for rank, flat in enumerate(order):
                sc = cand[a, flat]
                if not np.isfinite(sc):
                    break
                b, tok = divmod(int(flat), v)
                if tok == EOS_ID:
                    if rank < k:
                        toks = tuple(int(x) for x in prefix[s * k + b, 1:])
                        finished[s].append((hypothesis_score(sc, len(toks) + 1, len_penalty), toks, float(sc)))
                    continue
                if len(nxt) < k:
                    nxt.append((b, tok, sc))
            if len(finished[s]) >= k or not nxt:
                done[s] = True
                continue
            new_scores = np.full(k, -np.inf)
            for j, (b, tok, sc) in enumerate(nxt):
                new_prefix[s * k + j] = prefix[s * k + b]
                new_col[s * k + j] = tok
                new_scores[j] = sc
            scores[s] = new_scores
        prefix = np.concatenate([new_prefix, new_col[:, None]], axis=1)
    outs, best_scores = [], []
    for s in range(n):
        hyps = sorted(finished[s], key=lambda h: (-h[0], h[1]))
        if hyps:
            outs.append(list(hyps[0][1]))
            best_scores.append(hyps[0][0])
        else:
            outs.append([])
            best_scores.append(-np.inf)
    return (outs, best_scores) if return_scores else outs


def beam_decode(ckpt: ModelCheckpoint, src_ids: Sequence[int], beam: int = 5, len_penalty: float = 1.0,
                max_len: int = 100) -> list[int]:
    return beam_decode_batch(ckpt, [src_ids], beam, len_penalty, max_len)[0]


def sequence_logprob(ckpt: ModelCheckpoint, src_ids: Sequence[int], out_ids: Sequence[int]) -> float:
    """Sum of log-probabilities of ``out_ids`` followed by eos."""
    tgt = list(out_ids) + [EOS_ID]
    dist = forward_teacher(ckpt, src_ids, tgt)
    return float(np.log(np.maximum(dist[np.arange(len(tgt)), tgt].astype(np.float64), 1e-300)).sum())


def decode_batch(ckpt: ModelCheckpoint, srcs: Sequence[Sequence[int]], method: str = "beam", beam: int = 5,
                 len_penalty: float = 1.0, max_len: int = 100, seed: int = 0, batch_size: int = 64):
    """Dispatch to one of the decoders in fixed-size chunks; output order matches input."""
    outs: list[list[int]] = []
    for i in range(0, len(srcs), batch_size):
        chunk = srcs[i:i + batch_size]
        if method == "beam":
            outs.extend(beam_decode_batch(ckpt, chunk, beam, len_penalty, max_len))
        elif method == "greedy":
            outs.extend(greedy_decode_batch(ckpt, chunk, max_len))
        elif method == "sample":
            outs.extend(sample_decode_batch(ckpt, chunk, seed + i, max_len))
        else:
            raise ValueError(f"unknown decoding method {method!r}")
    return outs
