"""Transformer decoder: teacher-forced scoring, training loss and cached stepping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernel as K
from .corpus import PAD_ID, SE_ID
from .kernel import Tensor
from .layers import ffn, linear, mha, norm, project_kv, sinusoid
from .model import ModelParams

NEG_INF = -math.inf


class DecoderCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScoredCandidate:
    tokens: tuple
    ctc_total: float
    oah_score: float

    @property
    def length(self) -> int:
        return len(self.tokens)


def _embed(p: ModelParams, tokens, start=0):
    d = p.config.d_model
    x = K.embedding(p["dec.embed"], tokens) * math.sqrt(d)
    return x + sinusoid(start, x.shape[1], d)


def _src_mask(enc_lengths, U):
    if enc_lengths is None:
        return np.ones((1, 1, 1, U), dtype=bool)
    enc_lengths = np.asarray(enc_lengths)
    return (np.arange(U)[None, :] < enc_lengths[:, None])[:, None, None, :]


def decoder_forward(p: ModelParams, tokens, hhat, enc_lengths=None) -> Tensor:
    """Log-posteriors (B, L, V) for (B, L) input ids that start with ``<S/E>``.

    Row i conditions on inputs ``0..i`` and on every valid row of ``hhat``
    ((B, U, d) or (1, U, d), broadcast over the batch).
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    hhat = K.as_tensor(getattr(hhat, "states", hhat))
    if hhat.ndim == 2:
        hhat = K.reshape(hhat, (1,) + hhat.shape)
    if hhat.shape[1] == 0:
        raise ValueError("decoder needs a non-empty encoder output")
    heads = p.config.decoder.heads
    L = tokens.shape[1]
    self_mask = np.tril(np.ones((L, L), dtype=bool))
    src_mask = _src_mask(enc_lengths, hhat.shape[1])
    x = _embed(p, tokens)
    for i in range(p.config.decoder.num_blocks):
        a = norm(x, p, f"dec.{i}.ln1")
        x = x + mha(a, a, p, f"dec.{i}.self", heads, self_mask)
        x = x + mha(norm(x, p, f"dec.{i}.ln2"), hhat, p, f"dec.{i}.src", heads, src_mask)
        x = x + ffn(norm(x, p, f"dec.{i}.ln3"), p, f"dec.{i}.ffn")
    return K.log_softmax(linear(norm(x, p, "dec.ln_f"), p, "dec.out"))


def label_smoothed_ce(logp: Tensor, targets, eta: float, pad_id: int = PAD_ID) -> Tensor:
    """Mean over non-pad positions of -sum_v q(v) log p(v).

    q = (1 - eta) * onehot + eta / V' over the V' = V - 1 non-pad classes.
    """
    if not 0.0 <= eta < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    targets = np.asarray(targets, dtype=np.int64)
    V = logp.shape[-1]
    valid = targets != pad_id
    n = max(int(valid.sum()), 1)
    q = np.full(logp.shape, eta / (V - 1))
    q[..., pad_id] = 0.0
    np.put_along_axis(q, targets[..., None], (1.0 - eta) + eta / (V - 1), axis=-1)
    q[~valid] = 0.0
    q[..., pad_id] = 0.0
    contrib = np.where(q > 0, q * np.where(q > 0, logp.data, 0.0), 0.0)
    out = Tensor(-contrib.sum() / n)
    return K.record(out, (logp,), lambda g, need: (-q * (g / n),))


def teacher_forcing_batch(seqs: Sequence[Sequence[int]]):
    """(inputs, targets) padded with <PAD>: inputs = <S/E>+y, targets = y+<S/E>."""
    L = max(len(s) for s in seqs) + 1
    inp = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    tgt = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for b, s in enumerate(seqs):
        inp[b, 0] = SE_ID
        inp[b, 1:len(s) + 1] = s
        tgt[b, :len(s)] = s
        tgt[b, len(s)] = SE_ID
    return inp, tgt


# ---------------------------------------------------------------------------
# candidate scoring
# ---------------------------------------------------------------------------


def score_batch(p: ModelParams, candidates: Sequence[Sequence[int]], hhat, ctc_totals=None,
                score_eos: bool = False) -> list[ScoredCandidate]:
    """Length-normalised log-probabilities of every candidate in one padded pass.

    Empty candidates score -inf.  With ``score_eos`` the end token's log-prob
    is added and the length counts it.
    """
    candidates = [tuple(int(t) for t in c) for c in candidates]
    if not candidates:
        raise ValueError("score_batch needs at least one candidate")
    if ctc_totals is None:
        ctc_totals = [NEG_INF] * len(candidates)
    scores = [NEG_INF] * len(candidates)
    live = [i for i, c in enumerate(candidates) if c]
    if live:
        inp, tgt = teacher_forcing_batch([candidates[i] for i in live])
        logp = decoder_forward(p, inp, hhat).data
        picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        for row, i in enumerate(live):
            L = len(candidates[i])
            n = L + 1 if score_eos else L
            scores[i] = float(picked[row, :n].sum() / n)
    return [ScoredCandidate(c, float(t), s) for c, t, s in zip(candidates, ctc_totals, scores)]


def one_step_scoring(p: ModelParams, tokens: Sequence[int], hhat, score_eos: bool = False) -> float:
    """(1/L) * sum_i log p(y_i | y_<i, hhat) from a single teacher-forced pass."""
    return score_batch(p, [tokens], hhat, score_eos=score_eos)[0].oah_score


# ---------------------------------------------------------------------------
# incremental stepping
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderCache:
    tokens: tuple
    self_kv: tuple    # per block: (k, v) each (1, H, n, dk)
    src_kv: tuple     # per block: (k, v) projected encoder states


def init_cache(p: ModelParams, hhat) -> DecoderCache:
    states = getattr(hhat, "states", hhat)
    if states.shape[0] == 0:
        raise ValueError("decoder needs a non-empty encoder output")
    src = K.as_tensor(np.asarray(states)[None])
    heads = p.config.decoder.heads
    src_kv = tuple(project_kv(src, p, f"dec.{i}.src", heads) for i in range(p.config.decoder.num_blocks))
    dk = p.config.d_model // heads
    empty = np.zeros((1, heads, 0, dk))
    self_kv = tuple((K.Tensor(empty), K.Tensor(empty)) for _ in range(p.config.decoder.num_blocks))
    return DecoderCache((), self_kv, src_kv)


def _advance(p: ModelParams, cache: DecoderCache, token: int):
    heads = p.config.decoder.heads
    pos = len(cache.tokens)
    x = _embed(p, np.array([[token]]), start=pos)
    new_self = []
    for i in range(p.config.decoder.num_blocks):
        a = norm(x, p, f"dec.{i}.ln1")
        k_old, v_old = cache.self_kv[i]
        k_new, v_new = project_kv(a, p, f"dec.{i}.self", heads)
        k = K.concat([k_old, k_new], axis=2)
        v = K.concat([v_old, v_new], axis=2)
        new_self.append((k, v))
        x = x + mha(a, None, p, f"dec.{i}.self", heads, True, kv=(k, v))
        x = x + mha(norm(x, p, f"dec.{i}.ln2"), None, p, f"dec.{i}.src", heads, True, kv=cache.src_kv[i])
        x = x + ffn(norm(x, p, f"dec.{i}.ln3"), p, f"dec.{i}.ffn")
    logp = K.log_softmax(linear(norm(x, p, "dec.ln_f"), p, "dec.out")).data[0, 0]
    return logp, DecoderCache(cache.tokens + (int(token),), tuple(new_self), cache.src_kv)


def decode_step(p: ModelParams, prefix: Sequence[int], hhat, cache: DecoderCache | None = None):
    """Next-token log-posteriors after ``prefix`` (which starts with <S/E>).

    ``cache`` must cover a leading part of ``prefix``; only the missing
    tokens are processed.  Returns ``(logp, new_cache)``.
    """
    prefix = tuple(int(t) for t in prefix)
    if not prefix or prefix[0] != SE_ID:
        raise ValueError("prefix must start with <S/E>")
    if cache is None:
        cache = init_cache(p, hhat)
    n = len(cache.tokens)
    if n >= len(prefix) or prefix[:n] != cache.tokens:
        raise DecoderCacheError(f"cache covers {cache.tokens}, prefix is {prefix}")
    logp = None
    for tok in prefix[n:]:
        logp, cache = _advance(p, cache, tok)
    return logp, cache
