"""Inference modes.

* ``ops``: CTC prefix beam search, top candidate by CTC probability.
* ``oah``: the same N-best, rescored by the decoder in one teacher-forced
  pass; the best length-normalised decoder score wins.
* ``ns``: label-synchronous beam search led by the decoder with CTC prefix
  scores interpolated at every step (not streaming).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as E
from .corpus import PAD_ID, SE_ID, UNK_ID, Utterance, Vocab
from .ctc import DEFAULT_PRUNE, CTCPrefixScorer, PrefixBeamSearch, ctc_head
from .decoder import ScoredCandidate, decode_step, score_batch
from .model import ModelParams

log = logging.getLogger(__name__)

NEG_INF = -math.inf
EXCLUDED = (PAD_ID, UNK_ID)
MODES = ("ops", "oah", "ns")


class SessionError(RuntimeError):
    pass


@dataclass
class DecodeResult:
    mode: str
    selected: tuple
    candidates: list
    timing_ms: dict = field(default_factory=lambda: {"encode": 0.0, "first_pass": 0.0, "scoring": 0.0})
    status: str = "ok"

    def to_json(self, uid: str, vocab: Vocab | None = None) -> dict:
        def text(toks):
            return vocab.text(toks) if vocab is not None else None

        return {
            "id": uid,
            "mode": self.mode,
            "candidates": [
                {"tokens": list(c.tokens), "text": text(c.tokens), "ctc_logp": c.ctc_total,
                 "oah_score": c.oah_score}
                for c in self.candidates
            ],
            "selected": list(self.selected),
            "selected_text": text(self.selected),
            "status": self.status,
            "timing_ms": dict(self.timing_ms),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DecodeResult":
        cands = [ScoredCandidate(tuple(c["tokens"]), c["ctc_logp"], c["oah_score"]) for c in d["candidates"]]
        return cls(d["mode"], tuple(d["selected"]), cands, dict(d["timing_ms"]), d.get("status", "ok"))


@dataclass
class JointDecodeConfig:
    lam: float = 0.5           # weight of the CTC prefix score
    beam: int = 10
    max_len: int | None = None  # default: number of encoder frames
    pre_beam: int | None = None  # tokens considered per hypothesis; None = all

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")


def _ms(t0):
    return (time.perf_counter() - t0) * 1e3


def _check_features(p, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != p.config.feat_dim:
        raise ValueError(f"expected (T, {p.config.feat_dim}) features, got {features.shape}")
    return features


def select_candidate(scored: Sequence[ScoredCandidate], ctc_interp: float = 0.0):
    """Index of the best candidate: highest decoder score (optionally plus
    ``ctc_interp`` * CTC log-prob), then higher CTC log-prob, then shorter,
    then lexicographically smaller."""
    def key(i):
        c = scored[i]
        s = c.oah_score + ctc_interp * c.ctc_total if ctc_interp else c.oah_score
        return (-s, -c.ctc_total, len(c.tokens), c.tokens)

    best = min(range(len(scored)), key=key)
    return best


def _rescore(p, hhat, hyps, timing, score_eos, ctc_interp):
    t0 = time.perf_counter()
    scored = score_batch(p, [h.tokens for h in hyps], hhat, [h.total for h in hyps], score_eos=score_eos)
    timing["scoring"] = _ms(t0)
    if all(c.oah_score == NEG_INF for c in scored):
        log.warning("no usable (non-empty) candidates")
        return DecodeResult("oah", (), scored, timing, status="empty")
    best = select_candidate(scored, ctc_interp)
    return DecodeResult("oah", scored[best].tokens, scored, timing)


def first_pass(p: ModelParams, features, beam: int, prune: float = DEFAULT_PRUNE):
    """Encode + CTC prefix beam search.  Returns ``(hhat, hyps, timing)``."""
    features = _check_features(p, features)
    timing = {"encode": 0.0, "first_pass": 0.0, "scoring": 0.0}
    t0 = time.perf_counter()
    enc = E.encode(p, features)
    timing["encode"] = _ms(t0)
    t0 = time.perf_counter()
    search = PrefixBeamSearch(beam, SE_ID, EXCLUDED, prune)
    if len(enc):
        search.advance(ctc_head(p, enc))
    hyps = search.hypotheses()
    timing["first_pass"] = _ms(t0)
    return enc, hyps, timing


def ops_decode(p: ModelParams, features, beam: int, prune: float = DEFAULT_PRUNE) -> DecodeResult:
    _, hyps, timing = first_pass(p, features, beam, prune)
    cands = [ScoredCandidate(h.tokens, h.total, None) for h in hyps]
    return DecodeResult("ops", hyps[0].tokens, cands, timing)


def oah_decode(p: ModelParams, features, beam: int, prune: float = DEFAULT_PRUNE,
               score_eos: bool = False, ctc_interp: float = 0.0) -> DecodeResult:
    """Pre-select ``beam`` CTC candidates, then pick the best by one-step decoder scoring."""
    enc, hyps, timing = first_pass(p, features, beam, prune)
    if len(enc) == 0:
        cands = [ScoredCandidate(h.tokens, h.total, NEG_INF) for h in hyps]
        return DecodeResult("oah", (), cands, timing, status="empty")
    return _rescore(p, enc, hyps, timing, score_eos, ctc_interp)


def _weighted_gain(lam, new, old):
    """lam * (new - old) for log prefix probabilities; a zero weight ignores
    the CTC side entirely and an unreachable prefix gains -inf."""
    if lam == 0.0:
        return 0.0
    if new == NEG_INF:
        return NEG_INF
    return lam * (new - old)


@dataclass
class _JointHyp:
    tokens: tuple
    score: float
    cache: object
    ctc_state: object


def joint_nonstreaming_decode(p: ModelParams, features, cfg: JointDecodeConfig | None = None) -> DecodeResult:
    """Decoder-led beam search; step score = lam * CTC prefix gain + (1 - lam) * decoder log-prob.

    A hypothesis ends when <S/E> is chosen; finished hypotheses are ranked by
    total score over (tokens + 1).
    """
    cfg = cfg or JointDecodeConfig()
    features = _check_features(p, features)
    timing = {"encode": 0.0, "first_pass": 0.0, "scoring": 0.0}
    t0 = time.perf_counter()
    enc = E.encode(p, features)
    timing["encode"] = _ms(t0)
    if len(enc) == 0:
        return DecodeResult("ns", (), [ScoredCandidate((), NEG_INF, NEG_INF)], timing, status="empty")
    t0 = time.perf_counter()
    lattice = ctc_head(p, enc)
    scorer = CTCPrefixScorer(lattice, SE_ID)
    V = p.config.vocab_size
    tokens = np.array([v for v in range(V) if v not in (PAD_ID, UNK_ID, SE_ID)])
    max_len = cfg.max_len if cfg.max_len is not None else len(enc)
    lam = cfg.lam

    active = [_JointHyp((), 0.0, None, scorer.initial_state())]
    finished = []  # (tokens, score, ctc_end_total)
    forced = False
    for step in range(max_len + 1):
        pool = []
        for h in active:
            logp, cache = decode_step(p, (SE_ID,) + h.tokens, enc, h.cache)
            cands = tokens
            if cfg.pre_beam is not None and cfg.pre_beam < len(tokens):
                cands = tokens[np.argsort(-logp[tokens], kind="stable")[: cfg.pre_beam]]
            end_ctc = scorer.end_score(h.ctc_state)
            s_end = h.score + _weighted_gain(lam, end_ctc, h.ctc_state.psi) + (1 - lam) * logp[SE_ID]
            pool.append((s_end, h, None, None, cache, end_ctc))
            if step == max_len:
                continue
            psi, states = scorer.extend(h.ctc_state, cands)
            for c, new_psi, st in zip(cands, psi, states):
                s = h.score + _weighted_gain(lam, new_psi, h.ctc_state.psi) + (1 - lam) * logp[c]
                pool.append((s, h, int(c), st, cache, None))
        pool.sort(key=lambda e: (-e[0], len(e[1].tokens) + (e[2] is not None), e[1].tokens, -1 if e[2] is None else e[2]))
        active = []
        for s, h, c, st, cache, end_ctc in pool[: cfg.beam]:
            if c is None:
                finished.append((h.tokens, s, end_ctc))
            else:
                active.append(_JointHyp(h.tokens + (c,), s, cache, st))
        if not active:
            break
    else:
        forced = True
    if not finished:
        forced = True
    timing["first_pass"] = _ms(t0)
    finished.sort(key=lambda f: (-f[1] / (len(f[0]) + 1), len(f[0]), f[0]))
    cands = [ScoredCandidate(toks, float(ctc), float(s / (len(toks) + 1))) for toks, s, ctc in finished]
    if not cands:
        return DecodeResult("ns", (), [], timing, status="max_len")
    return DecodeResult("ns", cands[0].tokens, cands, timing, status="max_len" if forced else "ok")


# ---------------------------------------------------------------------------
# streaming
# ---------------------------------------------------------------------------


class StreamingSession:
    """Push frames as they arrive; the first pass advances with every new
    encoder row, the decoder rescoring runs once at :meth:`finalize`."""

    def __init__(self, p: ModelParams, beam: int, prune: float = DEFAULT_PRUNE,
                 score_eos: bool = False, ctc_interp: float = 0.0):
        self.p = p
        self.state = E.stream_init(p)
        self.search = PrefixBeamSearch(beam, SE_ID, EXCLUDED, prune)
        self.rows: list[np.ndarray] = []
        self.score_eos = score_eos
        self.ctc_interp = ctc_interp
        self.timing = {"encode": 0.0, "first_pass": 0.0, "scoring": 0.0}
        self.result: DecodeResult | None = None

    def _consume(self, rows):
        if rows.shape[0] == 0:
            return
        self.rows.append(rows)
        t0 = time.perf_counter()
        self.search.advance(ctc_head(self.p, rows))
        self.timing["first_pass"] += _ms(t0)

    def push(self, frames):
        """Feed raw frames; returns the current first-pass best hypothesis."""
        if self.result is not None:
            raise SessionError("push after finalize")
        t0 = time.perf_counter()
        rows = E.encode_push(self.p, self.state, frames)
        self.timing["encode"] += _ms(t0)
        self._consume(rows)
        return self.search.best()

    def partial(self):
        return self.search.best()

    def finalize(self) -> DecodeResult:
        if self.result is not None:
            raise SessionError("session already finalized")
        t0 = time.perf_counter()
        rows = E.encode_flush(self.p, self.state)
        self.timing["encode"] += _ms(t0)
        self._consume(rows)
        hyps = self.search.hypotheses()
        if not self.rows:
            cands = [ScoredCandidate(h.tokens, h.total, NEG_INF) for h in hyps]
            self.result = DecodeResult("oah", (), cands, self.timing, status="empty")
        else:
            hhat = np.concatenate(self.rows)
            self.result = _rescore(self.p, hhat, hyps, self.timing, self.score_eos, self.ctc_interp)
        return self.result


def stream_decode(p: ModelParams, features, beam: int, chunk: int = 16, **kw) -> DecodeResult:
    """Replay an utterance through a :class:`StreamingSession` in fixed chunks."""
    features = _check_features(p, features)
    session = StreamingSession(p, beam, **kw)
    for i in range(0, features.shape[0], chunk):
        session.push(features[i:i + chunk])
    return session.finalize()


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def decode(p: ModelParams, features, mode: str, beam: int, *, prune: float = DEFAULT_PRUNE,
           score_eos: bool = False, ctc_interp: float = 0.0, lam: float = 0.5,
           streaming: bool = False) -> DecodeResult:
    if mode == "ops":
        return ops_decode(p, features, beam, prune)
    if mode == "oah":
        if streaming:
            return stream_decode(p, features, beam, prune=prune, score_eos=score_eos, ctc_interp=ctc_interp)
        return oah_decode(p, features, beam, prune, score_eos, ctc_interp)
    if mode == "ns":
        return joint_nonstreaming_decode(p, features, JointDecodeConfig(lam=lam, beam=beam))
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def real_time_factor(decode_seconds: float, audio_seconds: float) -> float:
    return decode_seconds / audio_seconds


def measure_rtf(p: ModelParams, utts: Sequence[Utterance], mode: str, beam: int, **kw):
    """Decode utterances one at a time; RTF = wall time / audio seconds (10 ms frames).

    Returns ``(rtf, results)``.
    """
    results = []
    audio = 0.0
    t0 = time.perf_counter()
    for u in utts:
        results.append(decode(p, u.features, mode, beam, **kw))
        audio += u.features.shape[0] * E.FRAME_SHIFT_MS / 1000.0
    elapsed = time.perf_counter() - t0
    return real_time_factor(elapsed, audio), results
