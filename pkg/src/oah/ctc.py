"""CTC head, loss, collapse map, prefix beam search and prefix scoring.

All probability arithmetic is in log space.  The blank symbol is passed in
explicitly; in the full model it is the ``<S/E>`` id.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from . import kernel as K
from .kernel import Tensor
from .layers import linear
from .model import ModelParams

NEG_INF = -math.inf
DEFAULT_PRUNE = 1e-4


def _lae(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


# ---------------------------------------------------------------------------
# head and loss
# ---------------------------------------------------------------------------


def ctc_head(p: ModelParams, hhat) -> Tensor | np.ndarray:
    """Per-frame log-posteriors.  EncodedStates / ndarray in -> (U, V) ndarray out."""
    if isinstance(hhat, Tensor):
        return K.log_softmax(linear(hhat, p, "ctc"))
    states = getattr(hhat, "states", hhat)
    return K.log_softmax(linear(K.as_tensor(states), p, "ctc")).data


def ctc_loss(lattice, target: Sequence[int], blank: int) -> float:
    """-log P(target | lattice); +inf when the target cannot fit."""
    loss, _ = _kernels.ctc_forward_backward(lattice, target, blank)
    return loss


def ctc_loss_batch(logp: Tensor, targets: Sequence[Sequence[int]], lengths, blank: int) -> Tensor:
    """Differentiable per-utterance CTC losses for a padded (B, U, V) batch."""
    B, U, V = logp.shape
    losses = np.zeros(B)
    grads = np.zeros((B, U, V))
    for b in range(B):
        n = int(lengths[b])
        losses[b], grads[b, :n] = _kernels.ctc_forward_backward(logp.data[b, :n], targets[b], blank)
    out = Tensor(losses)
    return K.record(out, (logp,), lambda g, need: (grads * g[:, None, None],))


def collapse(alignment: Iterable[int], blank: int) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    out, prev = [], None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def greedy_decode(lattice, blank: int) -> list[int]:
    return collapse(np.argmax(lattice, axis=1), blank)


# ---------------------------------------------------------------------------
# prefix beam search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    logp_blank: float
    logp_nonblank: float

    @property
    def total(self) -> float:
        return _lae(self.logp_blank, self.logp_nonblank)

    def sort_key(self):
        return (-self.total, len(self.tokens), self.tokens)


class PrefixBeamSearch:
    """Frame-synchronous prefix beam search that can be advanced incrementally."""

    def __init__(self, beam: int, blank: int, exclude: Iterable[int] = (), prune: float = DEFAULT_PRUNE):
        if beam < 1:
            raise ValueError("beam width must be >= 1")
        self.beam = beam
        self.blank = blank
        self.exclude = frozenset(exclude) | {blank}
        self.log_prune = math.log(prune) if prune > 0 else NEG_INF
        self.beams: dict[tuple, list] = {(): [0.0, NEG_INF]}
        self.frames = 0

    def _candidates(self, row):
        idx = np.nonzero(row >= self.log_prune)[0] if self.log_prune > NEG_INF else range(row.shape[0])
        return [int(c) for c in idx if int(c) not in self.exclude]

    def advance(self, lattice_rows) -> None:
        rows = np.atleast_2d(np.asarray(lattice_rows, dtype=np.float64))
        for row in rows:
            self._step(row)

    def _step(self, row):
        cands = self._candidates(row)
        lb = float(row[self.blank])
        nxt: dict[tuple, list] = {}
        for prefix, (pb, pnb) in self.beams.items():
            tot = _lae(pb, pnb)
            e = nxt.get(prefix)
            if e is None:
                e = nxt[prefix] = [NEG_INF, NEG_INF]
            e[0] = _lae(e[0], tot + lb)
            last = prefix[-1] if prefix else None
            if last is not None and pnb > NEG_INF:
                e[1] = _lae(e[1], pnb + float(row[last]))
            for c in cands:
                lp = float(row[c])
                ext = prefix + (c,)
                e2 = nxt.get(ext)
                if e2 is None:
                    e2 = nxt[ext] = [NEG_INF, NEG_INF]
                e2[1] = _lae(e2[1], (pb if c == last else tot) + lp)
        live = {k: v for k, v in nxt.items() if v[0] > NEG_INF or v[1] > NEG_INF}
        nxt = live or nxt
        if len(nxt) > self.beam:
            keep = heapq.nsmallest(self.beam, nxt.items(),
                                   key=lambda kv: (-_lae(kv[1][0], kv[1][1]), len(kv[0]), kv[0]))
            nxt = dict(keep)
        self.beams = nxt
        self.frames += 1

    def hypotheses(self) -> list[Hypothesis]:
        hyps = [Hypothesis(k, v[0], v[1]) for k, v in self.beams.items()]
        hyps.sort(key=Hypothesis.sort_key)
        return hyps[: self.beam]

    def best(self) -> Hypothesis:
        return self.hypotheses()[0]


def prefix_beam_search(lattice, beam: int, blank: int, exclude: Iterable[int] = (),
                       prune: float = DEFAULT_PRUNE) -> list[Hypothesis]:
    """N-best blank-free prefixes of a (U, V) log-posterior lattice, best first."""
    search = PrefixBeamSearch(beam, blank, exclude, prune)
    search.advance(lattice)
    return search.hypotheses()


# ---------------------------------------------------------------------------
# prefix scoring for label-synchronous decoding
# ---------------------------------------------------------------------------


@dataclass
class PrefixState:
    r: np.ndarray   # (U, 2) log mass ending at t in non-blank / blank state
    psi: float      # log prefix probability
    last: int
    empty: bool


class CTCPrefixScorer:
    """CTC prefix probabilities psi(g) = P(output starts with g) for one lattice."""

    def __init__(self, lattice, blank: int):
        self.lattice = np.ascontiguousarray(lattice, dtype=np.float64)
        self.blank = blank
        self.U = self.lattice.shape[0]

    def initial_state(self) -> PrefixState:
        r = np.full((self.U, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.lattice[:, self.blank])
        return PrefixState(r, 0.0, -1, True)

    def extend(self, state: PrefixState, cands: Sequence[int]):
        """Returns ``(psi, states)`` for ``g + c`` over every candidate c."""
        cands = np.asarray(cands, dtype=np.int64)
        if self.U == 0:
            psi = np.full(len(cands), NEG_INF)
            return psi, [PrefixState(state.r, NEG_INF, int(c), False) for c in cands]
        psi, r_new = _kernels.ctc_prefix_extend(self.lattice, state.r, state.last, cands,
                                                self.blank, state.empty)
        return psi, [PrefixState(r_new[k], float(psi[k]), int(c), False) for k, c in enumerate(cands)]

    def end_score(self, state: PrefixState) -> float:
        """log P(output == g exactly)."""
        if self.U == 0:
            return 0.0 if state.empty else NEG_INF
        return _lae(float(state.r[-1, 0]), float(state.r[-1, 1]))


def ctc_prefix_score(lattice, prefix: Sequence[int], token: int, blank: int) -> float:
    """log P(output starts with ``prefix + [token]``)."""
    if token == blank:
        raise ValueError("token must not be the blank")
    scorer = CTCPrefixScorer(lattice, blank)
    state = scorer.initial_state()
    for g in prefix:
        _, (state,) = scorer.extend(state, [g])
    psi, _ = scorer.extend(state, [token])
    return float(psi[0])
