"""Vocabulary, utterances, synthetic corpora, file formats and error rates."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .seeding import rng_stream

PAD, UNK, SE = "<PAD>", "<UNK>", "<S/E>"
PAD_ID, UNK_ID, SE_ID = 0, 1, 2
BLANK_ID = SE_ID
SPECIALS = (PAD, UNK, SE)

FEAT_MAGIC = b"OAHF"
FEAT_VERSION = 1
_FEAT_HEADER = struct.Struct("<4sHII")


class FeatureFormatError(ValueError):
    pass


class VocabError(ValueError):
    pass


class GrammarError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


class Vocab:
    """Bijective token <-> id map; ids 0..2 are <PAD>, <UNK>, <S/E>."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != SPECIALS:
            raise VocabError(f"first three tokens must be {SPECIALS}, got {tokens[:3]}")
        seen = {}
        for i, tok in enumerate(tokens):
            if not tok or any(ch.isspace() for ch in tok):
                raise VocabError(f"line {i + 1}: token {tok!r} is empty or contains whitespace")
            if tok in seen:
                raise VocabError(f"line {i + 1}: duplicate token {tok!r} (first at line {seen[tok] + 1})")
            seen[tok] = i
        self.tokens = tokens
        self._ids = seen

    @classmethod
    def from_tokens(cls, real_tokens: Iterable[str]) -> "Vocab":
        return cls(list(SPECIALS) + list(real_tokens))

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def text(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens


def save_vocab(path, vocab: Vocab) -> None:
    Path(path).write_text("".join(t + "\n" for t in vocab.tokens), encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return Vocab(lines)


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def save_features(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ValueError("features must be a (T, D) matrix")
    T, D = feats.shape
    header = _FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, T, D)
    Path(path).write_bytes(header + np.asarray(feats, dtype="<f4").tobytes(order="C"))


def load_features(path) -> np.ndarray:
    """Read a (T, D) matrix from an OAHF file (or a CSV file) as float64."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        return rows
    buf = path.read_bytes()
    if len(buf) < _FEAT_HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header at byte {len(buf)}")
    magic, version, T, D = _FEAT_HEADER.unpack_from(buf, 0)
    if magic != FEAT_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FEAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version} at byte 4")
    need = _FEAT_HEADER.size + 4 * T * D
    if len(buf) != need:
        raise FeatureFormatError(
            f"{path}: shape {T}x{D} needs {need} bytes, file has {len(buf)} (mismatch at byte {min(len(buf), need)})")
    data = np.frombuffer(buf, dtype="<f4", offset=_FEAT_HEADER.size).reshape(T, D)
    return data.astype(np.float64)


# ---------------------------------------------------------------------------
# utterances and transcripts
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: tuple

    def __post_init__(self):
        self.transcript = tuple(int(t) for t in self.transcript)
        if any(t in (PAD_ID, UNK_ID, SE_ID) for t in self.transcript):
            raise ValueError(f"{self.id}: transcript contains a special token")
        if self.features.shape[0] == 0:
            raise ValueError(f"{self.id}: empty feature sequence")

    @property
    def seconds(self) -> float:
        return self.features.shape[0] * 0.010


@dataclass
class Corpus:
    vocab: Vocab
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return getattr(self, name)


def save_transcripts(path, utts: Sequence[Utterance], vocab: Vocab) -> None:
    lines = [f"{u.id}\t{vocab.text(u.transcript)}\n" for u in utts]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_transcripts(path, vocab: Vocab) -> list[tuple[str, tuple]]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n}: expected 'id<TAB>tokens'")
        uid, text = line.split("\t", 1)
        out.append((uid, tuple(vocab.encode(text.split()))))
    return out


def save_corpus(root, corpus: Corpus) -> None:
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    save_vocab(root / "vocab.txt", corpus.vocab)
    for name in ("train", "dev", "test"):
        utts = corpus.split(name)
        save_transcripts(root / f"{name}.txt", utts, corpus.vocab)
        for u in utts:
            save_features(root / "feats" / f"{u.id}.oahf", u.features)


def load_split(root, name: str, vocab: Vocab) -> list[Utterance]:
    root = Path(root)
    path = root / f"{name}.txt"
    if not path.exists():
        return []
    return [Utterance(uid, load_features(root / "feats" / f"{uid}.oahf"), toks)
            for uid, toks in load_transcripts(path, vocab)]


def load_corpus(root) -> Corpus:
    root = Path(root)
    vocab = load_vocab(root / "vocab.txt")
    return Corpus(vocab, *(load_split(root, n, vocab) for n in ("train", "dev", "test")))


# ---------------------------------------------------------------------------
# error rates
# ---------------------------------------------------------------------------


def edit_distance(hyp: Sequence[int], ref: Sequence[int]) -> int:
    return _kernels.edit_distance(np.asarray(hyp, dtype=np.int64), np.asarray(ref, dtype=np.int64))


def cer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    """Unit-cost Levenshtein distance over max(1, |ref|)."""
    return edit_distance(hyp, ref) / max(1, len(ref))


def corpus_cer(pairs: Iterable[tuple[Sequence[int], Sequence[int]]]) -> float:
    """Total edits over total reference length."""
    edits = total = 0
    for hyp, ref in pairs:
        edits += edit_distance(hyp, ref)
        total += len(ref)
    return edits / max(1, total)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

END = "</s>"


@dataclass
class Grammar:
    """Finite-state stochastic grammar plus an acoustic emission map.

    ``arcs[state]`` lists ``(token, next_state, weight)``; ``next_state ==
    END`` accepts.  Tokens with the same ``emission`` id sound identical.
    """

    tokens: list
    emission: dict
    arcs: dict
    start: str
    max_len: int = 40

    def validate(self) -> None:
        if not self.arcs or not self.arcs.get(self.start):
            raise GrammarError("grammar has no productions from the start state")
        todo, seen = [self.start], set()
        reaches_end = False
        while todo:
            s = todo.pop()
            if s in seen:
                continue
            seen.add(s)
            prods = self.arcs.get(s)
            if not prods:
                raise GrammarError(f"state {s!r} has no productions")
            for tok, nxt, w in prods:
                if tok not in self.emission:
                    raise GrammarError(f"token {tok!r} has no emission pattern")
                if w <= 0:
                    raise GrammarError(f"non-positive weight on {s!r} -> {tok!r}")
                if nxt == END:
                    reaches_end = True
                else:
                    todo.append(nxt)
        if not reaches_end:
            raise GrammarError("grammar never terminates")

    def sample(self, rng: np.random.Generator) -> list:
        out, state = [], self.start
        while state != END:
            prods = self.arcs[state]
            w = np.array([p[2] for p in prods], dtype=np.float64)
            tok, state, _ = prods[rng.choice(len(prods), p=w / w.sum())]
            out.append(tok)
            if len(out) > self.max_len:
                raise GrammarError("sampled sentence exceeds max_len")
        return out

    @property
    def num_patterns(self) -> int:
        return max(self.emission.values()) + 1


def toy_grammar(homophones: bool = True, prior: float = 0.6) -> Grammar:
    """27-token grammar whose homophones can only be resolved from context.

    * ``q``/``Q`` open the sentence and sound alike; the sentence-final token
      (``f*`` after ``q``, ``g*`` after ``Q``) reveals which one it was.  The
      cue sits several tokens later, beyond a short lookahead.
    * ``m``/``M`` sound alike and are followed by ``a*`` / ``b*``.
    * ``n``/``N`` sound alike and are followed by a filler, then ``a*`` / ``b*``.

    With ``homophones=False`` every token gets its own pattern.
    """
    fillers = [f"w{i}" for i in range(1, 10)]
    fa, fb = ["f1", "f2", "f3"], ["g1", "g2", "g3"]
    ga, gb = ["a1", "a2", "a3"], ["b1", "b2", "b3"]
    tokens = ["q", "Q", "m", "M", "n", "N"] + fa + fb + ga + gb + fillers
    emission, k = {}, 0
    for tok in tokens:
        twin = {"Q": "q", "M": "m", "N": "n"}.get(tok)
        if homophones and twin is not None:
            emission[tok] = emission[twin]
        else:
            emission[tok] = k
            k += 1

    arcs = {"S": [("q", "P0_0", prior), ("Q", "P1_0", 1.0 - prior)]}
    for topic, finals in ((0, fa), (1, fb)):
        for j in range(5):
            here = f"P{topic}_{j}"
            prods = []
            if j >= 2:
                stop = 1.0 if j == 4 else 0.35
                prods += [(f, END, stop / len(finals)) for f in finals]
            if j < 4:
                go = 1.0 if j < 2 else 0.65
                nxt = f"P{topic}_{j + 1}"
                prods += [(w, nxt, go * 0.4 / len(fillers)) for w in fillers]
                prods += [("m", f"A{topic}_{j + 1}", go * 0.15), ("M", f"B{topic}_{j + 1}", go * 0.15),
                          ("n", f"NA{topic}_{j + 1}", go * 0.15), ("N", f"NB{topic}_{j + 1}", go * 0.15)]
                arcs[f"A{topic}_{j + 1}"] = [(a, nxt, 1.0) for a in ga]
                arcs[f"B{topic}_{j + 1}"] = [(b, nxt, 1.0) for b in gb]
                arcs[f"NA{topic}_{j + 1}"] = [(w, f"A{topic}_{j + 1}", 1.0) for w in fillers]
                arcs[f"NB{topic}_{j + 1}"] = [(w, f"B{topic}_{j + 1}", 1.0) for w in fillers]
            arcs[here] = prods
    g = Grammar(tokens, emission, arcs, "S")
    g.validate()
    return g


def make_patterns(grammar: Grammar, feat_dim: int, seed: int, segments: int = 3) -> np.ndarray:
    """Per-pattern (segments, feat_dim) acoustic templates."""
    rng = rng_stream(seed, "patterns")
    return rng.normal(0.0, 1.0, size=(grammar.num_patterns, segments, feat_dim))


def render(tokens: Sequence[str], grammar: Grammar, patterns: np.ndarray, noise: float,
           rng: np.random.Generator, min_dur: int = 2, max_dur: int = 6, sil: tuple = (1, 2)) -> np.ndarray:
    """Feature frames for a token string: each token lasts 2..6 encoder frames
    (x4 raw frames), with short silences at both ends."""
    segs, D = patterns.shape[1], patterns.shape[2]
    pieces = [np.zeros((4 * int(rng.integers(sil[0], sil[1] + 1)), D))]
    for tok in tokens:
        n = 4 * int(rng.integers(min_dur, max_dur + 1))
        idx = (np.arange(n) * segs) // n
        pieces.append(patterns[grammar.emission[tok]][idx])
    pieces.append(np.zeros((4 * int(rng.integers(sil[0], sil[1] + 1)), D)))
    feats = np.concatenate(pieces)
    feats = feats + noise * rng.normal(size=feats.shape)
    # round through float32 so in-memory and on-disk corpora agree exactly
    return feats.astype(np.float32).astype(np.float64)


def gen_synthetic(grammar: Grammar, size: int, noise: float, seed: int, split: str = "train",
                  feat_dim: int = 40, vocab: Vocab | None = None) -> list[Utterance]:
    """``size`` utterances sampled from ``grammar`` and rendered with Gaussian noise."""
    if noise < 0:
        raise ValueError("noise must be >= 0")
    grammar.validate()
    vocab = vocab or Vocab.from_tokens(grammar.tokens)
    patterns = make_patterns(grammar, feat_dim, seed)
    rng = rng_stream(seed, f"split:{split}")
    utts = []
    for i in range(size):
        toks = grammar.sample(rng)
        feats = render(toks, grammar, patterns, noise, rng)
        utts.append(Utterance(f"{split}-{i:05d}", feats, vocab.encode(toks)))
    return utts


def make_corpus(grammar: Grammar | None = None, sizes=None, noise: float = 1.0, seed: int = 0,
                feat_dim: int = 40) -> Corpus:
    """Train/dev/test corpus; each split draws from its own seed stream."""
    grammar = grammar or toy_grammar()
    sizes = {"train": 2000, "dev": 200, "test": 300, **(sizes or {})}
    vocab = Vocab.from_tokens(grammar.tokens)
    splits = {name: gen_synthetic(grammar, sizes[name], noise, seed, name, feat_dim, vocab)
              for name in ("train", "dev", "test")}
    return Corpus(vocab, **splits)
