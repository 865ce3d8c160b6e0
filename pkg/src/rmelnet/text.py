"""Representation mixing over pre-phonemized transcripts.

Each word is rendered either as its characters or as its phonemes, chosen
independently per word. Words are separated by a single shared boundary
token. Characters and phonemes live in disjoint id ranges of one vocabulary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
BOUNDARY_ID = 1
BOUNDARY = "<b>"

CHAR, PHONE, BOUND = "char", "phone", "boundary"

# lowercase ARPAbet without stress markers
DEFAULT_PHONES = (
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey",
    "f", "g", "hh", "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p",
    "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
)
DEFAULT_CHARS = tuple("abcdefghijklmnopqrstuvwxyz'.,?!-;:\"")


@dataclass
class Word:
    chars: str
    phones: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.chars:
            raise ValueError("word has an empty chars field")


@dataclass
class Utterance:
    id: str
    words: list[Word]

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        return cls(obj["id"], [Word(w["chars"], list(w.get("phones", []))) for w in obj["words"]])

    def to_json(self) -> dict:
        return {"id": self.id, "words": [{"chars": w.chars, "phones": list(w.phones)} for w in self.words]}


def load_transcripts(path) -> list[Utterance]:
    utts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            utts.append(Utterance.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed transcript ({exc})") from exc
    return utts


def save_transcripts(path, utts: Iterable[Utterance]) -> None:
    Path(path).write_text("".join(json.dumps(u.to_json()) + "\n" for u in utts))


@dataclass
class SymbolSequence:
    tokens: list[str]
    kinds: list[str]
    source_mask: list[str]  # per word: CHAR or PHONE

    def __post_init__(self):
        if len(self.tokens) != len(self.kinds):
            raise ValueError("tokens and kinds differ in length")

    def __len__(self):
        return len(self.tokens)


class Vocabulary:
    """Dense ids: 0 pad, 1 boundary, then characters, then phonemes."""

    def __init__(self, char_symbols: Sequence[str], phone_symbols: Sequence[str]):
        if len(set(char_symbols)) != len(char_symbols) or len(set(phone_symbols)) != len(phone_symbols):
            raise ValueError("duplicate symbols in vocabulary")
        self.char_symbols = tuple(char_symbols)
        self.phone_symbols = tuple(phone_symbols)
        self._char_ids = {s: 2 + i for i, s in enumerate(self.char_symbols)}
        offset = 2 + len(self.char_symbols)
        self._phone_ids = {s: offset + i for i, s in enumerate(self.phone_symbols)}
        self._by_id = {PAD_ID: ("<pad>", "pad"), BOUNDARY_ID: (BOUNDARY, BOUND)}
        self._by_id.update({i: (s, CHAR) for s, i in self._char_ids.items()})
        self._by_id.update({i: (s, PHONE) for s, i in self._phone_ids.items()})

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(DEFAULT_CHARS, DEFAULT_PHONES)

    @classmethod
    def from_utterances(cls, utts: Iterable[Utterance]) -> "Vocabulary":
        chars, phones = set(DEFAULT_CHARS), set(DEFAULT_PHONES)
        for u in utts:
            for w in u.words:
                chars.update(w.chars)
                phones.update(w.phones)
        extra_c = sorted(chars - set(DEFAULT_CHARS))
        extra_p = sorted(phones - set(DEFAULT_PHONES))
        return cls(DEFAULT_CHARS + tuple(extra_c), DEFAULT_PHONES + tuple(extra_p))

    def __len__(self):
        return 2 + len(self.char_symbols) + len(self.phone_symbols)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.char_symbols == other.char_symbols
                and self.phone_symbols == other.phone_symbols)

    def has(self, symbol: str, kind: str) -> bool:
        return symbol in (self._char_ids if kind == CHAR else self._phone_ids)

    def id_of(self, symbol: str, kind: str) -> int:
        if kind == BOUND:
            return BOUNDARY_ID
        table = self._char_ids if kind == CHAR else self._phone_ids
        try:
            return table[symbol]
        except KeyError:
            raise KeyError(f"{kind} symbol {symbol!r} not in vocabulary") from None

    def symbol_of(self, idx: int) -> tuple[str, str]:
        return self._by_id[idx]

    def to_json(self) -> dict:
        return {"pad": PAD_ID, "boundary": BOUNDARY_ID,
                "chars": {s: self._char_ids[s] for s in self.char_symbols},
                "phones": {s: self._phone_ids[s] for s in self.phone_symbols}}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        chars = sorted(obj["chars"], key=obj["chars"].get)
        phones = sorted(obj["phones"], key=obj["phones"].get)
        vocab = cls(chars, phones)
        if vocab.to_json() != obj:
            raise ValueError("vocabulary ids are not dense in the expected layout")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def mix(utt: Utterance, p_swap: float, rng: np.random.Generator,
        vocab: Vocabulary | None = None) -> SymbolSequence:
    """Render each word as phonemes with probability ``p_swap``, else characters.

    One uniform draw is consumed per word whether or not the word has
    phonemes, so the stream stays aligned across transcripts.
    """
    if not 0.0 <= p_swap <= 1.0:
        raise ValueError(f"p_swap must be in [0, 1], got {p_swap}")
    tokens, kinds, chosen = [], [], []
    for i, word in enumerate(utt.words):
        draw = rng.random()
        use_phones = bool(word.phones) and draw < p_swap
        if i:
            tokens.append(BOUNDARY)
            kinds.append(BOUND)
        kind = PHONE if use_phones else CHAR
        symbols = list(word.phones) if use_phones else list(word.chars)
        if vocab is not None:
            for s in symbols:
                if not vocab.has(s, kind):
                    raise KeyError(f"unknown {kind} symbol {s!r} in word {word.chars!r}")
        tokens.extend(symbols)
        kinds.extend([kind] * len(symbols))
        chosen.append(kind)
    return SymbolSequence(tokens, kinds, chosen)


def encode(seq: SymbolSequence, vocab: Vocabulary) -> np.ndarray:
    return np.array([vocab.id_of(t, k) for t, k in zip(seq.tokens, seq.kinds)], dtype=np.int64)


def decode(ids: Iterable[int], vocab: Vocabulary) -> SymbolSequence:
    tokens, kinds = [], []
    for i in ids:
        s, k = vocab.symbol_of(int(i))
        tokens.append(s)
        kinds.append(k)
    return SymbolSequence(tokens, kinds, [])


def split_phones(word: str, phone_set: Iterable[str] = DEFAULT_PHONES) -> list[str]:
    """Greedy longest-match split of a concatenated phoneme string ('dhehr' -> dh eh r).

    A '-' separated form ('dh-eh-r') is split on the dashes instead.
    """
    phone_set = set(phone_set)
    if "-" in word:
        parts = [p for p in word.split("-") if p]
        bad = [p for p in parts if p not in phone_set]
        if bad:
            raise KeyError(f"unknown phone symbol {bad[0]!r} in word {word!r}")
        return parts
    longest = max(map(len, phone_set))
    out, i = [], 0
    while i < len(word):
        for n in range(min(longest, len(word) - i), 0, -1):
            if word[i:i + n] in phone_set:
                out.append(word[i:i + n])
                i += n
                break
        else:
            raise KeyError(f"cannot split phone string {word!r} at {word[i:]!r}")
    return out


def utterance_from_text(text: str, phones: str | None = None, utt_id: str = "cli") -> Utterance:
    """Build an utterance from plain text, optionally with a word-aligned phonemization."""
    words = text.lower().split()
    if not words:
        raise ValueError("empty text")
    if phones is None:
        return Utterance(utt_id, [Word(w) for w in words])
    ph_words = phones.split()
    if len(ph_words) != len(words):
        raise ValueError(f"text has {len(words)} words but phones has {len(ph_words)}")
    return Utterance(utt_id, [Word(w, split_phones(p)) for w, p in zip(words, ph_words)])
