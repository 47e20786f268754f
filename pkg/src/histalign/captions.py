"""Caption hierarchy: rule-based phrase parsing, distinct-subject pairing, tokenization."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import scenes as _sc

PAD, CLS, MASK = "[PAD]", "[CLS]", "[MASK]"
SPECIALS = (PAD, CLS, MASK)


class ParseError(ValueError):
    pass


class Vocab:
    """Token <-> id map plus the lexicons the parser needs."""

    def __init__(self, tokens, nouns=_sc.NOUNS, colors=_sc.COLORS, sizes=_sc.SIZES,
                 determiners=_sc.DETERMINERS, connectives=_sc.CONNECTIVES):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.ids:
                raise ValueError(f"vocabulary lacks {s}")
        self.nouns = frozenset(nouns)
        self.colors = frozenset(colors)
        self.sizes = frozenset(sizes)
        self.determiners = frozenset(determiners)
        self.connectives = frozenset(connectives)

    @classmethod
    def default(cls):
        words = (list(_sc.DETERMINERS) + list(_sc.CONNECTIVES) + list(_sc.SIZES)
                 + list(_sc.COLORS) + list(_sc.NOUNS))
        return cls(list(SPECIALS) + words)

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self):
        return self.ids[PAD]

    @property
    def cls_id(self):
        return self.ids[CLS]

    @property
    def mask_id(self):
        return self.ids[MASK]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path):
        return cls([ln for ln in Path(path).read_text().split("\n") if ln])


@dataclass(frozen=True)
class PhraseRecord:
    text: str
    subject: str
    source_caption_index: int = 0


@dataclass(frozen=True)
class DataTuple:
    scene_id: str
    c_i: PhraseRecord
    c_j: PhraseRecord
    c_ij: str

    def to_json(self):
        return {"scene_id": self.scene_id, "c_i": self.c_i.text, "s_i": self.c_i.subject,
                "c_j": self.c_j.text, "s_j": self.c_j.subject, "c_ij": self.c_ij}

    @classmethod
    def from_json(cls, d):
        return cls(d["scene_id"], PhraseRecord(d["c_i"], d["s_i"]),
                   PhraseRecord(d["c_j"], d["s_j"]), d["c_ij"])


def parse_caption(caption: str, vocab: Vocab, caption_index: int = 0) -> list[PhraseRecord]:
    """Split a caption into ``det? size? color? noun`` phrases joined by connectives."""
    words = caption.split()
    unknown = [w for w in words if not (w in vocab.nouns or w in vocab.colors or w in vocab.sizes
                                        or w in vocab.determiners or w in vocab.connectives)]
    if unknown:
        raise ParseError(f"unknown tokens in {caption!r}: {unknown}")

    out = []
    span: list[str] = []
    # slot order inside a phrase: determiner(0) < size(1) < color(2) < noun(3)
    last_slot = -1
    for w in words:
        if w in vocab.connectives:
            if span:
                raise ParseError(f"connective {w!r} interrupts phrase {' '.join(span)!r}")
            if not out:
                raise ParseError(f"caption starts with connective {w!r}")
            if last_slot == -1:
                raise ParseError(f"consecutive connectives at {w!r}")
            last_slot = -1
            continue
        slot = (0 if w in vocab.determiners else 1 if w in vocab.sizes
                else 2 if w in vocab.colors else 3)
        if slot <= last_slot:
            raise ParseError(f"unexpected {w!r} after {' '.join(span)!r}")
        if not span and out and last_slot == 3:
            raise ParseError(f"missing connective before {w!r}")
        span.append(w)
        last_slot = slot
        if slot == 3:
            out.append(PhraseRecord(" ".join(span), w, caption_index))
            span = []
    if span:
        raise ParseError(f"dangling modifiers without a noun: {' '.join(span)!r}")
    if out and last_slot == -1:
        raise ParseError(f"caption ends with a connective: {caption!r}")
    return out


def scene_phrases(captions, vocab: Vocab) -> list[PhraseRecord]:
    """All phrases of an image's captions, deduplicated by text (first occurrence wins)."""
    seen = set()
    out = []
    for k, cap in enumerate(captions):
        for rec in parse_caption(cap, vocab, k):
            if rec.text not in seen:
                seen.add(rec.text)
                out.append(rec)
    return out


def build_pairs(scene_id: str, phrases, rng_seed) -> list[DataTuple]:
    """Pair each phrase with one random phrase of a different subject."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for i, ci in enumerate(phrases):
        cands = [cj for j, cj in enumerate(phrases) if j != i and cj.subject != ci.subject]
        if not cands:
            continue
        cj = cands[int(rng.integers(0, len(cands)))]
        out.append(DataTuple(scene_id, ci, cj, _sc.compose(ci.text, cj.text)))
    return out


def scene_seed(seed: int, scene_id: str) -> list[int]:
    return [int(seed), zlib.crc32(scene_id.encode())]


def pairs_for_scenes(scenes, vocab: Vocab, seed: int = 0) -> list[DataTuple]:
    out = []
    for s in scenes:
        out.extend(build_pairs(s.scene_id, scene_phrases(s.captions, vocab), scene_seed(seed, s.scene_id)))
    return out


def write_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def read_pairs(path) -> list[DataTuple]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(DataTuple.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed pair record ({exc})") from exc
    return out


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]  # length max_tokens, [CLS] first, [PAD] filled
    K: int  # real tokens including [CLS]

    @property
    def mask(self):
        m = np.zeros(len(self.ids), dtype=bool)
        m[:self.K] = True
        return m


def tokenize(text: str, vocab: Vocab, max_tokens: int = 12) -> TokenSequence:
    words = text.split()
    oov = [w for w in words if w not in vocab.ids]
    if oov:
        raise ParseError(f"out-of-vocabulary words in {text!r}: {oov}")
    if len(words) + 1 > max_tokens:
        raise ParseError(f"{text!r} needs {len(words) + 1} tokens, max is {max_tokens}")
    ids = [vocab.cls_id] + [vocab.ids[w] for w in words]
    K = len(ids)
    ids += [vocab.pad_id] * (max_tokens - K)
    return TokenSequence(tuple(ids), K)


def stack_tokens(seqs, trim: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Token ids ``[n, L]`` and boolean real-token mask ``[n, L]``.

    With ``trim`` the trailing all-[PAD] columns are dropped (L = longest K).
    """
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    if trim:
        ids = ids[:, :max(s.K for s in seqs)]
    mask = np.zeros(ids.shape, dtype=bool)
    for i, s in enumerate(seqs):
        mask[i, :s.K] = True
    return ids, mask
