"""Deterministic greedy longest-match tokenizer with character offsets.

Two properties matter downstream: ids already assigned never change when the
vocabulary is expanded (so a student vocab can extend a teacher vocab), and
every token carries its exact character span (so two tokenizations of the
same text can be aligned by offsets). Whitespace is never tokenized; it lives
in the gaps between spans. Unknown single characters map to UNK but keep
their true span, which makes decode an exact inverse of encode.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import EncodingError, VocabError

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
SPECIALS = (PAD, UNK, BOS)
PAD_ID, UNK_ID, BOS_ID = 0, 1, 2

_CHUNK = re.compile(r"\S+")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(compare=False, repr=False)
    max_token_len: int = field(compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int | None:
        return self.index.get(token)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def unk_id(self) -> int:
        return UNK_ID

    @property
    def bos_id(self) -> int:
        return BOS_ID


def _make_vocab(tokens: list[str]) -> Vocab:
    index = {t: i for i, t in enumerate(tokens)}
    if len(index) != len(tokens):
        raise VocabError("duplicate token in vocab construction")
    max_len = max((len(t) for t in tokens[len(SPECIALS):]), default=1)
    return Vocab(tokens=tuple(tokens), index=index, max_token_len=max_len)


def _check_token(token: str) -> None:
    if not token:
        raise VocabError("empty-string token")
    if any(ch.isspace() for ch in token):
        raise VocabError(f"token {token!r} contains whitespace")


def build_vocab(word_list) -> Vocab:
    """Specials, then every single character occurring in word_list (sorted),
    then the words themselves in list order. Duplicate input words are errors;
    a single-character word is already covered by its character entry."""
    seen_input = set()
    for w in word_list:
        _check_token(w)
        if w in seen_input:
            raise VocabError(f"duplicate word {w!r}")
        seen_input.add(w)
    chars = sorted({ch for w in word_list for ch in w})
    tokens = list(SPECIALS) + chars
    present = set(tokens)
    for w in word_list:
        if w not in present:
            tokens.append(w)
            present.add(w)
    return _make_vocab(tokens)


def expand_vocab(vocab: Vocab, new_tokens) -> Vocab:
    """Append unseen tokens with fresh ids; existing ids are untouched, so the
    result's id assignment is a strict extension of the input's."""
    tokens = list(vocab.tokens)
    present = set(tokens)
    for t in new_tokens:
        _check_token(t)
        if t not in present:
            tokens.append(t)
            present.add(t)
    return _make_vocab(tokens)


@dataclass(frozen=True)
class Encoding:
    text: str
    ids: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.ids) != len(self.spans):
            raise EncodingError("ids/spans length mismatch")

    def __len__(self) -> int:
        return len(self.ids)

    def token_text(self, i: int) -> str:
        s, e = self.spans[i]
        return self.text[s:e]


def encode(vocab: Vocab, text: str) -> Encoding:
    """Greedy longest-match within each whitespace-delimited chunk, single
    characters (UNK if unseen) as fallback."""
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    for m in _CHUNK.finditer(text):
        start, end = m.start(), m.end()
        pos = start
        while pos < end:
            token_id = None
            limit = min(vocab.max_token_len, end - pos)
            for length in range(limit, 1, -1):
                cand = text[pos : pos + length]
                tid = vocab.index.get(cand)
                if tid is not None:
                    token_id, length_taken = tid, length
                    break
            if token_id is None:
                ch = text[pos]
                token_id = vocab.index.get(ch, UNK_ID)
                length_taken = 1
            ids.append(token_id)
            spans.append((pos, pos + length_taken))
            pos += length_taken
    return Encoding(text=text, ids=tuple(ids), spans=tuple(spans))


def decode(encoding: Encoding) -> str:
    """Reconstruct the original text from spans and inter-span gaps."""
    text = encoding.text
    out: list[str] = []
    cursor = 0
    for s, e in encoding.spans:
        if not (0 <= s < e <= len(text)):
            raise EncodingError(f"span ({s},{e}) out of bounds for text of length {len(text)}")
        if s < cursor:
            raise EncodingError(f"span ({s},{e}) overlaps or precedes previous span")
        gap = text[cursor:s]
        if gap.strip():
            raise EncodingError(f"non-whitespace gap {gap!r} before span ({s},{e})")
        out.append(gap)
        out.append(text[s:e])
        cursor = e
    out.append(text[cursor:])
    return "".join(out)


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def load_vocab(path) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if tuple(lines[: len(SPECIALS)]) != SPECIALS:
        raise VocabError(f"{path}: specials {SPECIALS} missing from the first lines")
    for t in lines[len(SPECIALS):]:
        _check_token(t)
    return _make_vocab(lines)
