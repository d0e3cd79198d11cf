"""Hangul surface -> Hanja candidate dictionary.

File format: UTF-8 TSV, one entry per line::

    surface<TAB>hanja:weight;hanja:weight;...

Weights are optional (default 1.0). ``#`` starts a comment line. Candidate
order in memory is always weight-descending with code-point order as the
tie-break, regardless of file order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import LexiconFormatError


@dataclass(frozen=True)
class HanjaCandidate:
    hanja: str
    weight: float = 1.0
    gloss: str | None = None

    def __post_init__(self):
        if not self.hanja:
            raise LexiconFormatError("empty hanja string")
        if any(ch.isspace() for ch in self.hanja) or ";" in self.hanja or ":" in self.hanja:
            raise LexiconFormatError(f"illegal character in hanja string {self.hanja!r}")
        if self.weight < 0:
            raise LexiconFormatError(f"negative weight for {self.hanja!r}")


@dataclass(frozen=True)
class LexiconEntry:
    surface: str
    candidates: tuple[HanjaCandidate, ...]

    def __post_init__(self):
        if not self.surface:
            raise LexiconFormatError("empty surface form")
        if not self.candidates:
            raise LexiconFormatError(f"entry {self.surface!r} has no candidates")
        seen = set()
        for c in self.candidates:
            if c.hanja in seen:
                raise LexiconFormatError(f"duplicate hanja {c.hanja!r} under surface {self.surface!r}")
            seen.add(c.hanja)
        ordered = sort_candidates(self.candidates)
        if tuple(ordered) != self.candidates:
            raise LexiconFormatError(f"candidates of {self.surface!r} not in canonical order")

    def top_k(self, k: int) -> tuple[HanjaCandidate, ...]:
        """First min(k, len) candidates in canonical order. k must be >= 1."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        return self.candidates[:k]


def sort_candidates(candidates) -> list[HanjaCandidate]:
    """Canonical order: weight descending, then code-point order of the hanja string."""
    return sorted(candidates, key=lambda c: (-c.weight, c.hanja))


@dataclass(frozen=True, eq=True)
class Lexicon:
    entries: dict[str, LexiconEntry] = field(default_factory=dict)
    # provenance only; excluded from equality so file round-trips compare equal
    source: str = field(default="<memory>", compare=False)

    def lookup(self, surface: str) -> LexiconEntry | None:
        return self.entries.get(surface)

    def __len__(self) -> int:
        return len(self.entries)

    def hanja_tokens(self) -> list[str]:
        """All candidate strings, deduplicated, in sorted order."""
        return sorted({c.hanja for e in self.entries.values() for c in e.candidates})


def make_entry(surface: str, candidates) -> LexiconEntry:
    """Build an entry, normalizing candidate order."""
    return LexiconEntry(surface=surface, candidates=tuple(sort_candidates(candidates)))


def make_lexicon(entries, source: str = "<memory>") -> Lexicon:
    table: dict[str, LexiconEntry] = {}
    for e in entries:
        if e.surface in table:
            raise LexiconFormatError(f"duplicate surface {e.surface!r}")
        table[e.surface] = e
    return Lexicon(entries=table, source=source)


def _parse_candidate(text: str, path: str, lineno: int) -> HanjaCandidate:
    if ":" in text:
        hanja, _, weight_s = text.rpartition(":")
        try:
            weight = float(weight_s)
        except ValueError:
            raise LexiconFormatError(f"{path}:{lineno}: bad weight {weight_s!r}") from None
    else:
        hanja, weight = text, 1.0
    if not hanja:
        raise LexiconFormatError(f"{path}:{lineno}: empty hanja string")
    if weight < 0:
        raise LexiconFormatError(f"{path}:{lineno}: negative weight for {hanja!r}")
    return HanjaCandidate(hanja=hanja, weight=weight)


def load_lexicon(path) -> Lexicon:
    """Parse a lexicon TSV. Duplicate surfaces or duplicate hanja are hard errors."""
    path = Path(path)
    table: dict[str, LexiconEntry] = {}
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise LexiconFormatError(f"{path}:{lineno}: expected TAB-separated surface and candidates")
            surface, _, rest = line.partition("\t")
            surface = surface.strip()
            if not surface:
                raise LexiconFormatError(f"{path}:{lineno}: empty surface")
            if surface in table:
                raise LexiconFormatError(f"{path}:{lineno}: duplicate surface {surface!r}")
            parts = [p.strip() for p in rest.strip().split(";") if p.strip()]
            if not parts:
                raise LexiconFormatError(f"{path}:{lineno}: no candidates for {surface!r}")
            cands = [_parse_candidate(p, str(path), lineno) for p in parts]
            seen = set()
            for c in cands:
                if c.hanja in seen:
                    raise LexiconFormatError(f"{path}:{lineno}: duplicate hanja {c.hanja!r} for {surface!r}")
                seen.add(c.hanja)
            table[surface] = make_entry(surface, cands)
    return Lexicon(entries=table, source=str(path))


def save_lexicon(lexicon: Lexicon, path) -> None:
    """Write the canonical TSV form (surfaces sorted, candidates in canonical order)."""
    path = Path(path)
    lines = ["# surface<TAB>hanja:weight(;hanja:weight)*"]
    for surface in sorted(lexicon.entries):
        entry = lexicon.entries[surface]
        cands = ";".join(f"{c.hanja}:{c.weight!r}" for c in entry.candidates)
        lines.append(f"{surface}\t{cands}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class HomophonyStats:
    n_entries: int
    n_homophonous: int
    ratio: float
    max_candidates: int


def homophony_stats(lexicon: Lexicon) -> HomophonyStats:
    """Share of entries with >= 2 candidates; ratio is 0 for an empty lexicon."""
    n = len(lexicon.entries)
    homo = sum(1 for e in lexicon.entries.values() if len(e.candidates) >= 2)
    max_c = max((len(e.candidates) for e in lexicon.entries.values()), default=0)
    return HomophonyStats(
        n_entries=n,
        n_homophonous=homo,
        ratio=(homo / n) if n else 0.0,
        max_candidates=max_c,
    )
