"""HanjaBridge input expansion and the restricted attention mask.

Expansion inserts the Hanja candidates of a homophonous Hangul token
immediately after it, forming an expansion group. Inserted positions carry
origin bit 0; everything else keeps bit 1, and dropping the 0 positions
recovers the source encoding exactly.

The mask over an expanded sequence of length L allows i -> j iff one of:

  (a) i and j are both original and j <= i     (causal over originals; later
      originals skip candidate positions entirely),
  (b) i is inside group g, j is original, and j <= anchor(g)
      (a candidate sees its anchor plus the anchor's original-token prefix;
      with candidate_context="anchor_only" only the anchor itself),
  (c) i = anchor(g) and j is inside g          (the anchor sees its own
      candidates),
  (d) i = j.

Everything else is blocked: candidates never see each other, not even within
one group, and originals after a group never see its candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AugmentError
from .lexicon import Lexicon
from .tokenizer import Encoding, Vocab

CANDIDATE_CONTEXTS = ("prefix", "anchor_only")


@dataclass(frozen=True)
class AugmentConfig:
    k: int = 8
    augment_unambiguous: bool = False
    per_character_tokens: bool = False

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")


@dataclass
class ExpansionGroup:
    anchor_index: int
    candidate_ranges: tuple[tuple[int, int], ...]
    candidates: tuple[str, ...]
    surface: str
    gold_candidate: int | None = None

    def positions(self) -> list[int]:
        return [p for s, e in self.candidate_ranges for p in range(s, e)]

    @property
    def k(self) -> int:
        return len(self.candidate_ranges)


@dataclass
class AugmentedSequence:
    ids: tuple[int, ...]
    origin_mask: tuple[int, ...]
    groups: list[ExpansionGroup]
    original_positions: tuple[int, ...]
    source: Encoding

    def __len__(self) -> int:
        return len(self.ids)


def augment(encoding: Encoding, lexicon: Lexicon, vocab: Vocab, config: AugmentConfig) -> AugmentedSequence:
    """Insert top-k lexicon candidates after each matching token. A token
    matches when its surface text equals a lexicon entry with >= 2 candidates
    (or any entry when augment_unambiguous). k = 0 is the identity."""
    ids: list[int] = []
    origin: list[int] = []
    groups: list[ExpansionGroup] = []
    for i, token_id in enumerate(encoding.ids):
        ids.append(token_id)
        origin.append(1)
        if config.k == 0:
            continue
        surface = encoding.token_text(i)
        entry = lexicon.lookup(surface)
        if entry is None:
            continue
        if len(entry.candidates) < 2 and not config.augment_unambiguous:
            continue
        anchor = len(ids) - 1
        ranges: list[tuple[int, int]] = []
        names: list[str] = []
        for cand in entry.top_k(config.k):
            if config.per_character_tokens:
                piece_ids = [vocab.id_of(ch) for ch in cand.hanja]
            else:
                piece_ids = [vocab.id_of(cand.hanja)]
            if any(pid is None for pid in piece_ids):
                raise AugmentError(
                    f"candidate {cand.hanja!r} not in vocab; expand_vocab was skipped"
                )
            start = len(ids)
            ids.extend(piece_ids)
            origin.extend([0] * len(piece_ids))
            ranges.append((start, len(ids)))
            names.append(cand.hanja)
        groups.append(
            ExpansionGroup(
                anchor_index=anchor,
                candidate_ranges=tuple(ranges),
                candidates=tuple(names),
                surface=surface,
            )
        )
    original_positions = tuple(p for p, m in enumerate(origin) if m == 1)
    return AugmentedSequence(
        ids=tuple(ids),
        origin_mask=tuple(origin),
        groups=groups,
        original_positions=original_positions,
        source=encoding,
    )


def build_attention_mask(aug: AugmentedSequence, candidate_context: str = "prefix") -> np.ndarray:
    """L x L boolean may-attend matrix implementing rules (a)-(d) above.
    With no groups this is exactly the causal lower-triangular mask."""
    if candidate_context not in CANDIDATE_CONTEXTS:
        raise ValueError(f"candidate_context must be one of {CANDIDATE_CONTEXTS}")
    L = len(aug.ids)
    origin = np.asarray(aug.origin_mask, dtype=bool)
    allowed = np.zeros((L, L), dtype=bool)
    # rule (a)
    lower = np.tril(np.ones((L, L), dtype=bool))
    allowed |= lower & origin[:, None] & origin[None, :]
    for g in aug.groups:
        members = g.positions()
        a = g.anchor_index
        if candidate_context == "prefix":
            visible = origin & (np.arange(L) <= a)  # original prefix incl. anchor
            allowed[np.ix_(members, np.flatnonzero(visible))] = True
        else:
            allowed[members, a] = True
        allowed[a, members] = True  # rule (c)
    np.fill_diagonal(allowed, True)  # rule (d)
    return allowed


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def plain_augmented(encoding: Encoding) -> AugmentedSequence:
    """Identity wrapper: every position original, no groups. Lets plain
    sequences flow through the same loss/mask machinery as expanded ones."""
    n = len(encoding.ids)
    return AugmentedSequence(
        ids=encoding.ids,
        origin_mask=(1,) * n,
        groups=[],
        original_positions=tuple(range(n)),
        source=encoding,
    )


def strip(aug: AugmentedSequence) -> Encoding:
    """Drop all inserted positions, recovering the source encoding."""
    kept = tuple(aug.ids[p] for p in aug.original_positions)
    if kept != aug.source.ids:
        raise AugmentError("original positions do not reproduce the source ids")
    return aug.source


def source_index_of_anchor(aug: AugmentedSequence, group: ExpansionGroup) -> int:
    """Index of the group's anchor token within the source encoding."""
    return aug.original_positions.index(group.anchor_index)


@dataclass
class GoldLabelReport:
    matched: list[int] = field(default_factory=list)          # group indices
    unmatched: list[tuple[tuple[int, int], str]] = field(default_factory=list)
    truncated: list[tuple[int, str]] = field(default_factory=list)  # (group idx, hanja)


def label_gold(aug: AugmentedSequence, annotations) -> tuple[AugmentedSequence, GoldLabelReport]:
    """Attach gold-candidate labels. Each annotation is (char span, hanja);
    the span must equal a group anchor's source span. A gold hanja missing
    from the group's candidates means k truncated it away: reported, not
    fatal."""
    span_to_group = {
        aug.source.spans[source_index_of_anchor(aug, g)]: gi
        for gi, g in enumerate(aug.groups)
    }
    groups = [replace(g) for g in aug.groups]
    report = GoldLabelReport()
    for span, hanja in annotations:
        gi = span_to_group.get(tuple(span))
        if gi is None:
            report.unmatched.append((tuple(span), hanja))
            continue
        g = groups[gi]
        if hanja in g.candidates:
            g.gold_candidate = g.candidates.index(hanja)
            report.matched.append(gi)
        else:
            report.truncated.append((gi, hanja))
    labeled = replace(aug, groups=groups)
    return labeled, report


def inline_surface(aug: AugmentedSequence) -> str:
    """Human-readable expanded form: candidate strings spliced in directly
    after each anchor token, e.g. the price sentence becomes
    '... 가격價格加擊을 ...'."""
    text = aug.source.text
    inserts: dict[int, str] = {}
    for g in aug.groups:
        src_i = source_index_of_anchor(aug, g)
        end = aug.source.spans[src_i][1]
        inserts[end] = inserts.get(end, "") + "".join(g.candidates)
    out = []
    for pos, ch in enumerate(text):
        out.append(ch)
        if pos + 1 in inserts:
            out.append(inserts[pos + 1])
    if 0 in inserts:  # cannot happen for non-empty spans; keep total anyway
        out.insert(0, inserts[0])
    return "".join(out)


def to_debug_dict(aug: AugmentedSequence) -> dict:
    return {
        "ids": list(aug.ids),
        "origin_mask": list(aug.origin_mask),
        "groups": [
            {
                "anchor_index": g.anchor_index,
                "surface": g.surface,
                "candidates": list(g.candidates),
                "candidate_ranges": [list(r) for r in g.candidate_ranges],
                "gold_candidate": g.gold_candidate,
            }
            for g in aug.groups
        ],
        "expanded_surface": inline_surface(aug),
    }


def to_debug_json(aug: AugmentedSequence) -> str:
    return json.dumps(to_debug_dict(aug), ensure_ascii=False, indent=2)
