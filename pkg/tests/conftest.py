"""Shared fixtures and independent oracles used across the suite."""

from __future__ import annotations

import random

import numpy as np
import pytest
import torch

from hanjabridge.augment import AugmentConfig, AugmentedSequence, augment
from hanjabridge.lexicon import HanjaCandidate, Lexicon, make_entry, make_lexicon
from hanjabridge.tokenizer import Vocab, build_vocab, encode, expand_vocab

torch.set_num_threads(2)

# pseudo-word pools for mask/round-trip fuzzing: plain words plus lexicon
# surfaces with 2, 3, 5, and 8 candidates
PLAIN_WORDS = ["나무", "하늘", "바다", "구름", "돌밭", "별빛", "강물", "들판"]
SURFACE_SIZES = {"의사": 8, "수도": 5, "조사": 3, "가격": 2}
HANJA_POOL = [
    "醫師", "意思", "義士", "議事", "毉絲", "衣絲", "以死", "二四",
    "首都", "水道", "修道", "受渡", "囚徒",
    "調査", "助詞", "弔辭",
    "價格", "加擊",
]


def build_fuzz_lexicon() -> Lexicon:
    pool = iter(HANJA_POOL)
    entries = []
    for surface, size in SURFACE_SIZES.items():
        cands = [HanjaCandidate(next(pool), weight=float(size - i)) for i in range(size)]
        entries.append(make_entry(surface, cands))
    return make_lexicon(entries)


def build_fuzz_vocab(lexicon: Lexicon) -> Vocab:
    words = sorted(PLAIN_WORDS + list(SURFACE_SIZES))
    hanja = lexicon.hanja_tokens()
    chars = sorted({ch for h in hanja for ch in h})
    return expand_vocab(build_vocab(words), hanja + chars)


@pytest.fixture(scope="session")
def fuzz_lexicon() -> Lexicon:
    return build_fuzz_lexicon()


@pytest.fixture(scope="session")
def fuzz_vocab(fuzz_lexicon) -> Vocab:
    return build_fuzz_vocab(fuzz_lexicon)


def random_sentence(rng: random.Random, n_words: int, n_surfaces: int) -> str:
    words = [rng.choice(PLAIN_WORDS) for _ in range(n_words)]
    positions = rng.sample(range(n_words), min(n_surfaces, n_words))
    surfaces = list(SURFACE_SIZES)
    for p in positions:
        words[p] = rng.choice(surfaces)
    return " ".join(words)


def random_augmented(
    rng: random.Random,
    lexicon: Lexicon,
    vocab: Vocab,
    max_words: int = 6,
    max_groups: int = 4,
    max_k: int = 8,
    per_character: bool | None = None,
) -> AugmentedSequence:
    n_words = rng.randint(1, max_words)
    n_surf = rng.randint(0, min(max_groups, n_words))
    text = random_sentence(rng, n_words, n_surf)
    per_char = rng.random() < 0.3 if per_character is None else per_character
    cfg = AugmentConfig(k=rng.randint(0, max_k), per_character_tokens=per_char)
    return augment(encode(vocab, text), lexicon, vocab, cfg)


def mask_rule_oracle(aug: AugmentedSequence, candidate_context: str = "prefix") -> np.ndarray:
    """Brute-force enumeration of the mask rules, pair by pair, written
    independently of the production builder."""
    L = len(aug.ids)
    originals = set(aug.original_positions)
    group_of: dict[int, object] = {}
    for g in aug.groups:
        for p in g.positions():
            group_of[p] = g
    allowed = np.zeros((L, L), dtype=bool)
    for i in range(L):
        for j in range(L):
            rule_d = i == j
            rule_a = i in originals and j in originals and j <= i
            rule_b = False
            if i in group_of and j in originals:
                anchor = group_of[i].anchor_index
                rule_b = (j <= anchor) if candidate_context == "prefix" else (j == anchor)
            rule_c = i in originals and j in group_of and group_of[j].anchor_index == i
            allowed[i, j] = rule_a or rule_b or rule_c or rule_d
    return allowed
