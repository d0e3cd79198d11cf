"""Synthetic homophone language with gold sense labels.

Every sentence embeds exactly one homophone surface plus a cue word that
uniquely determines the gold sense (cue words are disjoint across senses),
followed by a sense-specific marker word, so the label is recoverable from
plain co-occurrence counts. Pseudo-Hangul words are 2-character strings over
a Hangul-syllable alphabet; pseudo-Hanja spellings are 2-character strings
over a CJK alphabet.

Training sentences come in two index-parallel forms: the plain form, and an
inline form with the gold spelling written directly after the homophone
("가격價格"-style), the way disambiguating Hanja appears in real mixed-script
text. Evaluation sentences and probe contexts are always the plain form, so
nothing leaks the answer at test time. A separate plain generator produces a
second, structurally regular language over a disjoint Latin alphabet, used
as the teacher's home domain when measuring drift.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, LexiconFormatError
from .lexicon import HanjaCandidate, Lexicon, make_entry, make_lexicon
from .probe import ProbeItem

DEFAULT_HANGUL = (
    "가나다라마바사아자차카타파하거너더러머버서어저처커터퍼허"
    "고노도로모보소오조초코토포호구누두루무부수우주추쿠투푸후"
    "그느드르므브스으즈츠크트프흐기니디리미비시이지치키티피히"
)
DEFAULT_HANJA = (
    "天地人日月火水木金土山川田石竹馬車門雨花雪風江海島橋城市"
    "國王民軍學校書言語文字心手足目耳口鼻色光音聲形力氣命運道"
)


@dataclass(frozen=True)
class SynthConfig:
    n_homophones: int = 8
    senses_per_homophone: int = 2
    n_cue_words_per_sense: int = 3
    n_sentences: int = 5000
    seed: int = 0
    hangul_alphabet: str = DEFAULT_HANGUL
    hanja_alphabet: str = DEFAULT_HANJA
    n_filler_words: int = 12
    eval_fraction: float = 0.2
    # "high-resource Chinese" analog: sentences that use each spelling with
    # its sense's continuation words, so spellings carry predictive meaning
    # after pretraining
    n_hanja_usage_sentences: int = 0

    def __post_init__(self):
        if not (2 <= self.senses_per_homophone <= 16):
            raise ConfigError("senses_per_homophone must be in 2..16")
        if self.n_homophones < 1 or self.n_cue_words_per_sense < 1:
            raise ConfigError("n_homophones and n_cue_words_per_sense must be >= 1")
        if not (0.0 <= self.eval_fraction < 1.0):
            raise ConfigError("eval_fraction must be in [0, 1)")


@dataclass(frozen=True)
class Annotation:
    start: int
    end: int
    surface: str
    hanja: str


@dataclass(frozen=True)
class AnnotatedSentence:
    text: str
    annotations: tuple[Annotation, ...]


@dataclass
class GeneratedData:
    lexicon: Lexicon
    train_sentences: list[str]
    eval_sentences: list[AnnotatedSentence]
    probe_items: list[ProbeItem]
    word_inventory: list[str] = field(default_factory=list)   # sorted, hanja excluded
    hanja_tokens: list[str] = field(default_factory=list)     # sorted
    # same training sentences with the gold spelling written directly after
    # the homophone ("가격價格"-style), the way disambiguating Hanja shows up
    # in real text; index-parallel with train_sentences
    train_sentences_inline: list[str] = field(default_factory=list)
    # the Chinese-analog usage corpus (pretraining only)
    hanja_usage_sentences: list[str] = field(default_factory=list)


def _word_pool(alphabet: str, word_len: int, rng: random.Random, needed: int, what: str) -> list[str]:
    chars = list(dict.fromkeys(alphabet))
    total = len(chars) ** word_len
    if total < needed:
        raise ConfigError(
            f"alphabet too small for {what}: need {needed} distinct "
            f"{word_len}-char words, alphabet supports {total}"
        )
    pool = ["".join(p) for p in itertools.product(chars, repeat=word_len)]
    rng.shuffle(pool)
    return pool


def generate(config: SynthConfig) -> GeneratedData:
    """Deterministic in config.seed. Train/eval splits are disjoint by
    sentence text; probe items are built from the eval split with the full
    sense set as options (option order shuffled per item)."""
    rng = random.Random(config.seed)
    n_h, n_s = config.n_homophones, config.senses_per_homophone
    n_words = n_h + n_s * config.n_cue_words_per_sense + n_h * n_s * 2 + config.n_filler_words
    pool = _word_pool(config.hangul_alphabet, 2, rng, n_words, "pseudo-Hangul words")
    hanja_pool = _word_pool(config.hanja_alphabet, 2, rng, n_h * n_s, "pseudo-Hanja spellings")

    take = iter(pool)
    surfaces = [next(take) for _ in range(n_h)]
    # cue words are semantic-field words shared across homophones: field s
    # words signal sense s of whichever homophone they accompany (the way
    # hospital vocabulary marks the "doctor" reading of any ambiguous word)
    cues = {s: [next(take) for _ in range(config.n_cue_words_per_sense)] for s in range(n_s)}
    # two sense-specific continuation words per (homophone, sense): resolving
    # the sense pays off over several later predictions, as it does in text
    markers = {(h, s): (next(take), next(take)) for h in range(n_h) for s in range(n_s)}
    fillers = [next(take) for _ in range(config.n_filler_words)]

    hanja_iter = iter(hanja_pool)
    spellings = {(h, s): next(hanja_iter) for h in range(n_h) for s in range(n_s)}
    entries = [
        make_entry(
            surfaces[h],
            [HanjaCandidate(spellings[(h, s)], weight=float(n_s - s)) for s in range(n_s)],
        )
        for h in range(n_h)
    ]
    lexicon = make_lexicon(entries, source=f"synthetic(seed={config.seed})")

    def render(h: int, s: int) -> tuple[str, int]:
        # fixed-length frames; the cue always precedes the homophone and the
        # sense-specific continuation always follows it
        cue = rng.choice(cues[s])
        m1, m2 = markers[(h, s)]
        template = rng.randrange(4)
        if template == 0:
            words = [rng.choice(fillers), cue, surfaces[h], m1, m2]
            h_pos = 2
        elif template == 1:
            words = [cue, surfaces[h], m1, m2, rng.choice(fillers)]
            h_pos = 1
        elif template == 2:
            words = [rng.choice(fillers), cue, surfaces[h], m1, m2, rng.choice(fillers)]
            h_pos = 2
        else:
            words = [rng.choice(fillers), rng.choice(fillers), cue, surfaces[h], m1, m2]
            h_pos = 3
        text = " ".join(words)
        start = sum(len(w) + 1 for w in words[:h_pos])
        return text, start

    sentences: list[tuple[str, int, int, int]] = []  # text, start, h, s
    seen: set[str] = set()
    attempts = 0
    while len(sentences) < config.n_sentences:
        attempts += 1
        if attempts > 200 * max(config.n_sentences, 1):
            raise ConfigError(
                f"could not generate {config.n_sentences} unique sentences; "
                "increase word counts or the alphabet"
            )
        h = rng.randrange(n_h)
        s = rng.randrange(n_s)
        text, start = render(h, s)
        if text in seen:
            continue
        seen.add(text)
        sentences.append((text, start, h, s))

    n_eval = int(round(config.n_sentences * config.eval_fraction))
    eval_rows, train_rows = sentences[:n_eval], sentences[n_eval:]

    def inline_form(text: str, start: int, h: int, s: int) -> str:
        end = start + len(surfaces[h])
        return text[:end] + spellings[(h, s)] + text[end:]

    eval_sentences = []
    probe_items = []
    for text, start, h, s in eval_rows:
        surface = surfaces[h]
        ann = Annotation(start=start, end=start + len(surface), surface=surface, hanja=spellings[(h, s)])
        eval_sentences.append(AnnotatedSentence(text=text, annotations=(ann,)))
        options = [spellings[(h, j)] for j in range(n_s)]
        rng.shuffle(options)
        probe_items.append(
            ProbeItem(context=text, surface=surface, options=tuple(options),
                      gold=options.index(spellings[(h, s)]))
        )

    usage_sentences: list[str] = []
    if config.n_hanja_usage_sentences:
        usage_rng = random.Random(config.seed ^ 0x5CA1AB1E)
        all_spellings = sorted(spellings.values())
        seen_usage: set[str] = set()
        attempts = 0
        while len(usage_sentences) < config.n_hanja_usage_sentences:
            attempts += 1
            if attempts > 200 * config.n_hanja_usage_sentences:
                raise ConfigError("could not generate enough unique hanja usage sentences")
            h = usage_rng.randrange(n_h)
            s = usage_rng.randrange(n_s)
            m1, m2 = markers[(h, s)]
            cue = usage_rng.choice(cues[s])
            other = usage_rng.choice(all_spellings)
            other2 = usage_rng.choice(all_spellings)
            frame = usage_rng.randrange(4)
            if frame == 0:
                words_u = [cue, spellings[(h, s)], m1, m2]
            elif frame == 1:
                words_u = [cue, spellings[(h, s)], m1, m2, other]
            elif frame == 2:
                words_u = [other, cue, spellings[(h, s)], m1, m2]
            else:
                words_u = [other2, cue, spellings[(h, s)], m1, m2, other]
            text = " ".join(words_u)
            if text in seen_usage:
                continue
            seen_usage.add(text)
            usage_sentences.append(text)

    words = sorted(set(surfaces) | {c for v in cues.values() for c in v} | {m for pair in markers.values() for m in pair} | set(fillers))
    return GeneratedData(
        lexicon=lexicon,
        train_sentences=[t for t, _, _, _ in train_rows],
        eval_sentences=eval_sentences,
        probe_items=probe_items,
        word_inventory=words,
        hanja_tokens=sorted(spellings.values()),
        train_sentences_inline=[inline_form(*row) for row in train_rows],
        hanja_usage_sentences=usage_sentences,
    )


def merge(a: GeneratedData, b: GeneratedData) -> GeneratedData:
    """Concatenate two generated corpora (disjoint alphabets/seeds expected;
    duplicate surfaces are an error, as in lexicon loading)."""
    entries = list(a.lexicon.entries.values()) + list(b.lexicon.entries.values())
    lexicon = make_lexicon(entries, source=f"merge({a.lexicon.source},{b.lexicon.source})")
    overlap = set(a.word_inventory) & set(b.word_inventory)
    if overlap:
        raise LexiconFormatError(f"word inventories overlap: {sorted(overlap)[:5]}")
    return GeneratedData(
        lexicon=lexicon,
        train_sentences=a.train_sentences + b.train_sentences,
        eval_sentences=a.eval_sentences + b.eval_sentences,
        probe_items=a.probe_items + b.probe_items,
        word_inventory=sorted(a.word_inventory + b.word_inventory),
        hanja_tokens=sorted(a.hanja_tokens + b.hanja_tokens),
        train_sentences_inline=a.train_sentences_inline + b.train_sentences_inline,
        hanja_usage_sentences=a.hanja_usage_sentences + b.hanja_usage_sentences,
    )


@dataclass(frozen=True)
class PlainConfig:
    """Teacher-home language: word bigrams follow a fixed successor table,
    so a trained model's next-word distribution is sharp and drift from it
    is easy to measure."""
    n_words: int = 48
    n_sentences: int = 3000
    sentence_len: int = 8
    seed: int = 1
    alphabet: str = "abcdefghijklmnopqrstuvwxyz"
    word_len: int = 3
    heldout_fraction: float = 0.15
    restart_prob: float = 0.15


@dataclass
class PlainData:
    train_sentences: list[str]
    heldout_sentences: list[str]
    words: list[str]


def generate_plain(config: PlainConfig) -> PlainData:
    rng = random.Random(config.seed)
    pool = _word_pool(config.alphabet, config.word_len, rng, config.n_words, "plain-domain words")
    words = pool[: config.n_words]
    succ = words[1:] + words[:1]
    succ_of = dict(zip(words, succ))
    sentences = []
    seen = set()
    attempts = 0
    while len(sentences) < config.n_sentences:
        attempts += 1
        if attempts > 200 * max(config.n_sentences, 1):
            raise ConfigError("could not generate enough unique plain sentences")
        tokens = [rng.choice(words)]
        for _ in range(config.sentence_len - 1):
            if rng.random() < config.restart_prob:
                tokens.append(rng.choice(words))
            else:
                tokens.append(succ_of[tokens[-1]])
        text = " ".join(tokens)
        if text in seen:
            continue
        seen.add(text)
        sentences.append(text)
    n_held = int(round(config.n_sentences * config.heldout_fraction))
    return PlainData(
        train_sentences=sentences[n_held:],
        heldout_sentences=sentences[:n_held],
        words=sorted(words),
    )


def save_sentences(sentences, path) -> None:
    Path(path).write_text("\n".join(sentences) + ("\n" if sentences else ""), encoding="utf-8")


def load_sentences(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [line for line in text.split("\n") if line]


def save_annotated(sentences, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            row = {
                "text": s.text,
                "annotations": [
                    {"start": a.start, "end": a.end, "surface": a.surface, "hanja": a.hanja}
                    for a in s.annotations
                ],
            }
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


@dataclass
class LoadReport:
    errors: list[str] = field(default_factory=list)


def load_annotated(path, lexicon: Lexicon | None = None, strict: bool = True) -> tuple[list[AnnotatedSentence], LoadReport]:
    """JSON Lines, one sentence per line. With strict=False malformed lines
    are collected into the report instead of raising."""
    out: list[AnnotatedSentence] = []
    report = LoadReport()

    def problem(lineno: int, msg: str):
        full = f"{path}:{lineno}: {msg}"
        if strict:
            raise LexiconFormatError(full)
        report.errors.append(full)

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                text = row["text"]
                anns = []
                for a in row.get("annotations", []):
                    start, end = int(a["start"]), int(a["end"])
                    if not (0 <= start < end <= len(text)):
                        raise ValueError(f"span ({start},{end}) out of bounds")
                    if text[start:end] != a["surface"]:
                        raise ValueError(f"span text {text[start:end]!r} != surface {a['surface']!r}")
                    if lexicon is not None:
                        entry = lexicon.lookup(a["surface"])
                        if entry is None or a["hanja"] not in {c.hanja for c in entry.candidates}:
                            raise ValueError(f"gold hanja {a['hanja']!r} unknown for {a['surface']!r}")
                    anns.append(Annotation(start=start, end=end, surface=a["surface"], hanja=a["hanja"]))
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                problem(lineno, str(exc))
                continue
            out.append(AnnotatedSentence(text=text, annotations=tuple(anns)))
    return out, report
