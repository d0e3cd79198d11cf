import collections

import pytest

from hanjabridge.corpus import (
    Annotation,
    AnnotatedSentence,
    PlainConfig,
    SynthConfig,
    generate,
    generate_plain,
    load_annotated,
    load_sentences,
    merge,
    save_annotated,
    save_sentences,
)
from hanjabridge.errors import ConfigError, LexiconFormatError

SMALL = SynthConfig(n_homophones=3, senses_per_homophone=2, n_cue_words_per_sense=2,
                    n_sentences=200, seed=7, n_filler_words=6)


def test_generation_is_deterministic():
    a, b = generate(SMALL), generate(SMALL)
    assert a.lexicon == b.lexicon
    assert a.train_sentences == b.train_sentences
    assert a.eval_sentences == b.eval_sentences
    assert a.probe_items == b.probe_items


def test_zero_sentences_still_yields_a_lexicon():
    data = generate(SynthConfig(n_homophones=2, senses_per_homophone=2,
                                n_cue_words_per_sense=1, n_sentences=0, seed=0))
    assert len(data.lexicon) == 2
    assert data.train_sentences == [] and data.eval_sentences == [] and data.probe_items == []


def test_train_eval_disjoint_by_sentence():
    data = generate(SMALL)
    train = set(data.train_sentences)
    eval_texts = {s.text for s in data.eval_sentences}
    assert train and eval_texts
    assert not (train & eval_texts)
    assert len({hash(t) for t in train} & {hash(t) for t in eval_texts}) == 0


def test_every_sentence_has_recoverable_gold_sense():
    """Count-based oracle: co-occurrence of context words with gold hanja
    pins the sense exactly, so prediction accuracy is 1.0."""
    data = generate(SMALL)
    word_to_hanja = collections.defaultdict(set)
    for sent in data.eval_sentences:
        gold = sent.annotations[0].hanja
        for word in sent.text.split():
            word_to_hanja[word].add(gold)
    hits = 0
    for sent in data.eval_sentences:
        ann = sent.annotations[0]
        options = {c.hanja for c in data.lexicon.lookup(ann.surface).candidates}
        cues = [word_to_hanja[w] & options for w in sent.text.split()
                if len(word_to_hanja[w] & options) == 1]
        unique = {next(iter(c)) for c in cues}
        if len(unique) == 1 and next(iter(unique)) == ann.hanja:
            hits += 1
    assert hits == len(data.eval_sentences)


def test_annotation_spans_point_at_the_surface():
    data = generate(SMALL)
    for sent in data.eval_sentences:
        ann = sent.annotations[0]
        assert sent.text[ann.start:ann.end] == ann.surface
        entry = data.lexicon.lookup(ann.surface)
        assert ann.hanja in {c.hanja for c in entry.candidates}


def test_probe_items_cover_full_sense_set():
    data = generate(SMALL)
    for item in data.probe_items:
        entry = data.lexicon.lookup(item.surface)
        assert set(item.options) == {c.hanja for c in entry.candidates}
        assert item.surface in item.context


def test_infeasible_alphabet_errors():
    with pytest.raises(ConfigError, match="alphabet"):
        generate(SynthConfig(n_homophones=50, senses_per_homophone=4,
                             n_cue_words_per_sense=5, n_sentences=10, seed=0,
                             hangul_alphabet="가나"))


def test_annotated_round_trip(tmp_path):
    data = generate(SMALL)
    path = tmp_path / "eval.jsonl"
    save_annotated(data.eval_sentences, path)
    loaded, report = load_annotated(path, lexicon=data.lexicon)
    assert loaded == data.eval_sentences
    assert not report.errors


def test_annotated_out_of_bounds_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    rows = [
        '{"text": "가 나", "annotations": [{"start": 0, "end": 1, "surface": "가", "hanja": "X"}]}',
        '{"text": "가 나", "annotations": [{"start": 0, "end": 99, "surface": "가", "hanja": "X"}]}',
    ]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    with pytest.raises(LexiconFormatError, match=r":2:"):
        load_annotated(path)


def test_annotated_lenient_mode_keeps_valid_subset(tmp_path):
    path = tmp_path / "mixed.jsonl"
    rows = [
        '{"text": "가 나", "annotations": []}',
        'not json at all',
        '{"text": "가 나", "annotations": [{"start": 3, "end": 1, "surface": "가", "hanja": "X"}]}',
    ]
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    loaded, report = load_annotated(path, strict=False)
    assert len(loaded) == 1
    assert len(report.errors) == 2
    assert any(":2:" in e for e in report.errors)


def test_sentences_round_trip(tmp_path):
    data = generate(SMALL)
    path = tmp_path / "train.txt"
    save_sentences(data.train_sentences, path)
    assert load_sentences(path) == data.train_sentences


def test_merge_concatenates_disjoint_corpora():
    a = generate(SynthConfig(n_homophones=2, senses_per_homophone=2, n_cue_words_per_sense=2,
                             n_sentences=50, seed=1, hangul_alphabet="가나다라마바사아",
                             hanja_alphabet="天地人日月火水木", n_filler_words=4))
    b = generate(SynthConfig(n_homophones=2, senses_per_homophone=4, n_cue_words_per_sense=2,
                             n_sentences=50, seed=2, hangul_alphabet="자차카타파하거너",
                             hanja_alphabet="金土山川田石竹馬", n_filler_words=4))
    m = merge(a, b)
    assert len(m.lexicon) == 4
    assert len(m.train_sentences) == len(a.train_sentences) + len(b.train_sentences)
    with pytest.raises(LexiconFormatError):
        merge(a, a)


def test_plain_domain_generator():
    cfg = PlainConfig(n_words=20, n_sentences=120, sentence_len=6, seed=3)
    a, b = generate_plain(cfg), generate_plain(cfg)
    assert a.train_sentences == b.train_sentences
    assert a.heldout_sentences == b.heldout_sentences
    assert not (set(a.train_sentences) & set(a.heldout_sentences))
    vocab_chars = set("".join(a.words))
    assert vocab_chars <= set(cfg.alphabet)


def test_annotation_validates_against_lexicon(tmp_path):
    data = generate(SMALL)
    path = tmp_path / "eval.jsonl"
    surface = data.eval_sentences[0].annotations[0].surface
    text = data.eval_sentences[0].text
    bogus = AnnotatedSentence(
        text=text,
        annotations=(Annotation(start=text.index(surface), end=text.index(surface) + len(surface),
                                surface=surface, hanja="不存"),),
    )
    save_annotated([bogus], path)
    with pytest.raises(LexiconFormatError, match="unknown"):
        load_annotated(path, lexicon=data.lexicon)
