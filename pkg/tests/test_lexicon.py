import pytest
from hypothesis import given, strategies as st

from hanjabridge.errors import LexiconFormatError
from hanjabridge.lexicon import (
    HanjaCandidate,
    homophony_stats,
    load_lexicon,
    make_entry,
    make_lexicon,
    save_lexicon,
    sort_candidates,
)


def write(tmp_path, text, name="lex.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_load_orders_candidates_by_weight(tmp_path):
    path = write(tmp_path, "의사\t意思:8;醫師:10;議事:1;義士:2\n")
    lex = load_lexicon(path)
    entry = lex.lookup("의사")
    assert [c.hanja for c in entry.candidates] == ["醫師", "意思", "義士", "議事"]


def test_line_order_is_irrelevant(tmp_path):
    a = load_lexicon(write(tmp_path, "가격\t價格:10;加擊:1\n연구\t研究:10\n", "a.tsv"))
    b = load_lexicon(write(tmp_path, "연구\t研究:10\n가격\t加擊:1;價格:10\n", "b.tsv"))
    assert a == b


def test_comments_and_blank_lines(tmp_path):
    lex = load_lexicon(write(tmp_path, "# header\n\n   \n# another\n"))
    assert len(lex) == 0


def test_equal_weights_fall_back_to_code_points(tmp_path):
    lex = load_lexicon(write(tmp_path, "가\t格:5;加:5\n"))
    got = [c.hanja for c in lex.lookup("가").candidates]
    # independent oracle: python sorts strings by code point
    assert got == sorted(["格", "加"])


@given(st.lists(st.tuples(st.sampled_from("甲乙丙丁戊己庚辛壬癸"), st.floats(0, 100)), min_size=1, max_size=8, unique_by=lambda t: t[0]))
def test_candidate_order_matches_sort_oracle(pairs):
    cands = [HanjaCandidate(h, weight=w) for h, w in pairs]
    ordered = sort_candidates(cands)
    oracle = sorted(cands, key=lambda c: (-c.weight, c.hanja))
    assert ordered == oracle


def test_missing_weight_defaults_to_one(tmp_path):
    lex = load_lexicon(write(tmp_path, "가격\t價格;加擊:0.5\n"))
    cands = lex.lookup("가격").candidates
    assert cands[0].hanja == "價格" and cands[0].weight == 1.0


def test_malformed_line_reports_line_number(tmp_path):
    path = write(tmp_path, "가격\t價格:10\n의사 意思:8\n")
    with pytest.raises(LexiconFormatError, match=r":2:"):
        load_lexicon(path)


def test_bad_weight_reports_line_number(tmp_path):
    with pytest.raises(LexiconFormatError, match=r":1:.*weight"):
        load_lexicon(write(tmp_path, "가격\t價格:abc\n"))


def test_duplicate_surface_is_an_error(tmp_path):
    path = write(tmp_path, "가격\t價格:10\n가격\t加擊:1\n")
    with pytest.raises(LexiconFormatError, match="duplicate surface"):
        load_lexicon(path)


def test_duplicate_hanja_within_entry_is_an_error(tmp_path):
    with pytest.raises(LexiconFormatError, match="duplicate hanja"):
        load_lexicon(write(tmp_path, "가격\t價格:10;價格:1\n"))


def test_crlf_is_tolerated(tmp_path):
    path = tmp_path / "crlf.tsv"
    path.write_bytes("가격\t價格:10;加擊:1\r\n연구\t研究:10\r\n".encode("utf-8"))
    lex = load_lexicon(path)
    assert len(lex) == 2 and lex.lookup("가격").candidates[0].hanja == "價格"


def test_lookup_present_absent_and_idempotent(tmp_path):
    lex = load_lexicon(write(tmp_path, "의사\t醫師:10;意思:8;義士:2;議事:1\n"))
    assert len(lex.lookup("의사").candidates) == 4
    assert lex.lookup("없는말") is None
    assert lex.lookup("의사") == lex.lookup("의사")


def test_top_k_prefix_and_saturation(tmp_path):
    lex = load_lexicon(write(tmp_path, "의사\t醫師:10;意思:8;義士:2;議事:1\n가격\t價格:10;加擊:1\n"))
    entry = lex.lookup("의사")
    assert [c.hanja for c in entry.top_k(2)] == ["醫師", "意思"]
    assert entry.top_k(99) == entry.candidates
    assert [c.hanja for c in lex.lookup("가격").top_k(2)] == ["價格", "加擊"]
    with pytest.raises(ValueError):
        entry.top_k(0)


@given(st.integers(1, 10))
def test_top_k_is_prefix_of_top_k_plus_one(k):
    entry = make_entry("의사", [HanjaCandidate(h, weight=w) for h, w in
                               [("醫師", 10), ("意思", 8), ("義士", 2), ("議事", 1)]])
    assert entry.top_k(k) == entry.top_k(k + 1)[:k]


def test_homophony_stats_counts():
    lex = make_lexicon([
        make_entry("의사", [HanjaCandidate(h, weight=float(4 - i)) for i, h in enumerate("ABCD")]),
        make_entry("가격", [HanjaCandidate("E", 2.0), HanjaCandidate("F", 1.0)]),
        make_entry("연구", [HanjaCandidate("G", 1.0)]),
    ])
    stats = homophony_stats(lex)
    assert stats.n_entries == 3
    assert stats.n_homophonous == 2
    assert stats.ratio == pytest.approx(2 / 3)
    assert stats.max_candidates == 4


def test_homophony_stats_empty_and_singletons():
    assert homophony_stats(make_lexicon([])).ratio == 0.0
    lone = make_lexicon([make_entry("연구", [HanjaCandidate("研究", 1.0)])])
    assert homophony_stats(lone).ratio == 0.0


def test_save_load_round_trip(tmp_path):
    src = write(tmp_path, "의사\t醫師:10;意思:8;義士:2;議事:1\n가격\t價格:10;加擊:1\n연구\t研究:2.5\n")
    lex = load_lexicon(src)
    out = tmp_path / "saved.tsv"
    save_lexicon(lex, out)
    assert load_lexicon(out) == lex


def test_bundled_sample_lexicon_loads():
    from hanjabridge.cli import _data_path

    lex = load_lexicon(_data_path("sample_lexicon.tsv"))
    assert len(lex) >= 50
    for surface in ("의사", "가격", "연구", "조사"):
        assert lex.lookup(surface) is not None
    assert [c.hanja for c in lex.lookup("의사").top_k(2)] == ["醫師", "意思"]
