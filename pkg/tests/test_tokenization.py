import unicodedata

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlpretrain.tokenization import (
    BOS_ID,
    EOS_ID,
    MASK_ID,
    PAD_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    build_vocab,
    detokenize,
    load_vocab,
    normalize,
    save_vocab,
    tokenize,
)


def char_vocab(alphabet, extra=()):
    """Vocabulary with every char as both a bare and a continuation piece."""
    pieces = [c for c in alphabet] + ["##" + c for c in alphabet]
    return Vocabulary(SPECIAL_TOKENS + tuple(pieces) + tuple(extra))


class TestVocabulary:
    def test_special_ids(self):
        v = Vocabulary(SPECIAL_TOKENS + ("a",))
        assert (PAD_ID, UNK_ID, MASK_ID, BOS_ID, EOS_ID) == (0, 1, 2, 3, 4)
        assert v.token_of(0) == "[PAD]"
        assert v.id_of("a") == 5

    def test_bijection(self):
        v = Vocabulary(SPECIAL_TOKENS + ("x", "y", "z"))
        for i, t in enumerate(v.tokens):
            assert v.id_of(t) == i and v.token_of(i) == t

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            Vocabulary(SPECIAL_TOKENS + ("a", "a"))

    def test_rejects_missing_specials(self):
        with pytest.raises(ValueError):
            Vocabulary(("a", "b", "c", "d", "e", "f"))

    def test_unknown_token_maps_to_unk(self):
        v = Vocabulary(SPECIAL_TOKENS)
        assert v.id_of("nope") == UNK_ID
        assert v.get("nope") is None


class TestBuildVocab:
    def test_basic(self):
        v = build_vocab(["a a b"], max_size=7)
        assert v.tokens == SPECIAL_TOKENS + ("a", "b")

    def test_frequency_order(self):
        v = build_vocab(["c c c b b a"], max_size=20)
        assert v.tokens[5:] == ("c", "b", "a")

    def test_tie_broken_lexicographically(self):
        v = build_vocab(["x m x m"], max_size=20)
        assert v.tokens[5:] == ("m", "x")

    def test_min_count_drops_rare(self):
        v = build_vocab(["a a a b"], max_size=20, min_count=2)
        assert v.tokens == SPECIAL_TOKENS + ("a",)

    def test_max_size_truncates(self):
        v = build_vocab(["e d c b a"], max_size=7)
        assert v.size == 7
        assert v.tokens[5:] == ("a", "b")

    def test_empty_corpus(self):
        assert build_vocab([], max_size=10).tokens == SPECIAL_TOKENS

    def test_rebuild_is_identical(self):
        corpus = ["the quick brown fox", "the lazy dog", "fox fox"]
        assert build_vocab(corpus, 50).tokens == build_vocab(corpus, 50).tokens

    def test_max_size_too_small(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], max_size=5)


class TestTokenize:
    def test_empty(self):
        assert tokenize("", char_vocab("ab")) == []

    def test_in_vocab_words(self):
        v = Vocabulary(SPECIAL_TOKENS + ("hello", "world"))
        assert tokenize("hello world hello", v) == [5, 6, 5]

    def test_greedy_prefers_longest(self):
        v = Vocabulary(SPECIAL_TOKENS + ("ab", "a", "##b", "##c", "abc"))
        # "abc" matches whole; "abd" falls back and greedily takes "ab"
        assert tokenize("abc", v) == [v.id_of("abc")]
        v2 = Vocabulary(SPECIAL_TOKENS + ("ab", "a", "##b", "##c"))
        assert tokenize("abc", v2) == [v2.id_of("ab"), v2.id_of("##c")]

    def test_unknown_char_becomes_unk(self):
        v = char_vocab("ab")
        assert tokenize("aqb", v) == [v.id_of("a"), UNK_ID, v.id_of("##b")]

    def test_fully_unknown_word(self):
        assert tokenize("qq", char_vocab("ab")) == [UNK_ID, UNK_ID]

    def test_truncation(self):
        v = Vocabulary(SPECIAL_TOKENS + ("w",))
        assert tokenize("w " * 10, v, max_len=4) == [5, 5, 5, 5]

    def test_truncation_mid_word(self):
        v = char_vocab("ab")
        assert len(tokenize("abab abab", v, max_len=3)) == 3

    def test_deterministic(self):
        v = char_vocab("abc", extra=("cab",))
        assert tokenize("cab abc bca", v) == tokenize("cab abc bca", v)

    def test_char_fallback_round_trips(self):
        v = char_vocab("abc", extra=("cab",))
        for s in ("cab", "abc", "ba", "aaa cab bc"):
            assert detokenize(tokenize(s, v), v) == s

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="abc ", max_size=40))
    def test_round_trip_over_vocab_alphabet(self, s):
        v = char_vocab("abc", extra=("ab", "##bc"))
        assert detokenize(tokenize(s, v, max_len=10_000), v) == " ".join(s.split())

    def test_detokenize_drops_structural_specials(self):
        v = char_vocab("a")
        ids = [BOS_ID, v.id_of("a"), MASK_ID, EOS_ID, PAD_ID]
        assert detokenize(ids, v) == "a [MASK]"


class TestNormalize:
    def test_uber(self):
        # stage by stage: NFKD splits the umlaut off, casefold lowers,
        # the combining mark is stripped
        assert normalize("Über") == "uber"

    def test_fixed_point_ascii(self):
        assert normalize("dog") == "dog"

    def test_case_fold(self):
        assert normalize("HELLO") == "hello"

    def test_compatibility_forms(self):
        assert normalize("ﬁle") == "file"  # U+FB01 ligature
        assert normalize("①") == "1"

    def test_sharp_s(self):
        assert normalize("Straße") == "strasse"

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=30))
    def test_idempotent(self, s):
        once = normalize(s)
        assert normalize(once) == once

    def test_strips_precomposed_accents(self):
        assert normalize("café") == "cafe"
        assert normalize("café") == "cafe"


class TestVocabFile:
    def test_round_trip(self, tmp_path):
        v = build_vocab(["über café the naïve fox", "the the fox"], max_size=64)
        p = tmp_path / "vocab.txt"
        save_vocab(v, p)
        assert load_vocab(p).tokens == v.tokens

    def test_line_number_is_id(self, tmp_path):
        v = Vocabulary(SPECIAL_TOKENS + ("alpha", "beta"))
        p = tmp_path / "vocab.txt"
        save_vocab(v, p)
        lines = p.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "[PAD]" and lines[5] == "alpha" and lines[6] == "beta"

    def test_rejects_newline_token(self, tmp_path):
        v = Vocabulary.__new__(Vocabulary)
        v.tokens = SPECIAL_TOKENS + ("bad\ntoken",)
        v._ids = {}
        with pytest.raises(ValueError):
            save_vocab(v, tmp_path / "vocab.txt")

    def test_load_rejects_corrupt_header(self, tmp_path):
        p = tmp_path / "vocab.txt"
        p.write_text("a\nb\nc\nd\ne\nf\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_vocab(p)

    def test_unicode_tokens_bit_exact(self, tmp_path):
        exotic = ("héllo", "Über", "中文", "á")
        v = Vocabulary(SPECIAL_TOKENS + exotic)
        p = tmp_path / "vocab.txt"
        save_vocab(v, p)
        assert load_vocab(p).tokens[5:] == exotic
