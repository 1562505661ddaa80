import random
import string

import pytest

from models.errors import DataError, EmptyCorpus, InvalidId, UnknownSymbol, UnmappedSymbol
from services.text_pipeline import (SPECIALS, Tokenizer, build_tokenizer, from_buckwalter, load_tokenizer,
                                    load_translit_table, normalize_text, save_tokenizer, to_buckwalter,
                                    translit_stats)

ARABIC_LETTERS = "".join(chr(c) for c in range(0x0621, 0x063B)) + "".join(chr(c) for c in range(0x0641, 0x064B))
EXTRA_LETTERS = "ٱپچڤگ"           # wasla alef, peh, tcheh, veh, gaf
LOANWORD_LETTERS = "یکہژںۀ"  # outside the transliteration table


class TestNormalize:
    def test_strips_diacritics(self):
        assert normalize_text("كَتَبَ") == "كتب"

    def test_tanween_shadda_and_tatweel(self):
        assert normalize_text("مُحَمَّدٌ") == "محمد"
        assert normalize_text("كـــتب") == "كتب"

    def test_indic_digits_become_ascii(self):
        assert normalize_text("عام ٢٠٢٣") == "عام 2023"
        assert normalize_text("۱۲") == "12"

    def test_punctuation_dropped_except_at_and_percent(self):
        assert normalize_text("مرحبا، يا عالم!") == "مرحبا يا عالم"
        assert normalize_text("خصم ٥٠٪ @متجر") == "خصم 50% @متجر"

    def test_whitespace_collapses(self):
        assert normalize_text("  كتب \t\n  الولد ") == "كتب الولد"

    def test_idempotent_on_random_unicode(self):
        rng = random.Random(0)
        pool = [chr(c) for c in range(0x20, 0x0700)] + ["\t", "\n", " ", "　"]
        for _ in range(1000):
            text = "".join(rng.choice(pool) for _ in range(rng.randint(0, 30)))
            once = normalize_text(text)
            assert normalize_text(once) == once


class TestBuckwalter:
    def test_known_word(self):
        assert to_buckwalter("كتب الولد") == "ktb Alwld"
        assert from_buckwalter("ktb Alwld") == "كتب الولد"

    def test_table_is_one_to_one(self):
        forward, inverse = load_translit_table()
        assert len(forward) == len(inverse)
        assert all(inverse[v] == k for k, v in forward.items())

    def test_round_trip_random_strings(self):
        forward, _ = load_translit_table()
        pool = list(forward) + [" "]
        rng = random.Random(1)
        for _ in range(1000):
            text = "".join(rng.choice(pool) for _ in range(rng.randint(0, 40)))
            assert from_buckwalter(to_buckwalter(text)) == text

    def test_unmapped_symbol_reports_position(self):
        with pytest.raises(UnmappedSymbol) as exc:
            to_buckwalter("كتبی")
        assert exc.value.position == 3

    def test_from_buckwalter_strict_and_lenient(self):
        with pytest.raises(UnmappedSymbol):
            from_buckwalter("ktb 3")
        assert from_buckwalter("ktb 3%", strict=False) == "كتب 3%"

    def test_translit_stats(self):
        stats = translit_stats("كتب")
        assert stats["arabic_chars"] == 3
        assert stats["latin_letter_ratio"] == 1.0
        assert translit_stats("ءا")["latin_letter_ratio"] == 0.5
        assert translit_stats("abc")["latin_letter_ratio"] == 0.0


class TestTokenizer:
    @pytest.fixture
    def tokenizer(self):
        return build_tokenizer(["كتب الولد", "درس"])

    def test_specials_have_fixed_ids(self, tokenizer):
        assert [tokenizer.id_of(f"<{name}>") for name in SPECIALS] == list(range(6))
        assert (tokenizer.pad_id, tokenizer.bos_id, tokenizer.eos_id) == (0, 1, 2)
        assert (tokenizer.unk_id, tokenizer.blank_id, tokenizer.mask_id) == (3, 4, 5)

    def test_symbols_sorted_by_codepoint(self, tokenizer):
        assert list(tokenizer.symbols) == sorted(set("كتب الولددرس"), key=ord)

    def test_encode_decode(self, tokenizer):
        ids = tokenizer.encode("كتب")
        assert all(i >= len(SPECIALS) for i in ids)
        assert tokenizer.decode(ids) == "كتب"
        assert tokenizer.decode([tokenizer.bos_id, *ids, tokenizer.eos_id]) == "كتب"

    def test_unknown_characters(self, tokenizer):
        assert tokenizer.encode("كz") == [tokenizer.id_of("ك"), tokenizer.unk_id]
        with pytest.raises(UnknownSymbol) as exc:
            tokenizer.encode("كz", strict=True)
        assert exc.value.position == 1

    def test_invalid_id(self, tokenizer):
        with pytest.raises(InvalidId):
            tokenizer.decode([len(tokenizer)])

    def test_extension_preserves_ids(self, tokenizer):
        extended = tokenizer.extend(["<dialect:EGY>", "ك", "ق"])
        assert len(extended) == len(tokenizer) + 2
        for sym, idx in tokenizer.symbol_to_id.items():
            assert extended.id_of(sym) == idx
        assert extended.id_of("<dialect:EGY>") == len(tokenizer)

    def test_build_extends_base(self, tokenizer):
        bigger = build_tokenizer(["قلم"], base=tokenizer)
        assert bigger.symbols[: len(tokenizer.symbols)] == tokenizer.symbols

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_tokenizer([])

    def test_json_round_trip(self, tokenizer, tmp_path):
        path = str(tmp_path / "tok.json")
        save_tokenizer(tokenizer, path)
        assert load_tokenizer(path) == tokenizer

    def test_rejects_foreign_special_layout(self):
        with pytest.raises(DataError):
            Tokenizer.from_json('{"specials": {"pad": 1}, "symbols": ["a"]}')

    @pytest.mark.parametrize("payload", [
        "{not json",
        "[1, 2]",
        '{"specials": {"pad": 0, "bos": 1, "eos": 2, "unk": 3, "blank": 4, "mask": 5}}',
    ])
    def test_rejects_malformed_json(self, payload):
        with pytest.raises(DataError):
            Tokenizer.from_json(payload)


class TestVocabularyGrowth:
    """An ~80-symbol English character tokenizer extended for Arabic-script and Buckwalter targets."""

    @pytest.fixture
    def english_base(self):
        symbols = [" "] + list(string.ascii_lowercase) + list(string.digits) + list(string.ascii_uppercase)
        symbols += list("'.,?!-:;()\"")
        return Tokenizer(symbols)

    def test_base_size(self, english_base):
        assert len(english_base) == 80

    def test_arabic_script_extension(self, english_base):
        sample = [ARABIC_LETTERS[i:i + 5] for i in range(0, len(ARABIC_LETTERS), 5)]
        sample += [EXTRA_LETTERS, LOANWORD_LETTERS, "خصم 50% @متجر"]
        extended = build_tokenizer([normalize_text(t) for t in sample], base=english_base)
        assert abs(len(extended) - 130) <= 5

    def test_buckwalter_extension(self, english_base):
        sample = [ARABIC_LETTERS, EXTRA_LETTERS, "خصم 50% @متجر"]
        extended = build_tokenizer([to_buckwalter(normalize_text(t)) for t in sample], base=english_base)
        assert abs(len(extended) - 90) <= 5
