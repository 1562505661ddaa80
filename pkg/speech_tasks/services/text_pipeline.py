"""
Arabic text pipeline: normalization, Buckwalter transliteration and the
character tokenizer shared by every model that reads or writes text.
"""

import json
import logging
import unicodedata
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from config import settings
from models.errors import EmptyCorpus, InvalidId, UnknownSymbol, UnmappedSymbol, DataError

logger = logging.getLogger('speechtext.text')

# ============================================================================
# NORMALIZATION
# ============================================================================

DIACRITICS = frozenset(
    [chr(c) for c in range(0x064B, 0x0653)]   # tanween, harakat, shadda, sukun
    + ["\u0670", "\u0640"]                 # superscript alef, tatweel
)
KEPT_PUNCTUATION = frozenset("@%")

_DIGIT_MAP = {}
for _i in range(10):
    _DIGIT_MAP[0x0660 + _i] = str(_i)   # Arabic-Indic
    _DIGIT_MAP[0x06F0 + _i] = str(_i)   # extended (Persian) forms
_DIGIT_MAP[0x066A] = "%"                # Arabic percent sign


def normalize_text(raw: str) -> str:
    """
    Normalize an Arabic transcript.

    Indo-Arabic digits become ASCII, diacritics and every punctuation mark
    except `@` and `%` are dropped, whitespace runs collapse to one space.
    Letters are left untouched (no NFKC, no letter-variant folding).
    """
    text = raw.translate(_DIGIT_MAP)
    text = "".join(
        ch for ch in text
        if ch not in DIACRITICS
        and (ch in KEPT_PUNCTUATION or not unicodedata.category(ch).startswith("P"))
    )
    return " ".join(text.split())


# ============================================================================
# BUCKWALTER
# ============================================================================

@lru_cache(maxsize=4)
def load_translit_table(path: Optional[str] = None) -> Tuple[Dict[str, str], Dict[str, str]]:
    """Read the codepoint<TAB>ascii table; returns (forward, inverse) maps."""
    path = path or settings.TRANSLIT_TABLE
    forward: Dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                code, ascii_char = line.split("\t")
                char = chr(int(code.removeprefix("U+"), 16))
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: malformed transliteration entry", line=lineno) from e
            if len(ascii_char) != 1 or not ascii_char.isascii():
                raise DataError(f"{path}:{lineno}: target must be one ASCII character", line=lineno)
            forward[char] = ascii_char
    inverse = {b: a for a, b in forward.items()}
    if len(inverse) != len(forward):
        raise DataError(f"{path}: transliteration table is not one-to-one")
    return forward, inverse


def to_buckwalter(text: str) -> str:
    forward, _ = load_translit_table()
    out = []
    for pos, ch in enumerate(text):
        if ch in forward:
            out.append(forward[ch])
        elif ch.isascii() or ch.isspace():
            out.append(ch)
        else:
            raise UnmappedSymbol(ch, pos)
    return "".join(out)


def from_buckwalter(text: str, strict: bool = True) -> str:
    """
    Inverse of to_buckwalter on its image.

    With strict=False characters outside the table pass through unchanged,
    which is what decoded hypotheses with digits or `%`/`@` need.
    """
    _, inverse = load_translit_table()
    out = []
    for pos, ch in enumerate(text):
        if ch in inverse:
            out.append(inverse[ch])
        elif ch.isspace() or not strict:
            out.append(ch)
        else:
            raise UnmappedSymbol(ch, pos)
    return "".join(out)


def translit_stats(text: str) -> Dict[str, float]:
    """Share of Arabic characters whose Buckwalter image is a Latin letter."""
    forward, _ = load_translit_table()
    arabic = [ch for ch in text if ch in forward]
    letters = sum(1 for ch in arabic if forward[ch].isalpha())
    return {
        "arabic_chars": len(arabic),
        "latin_letter_chars": letters,
        "latin_letter_ratio": letters / len(arabic) if arabic else 0.0,
    }


# ============================================================================
# TOKENIZER
# ============================================================================

SPECIALS: Tuple[str, ...] = ("pad", "bos", "eos", "unk", "blank", "mask")


class Tokenizer:
    """
    Bijective symbol <-> id map.

    Ids 0..5 are the specials in SPECIALS order; every other symbol's id is
    its index in `symbols` plus the number of specials. Instances are never
    mutated: build and extend return new tokenizers.
    """

    def __init__(self, symbols: Sequence[str] = ()):
        self.specials: Dict[str, int] = {name: i for i, name in enumerate(SPECIALS)}
        self.symbols: Tuple[str, ...] = tuple(symbols)
        self._id_to_symbol: List[str] = [f"<{name}>" for name in SPECIALS] + list(self.symbols)
        self._symbol_to_id: Dict[str, int] = {}
        for i, sym in enumerate(self._id_to_symbol):
            if sym in self._symbol_to_id:
                raise DataError(f"duplicate tokenizer symbol {sym!r}")
            self._symbol_to_id[sym] = i

    pad_id = property(lambda self: self.specials["pad"])
    bos_id = property(lambda self: self.specials["bos"])
    eos_id = property(lambda self: self.specials["eos"])
    unk_id = property(lambda self: self.specials["unk"])
    blank_id = property(lambda self: self.specials["blank"])
    mask_id = property(lambda self: self.specials["mask"])

    def __len__(self) -> int:
        return len(self._id_to_symbol)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._symbol_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tokenizer) and self.symbols == other.symbols

    @property
    def symbol_to_id(self) -> Dict[str, int]:
        return dict(self._symbol_to_id)

    def id_of(self, symbol: str) -> int:
        if symbol not in self._symbol_to_id:
            raise UnknownSymbol(symbol, 0)
        return self._symbol_to_id[symbol]

    def symbol_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self):
            raise InvalidId(token_id, len(self))
        return self._id_to_symbol[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIALS)

    def encode(self, text: str, strict: bool = False) -> List[int]:
        """Per-character ids; out-of-vocabulary characters become unk unless strict."""
        ids = []
        for pos, ch in enumerate(text):
            token_id = self._symbol_to_id.get(ch)
            if token_id is None or token_id < len(SPECIALS):
                if strict:
                    raise UnknownSymbol(ch, pos)
                token_id = self.unk_id
            ids.append(token_id)
        return ids

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        out = []
        for token_id in ids:
            token_id = int(token_id)
            sym = self.symbol_of(token_id)
            if skip_specials and self.is_special(token_id):
                continue
            out.append(sym)
        return "".join(out)

    def extend(self, symbols: Iterable[str]) -> "Tokenizer":
        """Append symbols not yet present, in the order given; existing ids are unchanged."""
        new = list(self.symbols)
        for sym in symbols:
            if sym not in self._symbol_to_id and sym not in new:
                new.append(sym)
        return Tokenizer(new)

    def to_json(self) -> str:
        return json.dumps({"specials": self.specials, "symbols": list(self.symbols)},
                          ensure_ascii=False, indent=1)

    @classmethod
    def from_json(cls, payload: str) -> "Tokenizer":
        try:
            data = json.loads(payload)
        except json.JSONDecodeError as e:
            raise DataError(f"tokenizer is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise DataError("tokenizer JSON must be an object")
        if data.get("specials", {}) != {name: i for i, name in enumerate(SPECIALS)}:
            raise DataError("tokenizer specials differ from the fixed special layout")
        symbols = data.get("symbols")
        if not isinstance(symbols, list) or not all(isinstance(s, str) for s in symbols):
            raise DataError("tokenizer symbols must be a list of strings")
        return cls(symbols)


def build_tokenizer(corpus: Iterable[str], base: Optional[Tokenizer] = None) -> Tokenizer:
    """
    Build (or extend) a character tokenizer from a corpus of normalized text.

    Symbols new to `base` are appended sorted by codepoint.
    """
    seen = set()
    n_texts = 0
    for text in corpus:
        n_texts += 1
        seen.update(text)
    if n_texts == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    base = base or Tokenizer()
    new_symbols = sorted((s for s in seen if s not in base), key=ord)
    tokenizer = base.extend(new_symbols)
    logger.info(f"Tokenizer built: {len(base)} base + {len(new_symbols)} new = {len(tokenizer)} symbols")
    return tokenizer


def save_tokenizer(tokenizer: Tokenizer, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(tokenizer.to_json())


def load_tokenizer(path: str) -> Tokenizer:
    with open(path, encoding="utf-8") as fh:
        return Tokenizer.from_json(fh.read())
