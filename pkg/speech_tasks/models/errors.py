"""
Error hierarchy for the speech/text toolkit.

Every error carries the exit-code category the CLI reports it under:
usage (2), data (3) or numeric (4).
"""

from typing import Any, Dict, Optional

from .enums import ErrorKind

EXIT_CODES = {ErrorKind.USAGE: 2, ErrorKind.DATA: 3, ErrorKind.NUMERIC: 4}


class SpeechTextError(Exception):
    kind: ErrorKind = ErrorKind.DATA

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.kind]

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": type(self).__name__, "kind": self.kind.value, "message": self.message}
        payload.update({k: v for k, v in self.details.items() if v is not None})
        return payload


class UsageError(SpeechTextError):
    kind = ErrorKind.USAGE


class DataError(SpeechTextError):
    kind = ErrorKind.DATA


class NumericError(SpeechTextError):
    kind = ErrorKind.NUMERIC


# ============================================================================
# TEXT
# ============================================================================

class UnmappedSymbol(DataError):
    def __init__(self, char: str, position: int):
        super().__init__(f"symbol {char!r} (U+{ord(char):04X}) at position {position} has no transliteration",
                         char=char, position=position)
        self.char = char
        self.position = position


class UnknownSymbol(DataError):
    def __init__(self, char: str, position: int):
        super().__init__(f"symbol {char!r} at position {position} is not in the vocabulary",
                         char=char, position=position)
        self.char = char
        self.position = position


class InvalidId(DataError):
    def __init__(self, token_id: int, vocab_size: int):
        super().__init__(f"id {token_id} outside vocabulary of size {vocab_size}",
                         token_id=token_id, vocab_size=vocab_size)
        self.token_id = token_id


class EmptyCorpus(DataError):
    pass


# ============================================================================
# AUDIO
# ============================================================================

class AudioFileNotFound(DataError):
    def __init__(self, path: str):
        super().__init__(f"audio file not found: {path}", path=path)
        self.path = path


class UnsupportedFormat(DataError):
    pass


class RateMismatch(DataError):
    def __init__(self, rate: int, expected: int):
        super().__init__(f"sample rate {rate} Hz, expected {expected} Hz", rate=rate, expected=expected)
        self.rate = rate


class TooShort(DataError):
    def __init__(self, n_samples: int, minimum: int):
        super().__init__(f"{n_samples} samples, need at least {minimum}", n_samples=n_samples, minimum=minimum)


class TooFewPoints(DataError):
    pass


class DimMismatch(DataError):
    def __init__(self, got: int, expected: int, what: str = "feature"):
        super().__init__(f"{what} dimension {got}, expected {expected}", got=got, expected=expected)


# ============================================================================
# CORPUS
# ============================================================================

class ManifestParseError(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"manifest line {line}: {reason}", line=line)
        self.line = line


class DuplicateId(DataError):
    def __init__(self, utt_id: str, line: Optional[int] = None):
        super().__init__(f"duplicate utterance id {utt_id!r}", utt_id=utt_id, line=line)
        self.utt_id = utt_id


class DurationMismatch(DataError):
    def __init__(self, utt_id: str, declared: int, loaded: int):
        super().__init__(f"{utt_id}: manifest declares {declared} samples, audio has {loaded}",
                         utt_id=utt_id, declared=declared, loaded=loaded)
        self.utt_id = utt_id


# ============================================================================
# NUMERICS / TRAINING
# ============================================================================

class ShapeMismatch(NumericError):
    pass


class NonDistribution(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, term: str, step: Optional[int] = None):
        super().__init__(f"loss term {term!r} is not finite", term=term, step=step)
        self.term = term


class VocabMismatch(DataError):
    pass


class CheckpointError(DataError):
    pass


# ============================================================================
# TASKS / EVALUATION
# ============================================================================

class UnknownDialectLabel(DataError):
    def __init__(self, label: str):
        super().__init__(f"dialect label {label!r} is not registered in the tokenizer", label=label)
        self.label = label


class CountMismatch(DataError):
    def __init__(self, n_refs: int, n_hyps: int):
        super().__init__(f"{n_refs} references vs {n_hyps} hypotheses", n_refs=n_refs, n_hyps=n_hyps)


class MissingId(DataError):
    def __init__(self, utt_id: str):
        super().__init__(f"no hypothesis for reference id {utt_id!r}", utt_id=utt_id)
        self.utt_id = utt_id
