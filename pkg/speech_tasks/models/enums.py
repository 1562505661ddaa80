from enum import Enum

class Modality(str, Enum):
    SPEECH = "speech"
    TEXT = "text"
    PAIRED = "paired"

class Preset(str, Enum):
    TOY = "toy"
    PAPER = "paper"

class DecodeMode(str, Enum):
    GREEDY = "greedy"
    BEAM = "beam"

class ScoreLevel(str, Enum):
    WORD = "word"
    CHAR = "char"
    LABEL = "label"

class TranscriptEncoding(str, Enum):
    """Script used for ASR targets: Arabic script or its Buckwalter image."""
    ARABIC = "ar"
    BUCKWALTER = "bw"

class ErrorKind(str, Enum):
    USAGE = "usage"
    DATA = "data"
    NUMERIC = "numeric"
