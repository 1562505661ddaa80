from .enums import Modality, Preset, DecodeMode, ScoreLevel, TranscriptEncoding, ErrorKind
from .errors import SpeechTextError, UsageError, DataError, NumericError
from .config import FrontendConfig, ModelConfig, TrainConfig, CharLMConfig, DecodeConfig, RunConfig, PRESETS
from .reports import LossReport, ScoreReport, AccuracyReport, Hypothesis, DialectPrediction
from .validation import ValidatedRecord, QuarantineRecord

__all__ = [
    "Modality", "Preset", "DecodeMode", "ScoreLevel", "TranscriptEncoding", "ErrorKind",
    "SpeechTextError", "UsageError", "DataError", "NumericError",
    "FrontendConfig", "ModelConfig", "TrainConfig", "CharLMConfig", "DecodeConfig", "RunConfig", "PRESETS",
    "LossReport", "ScoreReport", "AccuracyReport", "Hypothesis", "DialectPrediction",
    "ValidatedRecord", "QuarantineRecord",
]
