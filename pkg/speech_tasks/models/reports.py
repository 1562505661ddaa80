from typing import Dict, List

from pydantic import BaseModel, ConfigDict, Field

from .enums import ScoreLevel


class LossReport(BaseModel):
    """Scalars of one joint pre-training update."""
    model_config = ConfigDict(frozen=True)

    step: int
    lr: float
    speech_mlm: float
    speech_dae: float
    text_dae: float
    diversity: float
    total: float
    masked_frames: int = Field(..., ge=0)
    codes_replaced: int = Field(..., ge=0)
    temperature: float


class ScoreReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    level: ScoreLevel
    wer: float = Field(..., ge=0, description="Error rate at word level, pooled over the corpus")
    cer: float = Field(..., ge=0, description="Error rate at character level, pooled over the corpus")
    substitutions: int = Field(..., ge=0)
    insertions: int = Field(..., ge=0)
    deletions: int = Field(..., ge=0)
    n_ref_tokens: int = Field(..., ge=0, description="Reference tokens at the report level")
    n_utterances: int = Field(..., ge=0)

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


class AccuracyReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    level: ScoreLevel = ScoreLevel.LABEL
    accuracy: float = Field(..., ge=0, le=1)
    correct: int
    n_utterances: int


class Hypothesis(BaseModel):
    """A decoded token sequence with its fused score."""
    model_config = ConfigDict(frozen=True)

    ids: List[int]
    score: float
    acoustic: float
    lm: float = 0.0


class DialectPrediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: str
    posterior: Dict[str, float]
