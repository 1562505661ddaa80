from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.text_pipeline import normalize_text


class Utterance(BaseModel):
    """
    One manifest record.

    `text_norm` is always derived from `text_raw`; a value supplied by the
    caller is ignored.
    """
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    id: str = Field(..., min_length=1, description="Utterance id, unique within a manifest")
    audio: str = Field(..., description="Path of the 16 kHz mono PCM WAV file")
    duration: float = Field(..., gt=0, description="Duration in seconds")
    text_raw: str = Field("", alias="text", description="Transcript as found in the manifest")
    text_norm: str = Field("", description="normalize_text(text_raw)")
    dialect: Optional[str] = Field(None, description="Dialect class label, if annotated")
    overlap: bool = Field(False, description="Overlapping-speech flag")

    @model_validator(mode="before")
    @classmethod
    def _derive_normalized(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            raw = data.get("text", data.get("text_raw", ""))
            data["text_norm"] = normalize_text(raw if isinstance(raw, str) else "")
        return data

    def to_manifest(self) -> dict:
        record = {"id": self.id, "audio": self.audio, "duration": self.duration, "text": self.text_raw}
        if self.dialect is not None:
            record["dialect"] = self.dialect
        if self.overlap:
            record["overlap"] = True
        return record
