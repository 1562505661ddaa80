from datetime import datetime
from typing import Any, Dict, Generic, TypeVar

from pydantic import BaseModel, Field

ModelType = TypeVar("ModelType", bound=BaseModel)


class QuarantineRecord(BaseModel):
    raw_data: Any = Field(..., description="The raw manifest line that failed validation")
    error_message: str = Field(..., description="Description of why validation failed")
    line: int = Field(..., description="1-based line number in the manifest")
    timestamp: datetime = Field(default_factory=datetime.now, description="When the failure occurred")
    source: str = Field(..., description="Manifest path the line came from")
    model_name: str = Field(..., description="Name of the model validation was attempted against")


class ValidatedRecord(BaseModel, Generic[ModelType]):
    record: ModelType = Field(..., description="The successfully validated model")
    line: int = Field(..., description="1-based line number in the manifest")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Additional metadata about the validation")
