import os
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict

RESOURCE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources")


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file='.env', env_file_encoding='utf-8',
                                      env_prefix='SPEECHTEXT_', extra='ignore')

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["json", "text"] = "json"

    # Reproducibility
    DEFAULT_SEED: int = 1234
    TORCH_THREADS: int = 1  # >1 makes CPU reductions order-unstable

    # Resources
    TRANSLIT_TABLE: str = os.path.join(RESOURCE_DIR, "buckwalter.tsv")

    # Full-size parameter target checked by `describe`
    PARAM_TARGET_MILLIONS: float = 155.0
    PARAM_TOLERANCE: float = 0.05  # 5% deviation is flagged

settings = Settings()
