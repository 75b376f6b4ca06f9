"""
Configuration settings for the Knowledge Homophily Platform
"""
from pathlib import Path
from typing import List

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    # Application
    APP_NAME: str = "Knowledge Homophily Platform"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"

    # API
    API_V1_PREFIX: str = "/api"
    CORS_ORIGINS: List[str] = [
        "http://localhost:3000",
        "http://localhost:8000",
    ]

    # Paths
    BASE_DIR: Path = Path(__file__).parent.parent
    DATA_DIR: Path = BASE_DIR / "data"
    RAW_DATA_DIR: Path = DATA_DIR / "raw"
    PROCESSED_DATA_DIR: Path = DATA_DIR / "processed"
    ARTIFACTS_DIR: Path = DATA_DIR / "runs"

    # LLM oracle (chat-completion endpoint)
    ORACLE_ENDPOINT: str = ""
    ORACLE_API_KEY: str = ""
    ORACLE_MODEL: str = "gpt-3.5-turbo"
    ORACLE_TIMEOUT: float = 30.0  # seconds
    ORACLE_MAX_RETRIES: int = 3
    ORACLE_PARALLELISM: int = 4
    ORACLE_BACKOFF_SECONDS: float = 1.0
    ORACLE_CACHE_PATH: Path = DATA_DIR / "oracle_cache.jsonl"

    # Homophily analysis
    CITESEER_HOMOPHILY: float = 0.74  # reference line only
    HISTOGRAM_BINS: int = 20
    Z_CRITICAL_99: float = 2.576

    # Retrieval
    DEFAULT_ALPHA: float = 0.5
    DEFAULT_BEAM_WIDTH: int = 8
    MISSING_KNOWLEDGE: float = 0.5  # K(u) assumed for unscored entities


# Create settings instance
settings = Settings()


def ensure_directories() -> None:
    """Create the data directories used by the CLI and the API."""
    for directory in [
        settings.DATA_DIR,
        settings.RAW_DATA_DIR,
        settings.PROCESSED_DATA_DIR,
        settings.ARTIFACTS_DIR,
    ]:
        directory.mkdir(parents=True, exist_ok=True)
