"""Runtime settings for the federated simulator."""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide settings that do not change what an experiment computes."""

    # Output settings
    OUTPUT_ROOT: str = "runs"
    CSV_FLOAT_FORMAT: str = ".10g"

    # Logging settings
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s %(message)s"

    # Server settings
    HOST: str = "0.0.0.0"
    PORT: int = 3000
    DEBUG: bool = False

    # Upper bound on client worker threads, whatever a config asks for
    MAX_WORKERS: int = 1

    model_config = SettingsConfigDict(
        env_prefix="FEDTALK_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


# Create settings instance
settings = Settings()
