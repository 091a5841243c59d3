import json
from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.beamformer import BeamformerConfig
from src.cacgmm import CacgmmConfig
from src.metrics import EvaluationConfig
from src.mixer import MixerConfig
from src.rir_engine import RirConfig
from src.scene_geometry import GeometryConfig
from src.sources import SyntheticSourceConfig
from src.stft import StftConfig


class ConfigError(Exception):
    """Пользовательское исключение для ошибок конфигурации."""
    pass

# Определяем базовую директорию проекта
BASE_DIR = Path(__file__).resolve().parent.parent
# Путь к файлу .env
ENV_FILE_PATH = BASE_DIR / ".env"


class AppSettings(BaseSettings):
    """Модель настроек приложения с использованием Pydantic."""

    model_config = SettingsConfigDict(
        env_file_encoding="utf-8", extra="ignore"
    )

    # Настройки логгирования
    LOG_LEVEL: str = "INFO"
    LOG_TO_FILE: bool = False
    LOG_FILE_PATH: Path = BASE_DIR / "logs" / "mixlab.log"

    # Число сцен, обрабатываемых параллельно (по умолчанию для --jobs)
    JOBS: int = Field(1, ge=1)


@lru_cache
def get_config() -> AppSettings:
    """
    Загружает конфигурацию приложения и возвращает единственный экземпляр AppSettings.

    Использует кеширование для предотвращения повторного чтения файла .env при каждом вызове.

    Returns:
        AppSettings: Кешированный экземпляр настроек приложения.

    Raises:
        ConfigError: Если во время валидации конфигурации возникает ошибка.
    """
    try:
        return AppSettings(_env_file=ENV_FILE_PATH)
    except Exception as e:
        raise ConfigError(f"Ошибка при валидации конфигурации: {e}") from e


def reload_config() -> AppSettings:
    """
    Перезагружает конфигурацию, очищая кеш, и возвращает новый экземпляр.

    Returns:
        AppSettings: Новый, перезагруженный экземпляр настроек приложения.
    """
    get_config.cache_clear()
    return get_config()


class PipelineConfig(BaseModel):
    """Конфигурация всего конвейера; JSON-файл может переопределить любое поле."""

    model_config = ConfigDict(frozen=True, extra="forbid", ser_json_inf_nan="constants")

    geometry: GeometryConfig = GeometryConfig()
    rir: RirConfig = RirConfig()
    mixer: MixerConfig = MixerConfig()
    synthetic: SyntheticSourceConfig = SyntheticSourceConfig()
    stft: StftConfig = StftConfig()
    cacgmm: CacgmmConfig = CacgmmConfig()
    beamformer: BeamformerConfig = BeamformerConfig()
    evaluation: EvaluationConfig = EvaluationConfig()


def load_pipeline_config(path: Optional[Path] = None) -> PipelineConfig:
    """
    Загружает конфигурацию конвейера из JSON.

    Args:
        path (Optional[Path]): Путь к файлу; None - значения по умолчанию.

    Returns:
        PipelineConfig: Проверенная конфигурация.

    Raises:
        ConfigError: Файл не найден, не является JSON или не проходит валидацию.
    """
    if path is None:
        return PipelineConfig()
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"Файл конфигурации не найден: {path}") from e
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Не удалось прочитать конфигурацию {path}: {e}") from e
    try:
        config = PipelineConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"Ошибка в конфигурации {path}: {e}") from e
    if config.stft.sample_rate != config.geometry.sample_rate:
        raise ConfigError("Частоты дискретизации STFT и геометрии различаются.")
    return config

