import json

import pytest
from unittest.mock import patch
from src import config
from src.config import ConfigError, PipelineConfig, get_config, load_pipeline_config, reload_config


@pytest.fixture(autouse=True)
def cleanup_config_cache():
    """Фикстура для автоматической очистки кеша get_config перед каждым тестом."""
    get_config.cache_clear()
    yield
    get_config.cache_clear()


@pytest.fixture
def mock_env_file(tmp_path, monkeypatch):
    """Фикстура для создания временного .env файла и подмены пути к нему."""
    env_path = tmp_path / ".env"
    monkeypatch.setattr(config, "ENV_FILE_PATH", env_path)
    for key in ("LOG_LEVEL", "LOG_TO_FILE", "JOBS"):
        monkeypatch.delenv(key, raising=False)
    return env_path


def test_app_settings_default_values(mock_env_file):
    """Тест, что AppSettings использует значения по умолчанию, если нет других источников."""
    settings = get_config()

    assert settings.LOG_LEVEL == "INFO"
    assert settings.LOG_TO_FILE is False
    assert settings.JOBS == 1


def test_app_settings_load_from_env_file(mock_env_file):
    """Тест, что AppSettings корректно загружает значения из .env файла."""
    mock_env_file.write_text(
        'LOG_LEVEL="DEBUG"\n'
        'JOBS=4\n'
        'UNRELATED_KEY="ignored"'
    )

    settings = get_config()

    assert settings.LOG_LEVEL == "DEBUG"
    assert settings.JOBS == 4


def test_app_settings_env_variable_overrides_file(mock_env_file, monkeypatch):
    """Тест, что переменная окружения имеет приоритет над .env файлом."""
    mock_env_file.write_text('LOG_LEVEL="DEBUG"')
    monkeypatch.setenv("LOG_LEVEL", "WARNING")

    settings = get_config()

    assert settings.LOG_LEVEL == "WARNING"


def test_app_settings_rejects_zero_jobs(mock_env_file):
    """Тест, что JOBS=0 дает ConfigError."""
    mock_env_file.write_text("JOBS=0")

    with pytest.raises(ConfigError, match="Ошибка при валидации конфигурации"):
        get_config()


def test_get_config_is_cached(mock_env_file):
    """Тест, что get_config() кеширует результат и возвращает один и тот же объект."""
    config1 = get_config()
    config2 = get_config()

    assert config1 is config2


def test_reload_config_clears_cache(mock_env_file, monkeypatch):
    """Тест, что reload_config() сбрасывает кеш и загружает новые значения."""
    monkeypatch.setenv("LOG_LEVEL", "INFO")
    config1 = get_config()
    assert config1.LOG_LEVEL == "INFO"

    monkeypatch.setenv("LOG_LEVEL", "DEBUG")
    config2 = get_config()
    assert config2.LOG_LEVEL == "INFO"
    assert config1 is config2

    config3 = reload_config()
    assert config3.LOG_LEVEL == "DEBUG"
    assert config1 is not config3


@patch("src.config.AppSettings")
def test_get_config_raises_config_error_on_validation_error(mock_app_settings, mock_env_file):
    """Тест, что get_config выбрасывает ConfigError при ошибке валидации Pydantic."""
    mock_app_settings.side_effect = Exception("Pydantic validation failed")

    with pytest.raises(ConfigError, match="Pydantic validation failed"):
        get_config()


def test_load_pipeline_config_defaults():
    """Тест: без файла - значения по умолчанию."""
    pipeline = load_pipeline_config(None)

    assert pipeline == PipelineConfig()
    assert pipeline.stft.size == 512
    assert pipeline.stft.shift == 128
    assert pipeline.geometry.num_mics == 6
    assert pipeline.cacgmm.iterations == 100


def test_load_pipeline_config_partial_override(tmp_path):
    """Тест: JSON переопределяет только указанные поля."""
    path = tmp_path / "pipeline.json"
    path.write_text(json.dumps({"cacgmm": {"iterations": 7}, "geometry": {"t60_range": [0.3, 0.4]}}),
                    encoding="utf-8")

    pipeline = load_pipeline_config(path)

    assert pipeline.cacgmm.iterations == 7
    assert pipeline.geometry.t60_range == (0.3, 0.4)
    assert pipeline.stft == PipelineConfig().stft


@pytest.mark.parametrize("content, message", [
    ("{not json", "Не удалось прочитать"),
    ('{"unknown_section": {}}', "Ошибка в конфигурации"),
    ('{"cacgmm": {"iterations": 0}}', "Ошибка в конфигурации"),
    ('{"stft": {"sample_rate": 16000}}', "Частоты дискретизации"),
])
def test_load_pipeline_config_invalid(tmp_path, content, message):
    """Тест: некорректный файл конфигурации - ConfigError."""
    path = tmp_path / "pipeline.json"
    path.write_text(content, encoding="utf-8")

    with pytest.raises(ConfigError, match=message):
        load_pipeline_config(path)


def test_load_pipeline_config_missing_file(tmp_path):
    """Тест: отсутствующий файл - ConfigError."""
    with pytest.raises(ConfigError, match="не найден"):
        load_pipeline_config(tmp_path / "absent.json")


def test_pipeline_config_json_round_trip():
    """Тест: сериализованная конфигурация загружается обратно без потерь, включая inf."""
    original = PipelineConfig.model_validate({"mixer": {"snr_override": float("inf")}})

    restored = PipelineConfig.model_validate_json(original.model_dump_json())

    assert restored == original
