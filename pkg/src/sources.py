"""
Исходные сигналы дикторов: моно-WAV с диска или синтетический «речеподобный» сигнал.
"""
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.signal import lfilter, resample_poly

from src.scene_geometry import derive_scene_seed, make_rng
from src.storage import StorageError, read_wav

logger = logging.getLogger(__name__)


class SyntheticSourceConfig(BaseModel):
    """
    Параметры синтетического источника: гауссов шум через AR(2)-фильтр
    с резонансом в речевой полосе, слоговая амплитудная модуляция 4 Гц
    и случайные паузы.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    duration_range: tuple[float, float] = (2.0, 4.0)
    pole_radius: float = Field(0.9, gt=0, lt=1)
    pole_frequency_range: tuple[float, float] = (300.0, 1500.0)
    modulation_rate: float = Field(4.0, gt=0)
    silence_probability: float = Field(0.2, ge=0, lt=1)
    segment_duration: float = Field(0.25, gt=0)
    rms: float = Field(0.1, gt=0)


def synthesize_speech_like(config: Optional[SyntheticSourceConfig] = None, sample_rate: int = 8000,
                           seed: int = 0, index: int = 0) -> np.ndarray:
    """
    Генерирует один синтетический источник.

    Args:
        config (Optional[SyntheticSourceConfig]): Параметры генератора.
        sample_rate (int): Частота дискретизации, Гц.
        seed (int): Seed сцены.
        index (int): Номер источника в сцене.

    Returns:
        np.ndarray: Моно-сигнал с заданным RMS.
    """
    config = config or SyntheticSourceConfig()
    rng = make_rng(derive_scene_seed(seed, index), "sources")
    length = int(round(rng.uniform(*config.duration_range) * sample_rate))

    frequency = rng.uniform(*config.pole_frequency_range)
    a1 = -2 * config.pole_radius * math.cos(2 * math.pi * frequency / sample_rate)
    signal = lfilter([1.0], [1.0, a1, config.pole_radius ** 2], rng.standard_normal(length))

    t = np.arange(length) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.5 * (1 - np.cos(2 * np.pi * config.modulation_rate * t + phase))

    segment = max(1, int(round(config.segment_duration * sample_rate)))
    num_segments = int(math.ceil(length / segment))
    active = rng.random(num_segments) >= config.silence_probability
    if not np.any(active):
        active[rng.integers(num_segments)] = True
    gate = np.repeat(active, segment)[:length].astype(float)

    signal = signal * envelope * gate
    return signal * (config.rms / np.sqrt(np.mean(signal ** 2)))


def load_source(path: Path, sample_rate: int = 8000) -> np.ndarray:
    """
    Загружает моно-WAV и при необходимости передискретизирует его.

    Raises:
        StorageError: Если файл не моно или пустой.
    """
    data, file_rate = read_wav(path)
    if data.shape[0] != 1:
        raise StorageError(f"Ожидался моно-сигнал, в {path} каналов: {data.shape[0]}.", details=str(path))
    signal = data[0]
    if signal.size == 0 or not np.any(signal):
        raise StorageError(f"Файл {path} пуст или содержит только тишину.", details=str(path))
    if file_rate != sample_rate:
        divisor = math.gcd(file_rate, sample_rate)
        logger.debug(f"Передискретизация {path.name}: {file_rate} → {sample_rate} Гц.")
        signal = resample_poly(signal, sample_rate // divisor, file_rate // divisor)
    return signal


def pick_sources(source_dir: Path, count: int, seed: int) -> list[Path]:
    """
    Детерминированно выбирает ``count`` разных WAV-файлов из папки.

    Raises:
        StorageError: Если файлов меньше, чем нужно.
    """
    files = sorted(Path(source_dir).glob("*.wav"))
    if len(files) < count:
        raise StorageError(f"В {source_dir} найдено {len(files)} WAV-файлов, нужно {count}.", details=str(source_dir))
    chosen = make_rng(seed, "sources").choice(len(files), size=count, replace=False)
    return [files[i] for i in chosen]
