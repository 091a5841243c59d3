"""
Кратковременное преобразование Фурье: окно Ханна 512, ДПФ 512, сдвиг 128.

Перед разбиением на кадры сигнал дополняется нулями на size − shift
отсчетов с обеих сторон (и до целого числа кадров в конце), поэтому каждый
исходный отсчет покрыт одинаковым числом кадров и восстанавливается точно.
"""
import logging
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.signal import get_window

logger = logging.getLogger(__name__)


class StftError(Exception):
    """
    Ошибка анализа или синтеза STFT.

    Attributes:
        details (Any): Дополнительная информация об ошибке.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class StftConfig(BaseModel):
    """Параметры STFT."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    window: str = "hann"
    size: int = Field(512, gt=0)
    dft_size: int = Field(512, gt=0)
    shift: int = Field(128, gt=0)
    sample_rate: int = Field(8000, gt=0)

    @model_validator(mode="after")
    def _check_framing(self) -> "StftConfig":
        if self.size % self.shift != 0:
            raise ValueError(f"Сдвиг {self.shift} должен делить длину окна {self.size}.")
        if self.dft_size < self.size:
            raise ValueError(f"Размер ДПФ {self.dft_size} меньше длины окна {self.size}.")
        return self

    @property
    def num_bins(self) -> int:
        return self.dft_size // 2 + 1

    @property
    def padding(self) -> int:
        return self.size - self.shift

    def analysis_window(self) -> np.ndarray:
        """Периодическое окно анализа."""
        return get_window(self.window, self.size, fftbins=True)

    def synthesis_window(self) -> np.ndarray:
        """Двойственное окно (наименьшие квадраты): w / Σ_m w²(n − m·shift)."""
        window = self.analysis_window()
        overlap = np.sum((window ** 2).reshape(-1, self.shift), axis=0)
        return window / np.tile(overlap, self.size // self.shift)

    def window_gain(self) -> float:
        """Σ_m w²(n − m·shift): энергетический множитель кадрирования (постоянен для COLA-окон)."""
        window = self.analysis_window()
        return float(np.mean(np.sum((window ** 2).reshape(-1, self.shift), axis=0)))


@dataclass
class TFTensor:
    """
    Комплексный спектр с осями (..., канал, кадр, частота).

    Attributes:
        data: Комплексный массив (D, T, F); допускаются дополнительные ведущие оси.
        config: Параметры STFT, которыми получен спектр.
        num_samples: Длина исходного сигнала во временной области.
    """
    data: np.ndarray
    config: StftConfig
    num_samples: int

    @property
    def num_channels(self) -> int:
        return self.data.shape[-3]

    @property
    def num_frames(self) -> int:
        return self.data.shape[-2]

    @property
    def num_bins(self) -> int:
        return self.data.shape[-1]

    def with_data(self, data: np.ndarray) -> "TFTensor":
        """Тот же формат кадров с другими значениями (например, после маскирования)."""
        return TFTensor(data=data, config=self.config, num_samples=self.num_samples)


def num_frames(num_samples: int, config: StftConfig) -> int:
    """Число кадров для сигнала длины ``num_samples`` с учетом дополнения."""
    padded = num_samples + 2 * config.padding
    return int(np.ceil((padded - config.size) / config.shift)) + 1


def analyze(signal: np.ndarray, config: Optional[StftConfig] = None) -> TFTensor:
    """
    Прямое STFT многоканального сигнала.

    Args:
        signal (np.ndarray): Сигнал (..., L); одномерный вход считается одним каналом.
        config (Optional[StftConfig]): Параметры преобразования.

    Returns:
        TFTensor: Спектр формы (..., D, T, F).

    Raises:
        StftError: Если сигнал короче окна или содержит NaN/inf.
    """
    config = config or StftConfig()
    signal = np.asarray(signal, dtype=float)
    if signal.ndim == 1:
        signal = signal[None]
    length = signal.shape[-1]
    if length < config.size:
        raise StftError(f"Сигнал длины {length} короче окна STFT ({config.size}).")
    if not np.all(np.isfinite(signal)):
        raise StftError("Сигнал содержит NaN или бесконечные значения.")

    frames_count = num_frames(length, config)
    total = (frames_count - 1) * config.shift + config.size
    pad_width = [(0, 0)] * (signal.ndim - 1) + [(config.padding, total - length - config.padding)]
    padded = np.pad(signal, pad_width)
    frames = sliding_window_view(padded, config.size, axis=-1)[..., ::config.shift, :]
    spectrum = np.fft.rfft(frames * config.analysis_window(), n=config.dft_size, axis=-1)
    return TFTensor(data=spectrum, config=config, num_samples=length)


def synthesize(tf: TFTensor, config: Optional[StftConfig] = None, num_samples: Optional[int] = None) -> np.ndarray:
    """
    Обратное STFT: перекрытие со сложением с двойственным окном.

    Args:
        tf (TFTensor): Спектр (..., T, F).
        config (Optional[StftConfig]): Параметры; должны совпадать с ``tf.config``.
        num_samples (Optional[int]): Длина результата; по умолчанию ``tf.num_samples``.

    Returns:
        np.ndarray: Сигнал формы (..., L).

    Raises:
        StftError: Если параметры не совпадают с параметрами спектра.
    """
    config = config or tf.config
    if config != tf.config:
        raise StftError("Параметры синтеза не совпадают с параметрами анализа.")
    if tf.data.shape[-1] != config.num_bins:
        raise StftError(f"Ожидалось {config.num_bins} частотных бинов, получено {tf.data.shape[-1]}.")
    num_samples = tf.num_samples if num_samples is None else num_samples

    frames = np.fft.irfft(tf.data, n=config.dft_size, axis=-1)[..., :config.size] * config.synthesis_window()
    count = frames.shape[-2]
    output = np.zeros(frames.shape[:-2] + ((count - 1) * config.shift + config.size,))
    for t in range(count):
        output[..., t * config.shift:t * config.shift + config.size] += frames[..., t, :]
    output = output[..., config.padding:config.padding + num_samples]
    if output.shape[-1] < num_samples:
        output = np.pad(output, [(0, 0)] * (output.ndim - 1) + [(0, num_samples - output.shape[-1])])
    return output


def tf_energy(data: np.ndarray, config: Optional[StftConfig] = None) -> np.ndarray:
    """
    Энергия сигнала во временной области, оцененная по его спектру (Парсеваль).

    Одностороннему спектру возвращаются веса 2 у внутренних бинов; результат
    делится на размер ДПФ и на коэффициент усиления окна, так что для
    спектра ``analyze(x)`` получается Σ x² с точностью округления.

    Args:
        data (np.ndarray): Комплексный спектр (..., T, F).
        config (Optional[StftConfig]): Параметры STFT.

    Returns:
        np.ndarray: Энергия по ведущим осям.
    """
    config = config or StftConfig()
    weights = np.full(data.shape[-1], 2.0)
    weights[0] = 1.0
    if config.dft_size % 2 == 0:
        weights[-1] = 1.0
    power = np.sum(np.abs(data) ** 2 * weights, axis=(-2, -1))
    return power / (config.dft_size * config.window_gain())
