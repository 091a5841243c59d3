"""
Сборка наблюдений: выравнивание длины со случайным смещением, свертка с ИХ,
белый сенсорный шум с заданным SNR.

Порядок построения фиксирован: сначала образы, затем шум, затем сумма,
поэтому y − Σ_k x_k − n равно нулю с точностью округления.
"""
import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.signal import fftconvolve

from src.rir_engine import RIRSet, RirConfig, simulate_rir
from src.scene_geometry import SceneGeometry, make_rng

logger = logging.getLogger(__name__)


class MixingError(Exception):
    """
    Ошибка сборки смеси.

    Attributes:
        details (Any): Дополнительная информация об ошибке.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class MixerConfig(BaseModel):
    """Параметры сборки смеси."""

    model_config = ConfigDict(frozen=True, extra="forbid", ser_json_inf_nan="constants")

    # Если задано, заменяет SNR сцены (float("inf") - без шума)
    snr_override: Optional[float] = None


@dataclass
class MixtureBundle:
    """
    Все сигналы одной сцены во временной области.

    Attributes:
        s: Исходные сигналы после выравнивания, (K, L).
        offset: Смещения выравнивания, (K,).
        x, x_early, x_late: Образы речи на микрофонах, (K, D, L).
        n: Сенсорный шум, (D, L).
        y: Наблюдение, (D, L).
        snr: SNR, дБ.
        sample_rate: Частота дискретизации, Гц.
        rirs: ИХ, по которым построены образы.
    """
    s: np.ndarray
    offset: np.ndarray
    x: np.ndarray
    x_early: np.ndarray
    x_late: np.ndarray
    n: np.ndarray
    y: np.ndarray
    snr: float
    sample_rate: int
    rirs: Optional[RIRSet] = None

    @property
    def num_speakers(self) -> int:
        return self.s.shape[0]

    @property
    def num_samples(self) -> int:
        return self.y.shape[-1]


def pad_with_random_offset(sources: Sequence[np.ndarray], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Дополняет нулями все высказывания до длины самого длинного.

    Самое длинное получает смещение 0; остальные - смещение ~ U{0, …, L_max − L_k}
    в начале и оставшиеся нули в конце.

    Args:
        sources (Sequence[np.ndarray]): Моно-сигналы.
        seed (int): Seed сцены (поток "offsets").

    Returns:
        tuple[np.ndarray, np.ndarray]: Матрица (K, L_max) и смещения (K,).

    Raises:
        MixingError: Если список источников пуст.
    """
    if len(sources) == 0:
        raise MixingError("Пустой список источников.")
    rng = make_rng(seed, "offsets")
    lengths = np.array([len(s) for s in sources])
    max_length = int(lengths.max())
    padded = np.zeros((len(sources), max_length))
    offsets = np.zeros(len(sources), dtype=np.int64)
    for k, (source, length) in enumerate(zip(sources, lengths)):
        slack = max_length - int(length)
        offsets[k] = int(rng.integers(0, slack, endpoint=True)) if slack > 0 else 0
        padded[k, offsets[k]:offsets[k] + length] = np.asarray(source, dtype=float)
    return padded, offsets


def relative_overlap(lengths: Sequence[int], offsets: Sequence[int]) -> float:
    """
    Доля смеси, в которой активны оба первых высказывания (по границам
    после выравнивания, без учета пауз внутри высказываний).
    """
    if len(lengths) < 2:
        return 0.0
    ends = [int(o) + int(n) for o, n in zip(offsets, lengths)]
    total = max(ends) - min(int(o) for o in offsets)
    overlap = min(ends[0], ends[1]) - max(int(offsets[0]), int(offsets[1]))
    return max(overlap, 0) / total if total > 0 else 0.0


def render_images(sources: np.ndarray, rirs: RIRSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Сворачивает выровненные источники с полной, ранней и поздней ИХ.

    Args:
        sources (np.ndarray): Выровненные источники, (K, L).
        rirs (RIRSet): ИХ той же сцены с ранней/поздней частями.

    Returns:
        tuple: x, x_early, x_late формы (K, D, L), обрезанные до длины наблюдения.

    Raises:
        MixingError: Если число источников не совпадает с числом ИХ.
    """
    sources = np.atleast_2d(np.asarray(sources, dtype=float))
    if sources.shape[0] != rirs.num_sources:
        raise MixingError(
            f"Число источников ({sources.shape[0]}) не совпадает с числом ИХ ({rirs.num_sources})."
        )
    if rirs.h_early is None or rirs.h_late is None:
        raise MixingError("ИХ не разделены на раннюю и позднюю части.")
    length = sources.shape[-1]

    def convolve(filters: np.ndarray) -> np.ndarray:
        return fftconvolve(sources[:, None, :], filters, axes=-1)[..., :length]

    return convolve(rirs.h), convolve(rirs.h_early), convolve(rirs.h_late)


def add_sensor_noise(images: np.ndarray, snr_db: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Добавляет белый гауссов шум одинаковой дисперсии во все каналы.

    Опорная мощность - средняя по каналам и отсчетам мощность суммы образов.

    Args:
        images (np.ndarray): Образы речи, (K, D, L).
        snr_db (float): SNR, дБ; +inf - без шума.
        seed (int): Seed сцены (поток "noise").

    Returns:
        tuple[np.ndarray, np.ndarray]: Наблюдение y и шум n, оба (D, L).

    Raises:
        MixingError: Если SNR - NaN или образы нулевые.
    """
    if np.isnan(snr_db):
        raise MixingError("SNR не задан (NaN).")
    speech = np.sum(images, axis=0)
    power = float(np.mean(speech ** 2))
    if power == 0:
        raise MixingError("Образы речи нулевые: SNR не определен.")
    if np.isposinf(snr_db):
        noise = np.zeros_like(speech)
    else:
        noise = make_rng(seed, "noise").standard_normal(speech.shape) * np.sqrt(power / 10 ** (snr_db / 10))
    return speech + noise, noise


def build_scene_bundle(
        scene: SceneGeometry,
        sources: Sequence[np.ndarray],
        seed: Optional[int] = None,
        rir_config: Optional[RirConfig] = None,
        config: Optional[MixerConfig] = None,
        rirs: Optional[RIRSet] = None,
) -> MixtureBundle:
    """
    Полный цикл для одной сцены: выравнивание → ИХ → образы → шум.

    Args:
        scene (SceneGeometry): Сцена.
        sources (Sequence[np.ndarray]): Моно-сигналы источников (по одному на источник сцены).
        seed (Optional[int]): Seed; по умолчанию seed сцены.
        rir_config (Optional[RirConfig]): Параметры симулятора ИХ.
        config (Optional[MixerConfig]): Параметры смешивания.
        rirs (Optional[RIRSet]): Готовые ИХ (если уже смоделированы).

    Returns:
        MixtureBundle: Все сигналы сцены.
    """
    config = config or MixerConfig()
    seed = scene.seed if seed is None else seed
    if len(sources) != scene.num_sources:
        raise MixingError(f"Сцена {scene.scene_id} ожидает {scene.num_sources} источников, получено {len(sources)}.")
    padded, offsets = pad_with_random_offset(sources, seed)
    rirs = rirs if rirs is not None else simulate_rir(scene, config=rir_config)
    x, x_early, x_late = render_images(padded, rirs)
    snr = scene.snr if config.snr_override is None else config.snr_override
    y, n = add_sensor_noise(x, snr, seed)
    logger.debug(f"Смесь {scene.scene_id}: {padded.shape[-1]} отсчетов, SNR {snr:.2f} дБ, смещения {offsets.tolist()}.")
    return MixtureBundle(s=padded, offset=offsets, x=x, x_early=x_early, x_late=x_late, n=n, y=y,
                         snr=float(snr), sample_rate=scene.sample_rate, rirs=rirs)
