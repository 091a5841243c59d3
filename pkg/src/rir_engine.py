"""
Моделирование импульсных характеристик помещения методом мнимых источников
(Allen–Berkley) с дробной задержкой через окно Ханна × sinc.

После моделирования задержка распространения компенсируется один раз на
источник, одинаково для всех микрофонов, а ИХ делится на раннюю (первые
50 мс после стартового отсчета) и позднюю части.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import stats

from src.scene_geometry import SceneGeometry

logger = logging.getLogger(__name__)

SABINE_CONSTANT = 0.161


class RirError(Exception):
    """
    Ошибка моделирования или обработки ИХ.

    Attributes:
        details (Any): Дополнительная информация об ошибке.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class InfeasibleT60Error(RirError):
    """T60 недостижимо для заданной комнаты (коэффициент поглощения ≥ 1)."""


class RirConfig(BaseModel):
    """Параметры симулятора ИХ."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sound_speed: float = Field(343.0, gt=0)
    kernel_taps: int = Field(81, ge=1)
    # -1: все мнимые источники, попадающие в окно ИХ
    max_order: int = Field(-1, ge=-1)
    rir_length_factor: float = Field(1.25, gt=0)
    early_window: float = Field(0.050, gt=0)
    chunk_size: int = Field(20000, ge=1)
    # Формула перевода T60 в поглощение стен
    absorption_model: Literal["sabine", "eyring"] = "sabine"

    @field_validator("kernel_taps")
    @classmethod
    def _odd_taps(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("Длина ядра дробной задержки должна быть нечетной.")
        return value


@dataclass
class RIRSet:
    """
    Набор ИХ для всех пар (источник, микрофон).

    Attributes:
        h: ИХ, форма (K, D, L).
        start_sample: Стартовый отсчет на источник (минимум по микрофонам), (K,).
        sample_rate: Частота дискретизации, Гц.
        t60_target: Заданное время реверберации, с.
        delay_compensation: Сколько отсчетов задержки распространения удалено на источник, (K,).
        reflection_coefficient: Коэффициент отражения стен β.
        h_early: Ранняя часть ИХ (или None до ``split_early_late``).
        h_late: Поздняя часть ИХ (или None до ``split_early_late``).
    """
    h: np.ndarray
    start_sample: np.ndarray
    sample_rate: int
    t60_target: float
    delay_compensation: np.ndarray
    reflection_coefficient: float
    h_early: Optional[np.ndarray] = None
    h_late: Optional[np.ndarray] = None

    @property
    def num_sources(self) -> int:
        return self.h.shape[0]

    @property
    def num_mics(self) -> int:
        return self.h.shape[1]

    @property
    def length(self) -> int:
        return self.h.shape[-1]


def t60_to_absorption(room_dims, t60: float, model: Literal["sabine", "eyring"] = "sabine") -> float:
    """
    Переводит T60 в коэффициент отражения стен.

    Сэбин: α = 0.161·V / (S·T60). Эйринг: α = 1 − exp(−0.161·V / (S·T60)).
    В обоих случаях β = sqrt(1 − α). Метод мнимых источников затухает
    по Эйрингу, поэтому при формуле Сэбина короткие T60 получаются короче заданных.

    Args:
        room_dims: Размеры комнаты (L, W, H), м.
        t60 (float): Время реверберации, с.
        model (str): "sabine" или "eyring".

    Returns:
        float: Коэффициент отражения β ∈ (0, 1).

    Raises:
        RirError: Если T60 или размеры комнаты неположительны.
        InfeasibleT60Error: Если α ≥ 1 (комната слишком мала или T60 слишком коротко).
    """
    length, width, height = (float(v) for v in room_dims)
    if t60 <= 0 or min(length, width, height) <= 0:
        raise RirError(f"Некорректные параметры: T60={t60}, комната={room_dims}.")
    volume = length * width * height
    surface = 2 * (length * width + length * height + width * height)
    alpha = SABINE_CONSTANT * volume / (surface * t60)
    if model == "eyring":
        alpha = -math.expm1(-alpha)
    if alpha >= 1:
        raise InfeasibleT60Error(
            f"T60={t60} с недостижимо для комнаты {room_dims}: коэффициент поглощения {alpha:.3f} ≥ 1.",
            details={"alpha": alpha},
        )
    return float(np.clip(math.sqrt(1 - alpha), np.finfo(float).tiny, 1 - np.finfo(float).eps))


def default_rir_length(t60: float, sample_rate: int, factor: float = 1.25) -> int:
    """Длина ИХ по умолчанию: ceil(factor·T60·fs) отсчетов."""
    return int(math.ceil(factor * t60 * sample_rate))


def _axis_images(source_coord: float, room_size: float, max_index: int):
    """Координаты мнимых источников вдоль одной оси и число отражений для каждого."""
    n = np.arange(-max_index, max_index + 1)
    coords, reflections = [], []
    for q in (0, 1):
        coords.append((1 - 2 * q) * source_coord + 2 * n * room_size)
        reflections.append(np.abs(n - q) + np.abs(n))
    return np.concatenate(coords), np.concatenate(reflections)


def fractional_delay_kernel(offsets: np.ndarray, taps: int) -> np.ndarray:
    """Окно Ханна × sinc, вычисленное в точках ``offsets`` (в отсчетах от центра)."""
    kernel = 0.5 * (1 + np.cos(2 * np.pi * offsets / taps)) * np.sinc(offsets)
    kernel[np.abs(offsets) >= taps / 2] = 0.0
    return kernel


def image_source_response(
        source,
        mics,
        room_dims,
        beta: float,
        horizon: int,
        sample_rate: int,
        max_order: int = -1,
        sound_speed: float = 343.0,
        kernel_taps: int = 81,
        chunk_size: int = 20000,
) -> np.ndarray:
    """
    Сырая ИХ одного источника на все микрофоны без компенсации задержки.

    Индекс 0 выходного буфера соответствует времени ``-(kernel_taps // 2)``
    отсчетов, чтобы ядро дробной задержки прямого пути не обрезалось.

    Args:
        source: Позиция источника (3,).
        mics: Позиции микрофонов (D, 3).
        room_dims: Размеры комнаты (3,).
        beta (float): Коэффициент отражения стен.
        horizon (int): Учитываются мнимые источники с задержкой ≤ horizon отсчетов.
        sample_rate (int): Частота дискретизации, Гц.
        max_order (int): Максимальный порядок отражений (-1 без ограничения).
        sound_speed (float): Скорость звука, м/с.
        kernel_taps (int): Длина ядра дробной задержки.
        chunk_size (int): Сколько мнимых источников обрабатывать за раз.

    Returns:
        np.ndarray: Буфер формы (D, horizon + kernel_taps + 1).
    """
    source = np.asarray(source, dtype=float)
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    room = np.asarray(room_dims, dtype=float)
    half = kernel_taps // 2
    buffer_len = horizon + 2 * half + 2
    max_distance = horizon / sample_rate * sound_speed

    axes = [_axis_images(source[a], room[a], int(math.ceil(max_distance / (2 * room[a]))) + 1) for a in range(3)]
    response = np.zeros((mics.shape[0], buffer_len))
    taps = np.arange(-half, half + 1)

    for d, mic in enumerate(mics):
        dx = (axes[0][0] - mic[0]) ** 2
        dy = (axes[1][0] - mic[1]) ** 2
        dz = (axes[2][0] - mic[2]) ** 2
        distance = np.sqrt(dx[:, None, None] + dy[None, :, None] + dz[None, None, :])
        order = axes[0][1][:, None, None] + axes[1][1][None, :, None] + axes[2][1][None, None, :]
        delay = distance / sound_speed * sample_rate
        keep = delay <= horizon
        if max_order >= 0:
            keep &= order <= max_order
        delay, distance, order = delay[keep], distance[keep], order[keep]
        amplitude = beta ** order / (4 * np.pi * distance)

        position = delay + half
        for begin in range(0, position.size, chunk_size):
            pos = position[begin:begin + chunk_size]
            base = np.floor(pos).astype(np.int64)
            index = base[:, None] + taps[None, :]
            values = fractional_delay_kernel(index - pos[:, None], kernel_taps)
            values *= amplitude[begin:begin + chunk_size, None]
            response[d] += np.bincount(index.ravel(), weights=values.ravel(), minlength=buffer_len)[:buffer_len]
    return response


def detect_rir_start(h: np.ndarray) -> int:
    """
    Находит стартовый отсчет ИХ.

    Для каждого канала - первый отсчет, у которого |h| больше максимума
    канала, деленного на десять; результат - минимум по каналам.

    Args:
        h (np.ndarray): ИХ одного источника, (D, L) или (L,).

    Returns:
        int: Индекс стартового отсчета.

    Raises:
        RirError: Если какой-либо канал целиком нулевой.
    """
    magnitude = np.abs(np.atleast_2d(np.asarray(h, dtype=float)))
    peaks = magnitude.max(axis=-1)
    if np.any(peaks == 0):
        raise RirError("Нельзя определить старт ИХ: канал состоит из нулей.")
    above = magnitude > peaks[:, None] / 10
    return int(np.argmax(above, axis=-1).min())


def split_early_late(rirs: RIRSet, early_window: float = 0.050) -> RIRSet:
    """
    Делит ИХ на раннюю и позднюю части по границе start + round(early_window·fs).

    Носители частей не пересекаются, поэтому h_early + h_late == h точно.
    Если граница выходит за длину ИХ, ранняя часть совпадает с полной ИХ.

    Args:
        rirs (RIRSet): ИХ с заполненным ``start_sample``.
        early_window (float): Длина раннего окна, с.

    Returns:
        RIRSet: Копия с заполненными ``h_early`` и ``h_late``.
    """
    h_early = np.zeros_like(rirs.h)
    h_late = np.zeros_like(rirs.h)
    window = int(round(early_window * rirs.sample_rate))
    for k, start in enumerate(rirs.start_sample):
        boundary = int(start) + window
        if boundary >= rirs.length:
            logger.warning(f"Граница ранней части ({boundary}) за пределами ИХ длины {rirs.length}: "
                           f"поздняя часть источника {k} пуста.")
        h_early[k, :, :boundary] = rirs.h[k, :, :boundary]
        h_late[k, :, boundary:] = rirs.h[k, :, boundary:]
    return dataclasses.replace(rirs, h_early=h_early, h_late=h_late)


def simulate_rir(
        scene: SceneGeometry,
        max_order: Optional[int] = None,
        rir_length: Optional[int] = None,
        config: Optional[RirConfig] = None,
        compensate_delay: bool = True,
) -> RIRSet:
    """
    Моделирует ИХ всех пар (источник, микрофон) сцены.

    Задержка распространения удаляется один раз на источник сдвигом всех
    каналов на стартовый отсчет (минимум по микрофонам), так что
    межканальные задержки сохраняются. После сдвига старт пересчитывается
    и ИХ делится на раннюю/позднюю части.

    Args:
        scene (SceneGeometry): Сцена.
        max_order (Optional[int]): Максимальный порядок отражений; None - из конфигурации.
        rir_length (Optional[int]): Длина ИХ в отсчетах; None - ceil(1.25·T60·fs).
        config (Optional[RirConfig]): Параметры симулятора.
        compensate_delay (bool): Удалять ли общую задержку распространения.

    Returns:
        RIRSet: ИХ с заполненными ранней и поздней частями.

    Raises:
        RirError: Если геометрия вне комнаты или ИХ слишком короткая.
        InfeasibleT60Error: Если T60 недостижимо для комнаты.
    """
    config = config or RirConfig()
    max_order = config.max_order if max_order is None else max_order
    fs = scene.sample_rate
    rir_length = rir_length or default_rir_length(scene.t60, fs, config.rir_length_factor)
    half = config.kernel_taps // 2
    room = np.asarray(scene.room_dims)

    for name, points in (("микрофон", scene.mics), ("источник", scene.sources)):
        if np.any(points <= 0) or np.any(points >= room):
            raise RirError(f"{name.capitalize()} вне комнаты в сцене {scene.scene_id}.")

    beta = t60_to_absorption(room, scene.t60, config.absorption_model)
    direct = np.linalg.norm(scene.sources[:, None, :] - scene.mics[None, :, :], axis=-1) / config.sound_speed * fs
    if compensate_delay:
        if rir_length <= half:
            raise RirError(f"Длина ИХ {rir_length} меньше половины ядра дробной задержки.")
        horizon = rir_length + int(math.ceil(direct.max())) + half
    else:
        if direct.max() + half >= rir_length:
            raise RirError(f"Длина ИХ {rir_length} не вмещает прямой путь ({direct.max():.1f} отсчетов).")
        horizon = rir_length

    h = np.zeros((scene.num_sources, scene.num_mics, rir_length))
    shifts = np.zeros(scene.num_sources, dtype=np.int64)
    for k, source in enumerate(scene.sources):
        raw = image_source_response(source, scene.mics, room, beta, horizon, fs, max_order=max_order,
                                    sound_speed=config.sound_speed, kernel_taps=config.kernel_taps,
                                    chunk_size=config.chunk_size)
        offset = detect_rir_start(raw) if compensate_delay else half
        h[k] = raw[:, offset:offset + rir_length]
        shifts[k] = offset - half

    starts = np.array([detect_rir_start(h[k]) for k in range(scene.num_sources)], dtype=np.int64)
    logger.debug(f"ИХ сцены {scene.scene_id}: β={beta:.4f}, длина {rir_length}, компенсация {shifts.tolist()}.")
    rirs = RIRSet(h=h, start_sample=starts, sample_rate=fs, t60_target=scene.t60,
                  delay_compensation=shifts, reflection_coefficient=beta)
    return split_early_late(rirs, config.early_window)


def schroeder_curve(h: np.ndarray) -> np.ndarray:
    """Кривая спада энергии (обратное интегрирование Шрёдера) в дБ, нормированная к 0 дБ."""
    energy = np.cumsum(np.asarray(h, dtype=float)[::-1] ** 2)[::-1]
    if energy[0] <= 0:
        raise RirError("Нулевая ИХ: кривая Шрёдера не определена.")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def estimate_t60(h: np.ndarray, sample_rate: int, start_db: float = -5.0, end_db: float = -25.0) -> float:
    """
    Оценивает T60 по наклону кривой Шрёдера между ``start_db`` и ``end_db``
    (по умолчанию T20) с экстраполяцией до −60 дБ.

    Raises:
        RirError: Если кривая не опускается до ``end_db``.
    """
    curve = schroeder_curve(h)
    region = np.flatnonzero((curve <= start_db) & (curve >= end_db))
    if region.size < 2 or curve.min() > end_db:
        raise RirError(f"Кривая спада не достигает {end_db} дБ.")
    slope = stats.linregress(region / sample_rate, curve[region]).slope
    return float(-60.0 / slope)
