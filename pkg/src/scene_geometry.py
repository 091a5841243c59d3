"""
Случайная геометрия сцены: комната, круговой микрофонный массив и дикторы.

Порядок выборки фиксирован (см. ``sample_scene``), поэтому одинаковые
``(seed, config)`` всегда дают побитово одинаковую сцену.
"""
import json
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

# Именованные потоки случайных чисел, порождаемые из seed сцены.
RNG_STREAMS = {
    "geometry": 0,
    "offsets": 1,
    "noise": 2,
    "sources": 3,
    "cacgmm": 4,
}

Range = tuple[float, float]
Vector3 = tuple[float, float, float]


class GeometryError(Exception):
    """
    Ошибка конфигурации или выборки геометрии.

    Attributes:
        details (Any): Дополнительная информация (например, число попыток).
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


def make_rng(seed: int, stream: str = "geometry") -> np.random.Generator:
    """
    Возвращает независимый генератор для именованного потока сцены.

    Args:
        seed (int): 64-битный seed сцены.
        stream (str): Имя потока из ``RNG_STREAMS``.

    Returns:
        np.random.Generator: Генератор PCG64, детерминированный по (seed, stream).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), RNG_STREAMS[stream]]))


def derive_scene_seed(master_seed: int, scene_index: int) -> int:
    """Выводит 64-битный seed сцены из (master_seed, scene_index)."""
    state = np.random.SeedSequence([int(master_seed), int(scene_index)]).generate_state(1, dtype=np.uint64)
    return int(state[0])


class GeometryConfig(BaseModel):
    """Диапазоны равномерной выборки геометрии (метры, секунды, дБ, радианы)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    room_length_range: Range = (7.6, 8.4)
    room_width_range: Range = (5.6, 6.4)
    room_height_range: Range = (2.6, 3.4)
    # Положение центра массива относительно угла комнаты
    array_x_range: Range = (3.6, 4.4)
    array_y_range: Range = (2.6, 3.4)
    array_height_range: Range = (1.0, 1.5)
    source_height_range: Range = (1.4, 1.9)
    array_radius: float = Field(0.10, gt=0)
    num_mics: int = Field(6, ge=2)
    num_sources: int = Field(2, ge=1)
    source_distance_range: Range = (1.0, 2.0)
    t60_range: Range = (0.2, 0.5)
    snr_range: Range = (20.0, 30.0)
    tilt_max: float = Field(0.1, ge=0)
    sample_rate: int = Field(8000, gt=0)
    wall_clearance: float = Field(0.1, ge=0)
    max_attempts: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "GeometryConfig":
        for name in type(self).model_fields:
            value = getattr(self, name)
            if name.endswith("_range") and value[0] > value[1]:
                raise ValueError(f"{name}: нижняя граница больше верхней ({value[0]} > {value[1]})")
        min_half_dim = min(self.room_length_range[0], self.room_width_range[0]) / 2
        if self.array_radius + self.source_distance_range[1] >= min_half_dim:
            raise ValueError("Радиус массива и дальность источников не помещаются в половину комнаты.")
        if self.t60_range[0] <= 0:
            raise ValueError("T60 должно быть положительным.")
        return self


class SceneGeometry(BaseModel):
    """Выбранная сцена. Все величины в единицах СИ; JSON-схема совпадает с полями."""

    model_config = ConfigDict(frozen=True)

    scene_id: str
    seed: int
    sample_rate: int
    room_dims: Vector3
    array_center: Vector3
    array_rotation: Vector3  # (x-наклон, y-наклон, поворот по z), радианы
    array_radius: float
    wall_clearance: float = 0.1
    mic_positions: list[Vector3]
    source_positions: list[Vector3]
    t60: float
    snr: float

    @property
    def mics(self) -> np.ndarray:
        """Позиции микрофонов, (D, 3)."""
        return np.asarray(self.mic_positions, dtype=float)

    @property
    def sources(self) -> np.ndarray:
        """Позиции источников, (K, 3)."""
        return np.asarray(self.source_positions, dtype=float)

    @property
    def num_mics(self) -> int:
        return len(self.mic_positions)

    @property
    def num_sources(self) -> int:
        return len(self.source_positions)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneGeometry":
        return cls.model_validate(json.loads(text))


def rotation_matrix(tilt_x: float, tilt_y: float, yaw: float) -> np.ndarray:
    """Матрица поворота R = Rz(yaw) @ Ry(tilt_y) @ Rx(tilt_x)."""
    cx, sx = math.cos(tilt_x), math.sin(tilt_x)
    cy, sy = math.cos(tilt_y), math.sin(tilt_y)
    cz, sz = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def circular_array(center: np.ndarray, radius: float, num_mics: int, rotation: np.ndarray) -> np.ndarray:
    """
    Микрофоны на окружности радиуса ``radius`` с равным угловым шагом
    (60° для шести микрофонов), повернутые матрицей ``rotation``.

    Returns:
        np.ndarray: Позиции микрофонов, (num_mics, 3).
    """
    angles = 2 * np.pi * np.arange(num_mics) / num_mics
    ring = radius * np.stack([np.cos(angles), np.sin(angles), np.zeros(num_mics)], axis=-1)
    return np.asarray(center, dtype=float) + ring @ rotation.T


def _inside(point: np.ndarray, room_dims: np.ndarray, clearance: float) -> bool:
    return bool(np.all(point >= clearance) and np.all(point <= room_dims - clearance))


def sample_scene(config: GeometryConfig, seed: int, scene_id: Optional[str] = None) -> SceneGeometry:
    """
    Выбирает случайную сцену.

    Порядок выборки: длина, ширина, высота комнаты; x, y, z центра массива;
    поворот по z ~ U(0, 2π), наклоны по x и y ~ U(-tilt_max, tilt_max);
    T60; SNR; затем для каждого источника: расстояние, азимут, высота.
    Источник, не поместившийся в комнату с зазором ``wall_clearance``,
    выбирается заново (не более ``max_attempts`` попыток на сцену).

    Args:
        config (GeometryConfig): Диапазоны выборки.
        seed (int): Seed сцены.
        scene_id (Optional[str]): Идентификатор; по умолчанию строится из seed.

    Returns:
        SceneGeometry: Сцена, удовлетворяющая инвариантам ``validate_scene``.

    Raises:
        GeometryError: Если за ``max_attempts`` попыток не удалось разместить источники.
    """
    rng = make_rng(seed, "geometry")

    def uniform(bounds: Range) -> float:
        return float(rng.uniform(bounds[0], bounds[1]))

    room = np.array([uniform(config.room_length_range), uniform(config.room_width_range),
                     uniform(config.room_height_range)])
    center = np.array([uniform(config.array_x_range), uniform(config.array_y_range),
                       uniform(config.array_height_range)])
    yaw = uniform((0.0, 2 * np.pi))
    tilt_x = uniform((-config.tilt_max, config.tilt_max))
    tilt_y = uniform((-config.tilt_max, config.tilt_max))
    t60 = uniform(config.t60_range)
    snr = uniform(config.snr_range)

    mics = circular_array(center, config.array_radius, config.num_mics, rotation_matrix(tilt_x, tilt_y, yaw))
    if not all(_inside(m, room, config.wall_clearance) for m in mics):
        raise GeometryError("Микрофонный массив не помещается в комнату.", details={"seed": seed})

    sources = []
    attempts = 0
    while len(sources) < config.num_sources:
        attempts += 1
        if attempts > config.max_attempts:
            raise GeometryError(
                f"Не удалось разместить источники за {config.max_attempts} попыток: конфигурация невыполнима.",
                details={"seed": seed, "placed": len(sources)},
            )
        distance = uniform(config.source_distance_range)
        azimuth = uniform((0.0, 2 * np.pi))
        height = uniform(config.source_height_range)
        dz = height - center[2]
        if abs(dz) >= distance:
            continue
        horizontal = math.sqrt(distance ** 2 - dz ** 2)
        position = center + np.array([horizontal * math.cos(azimuth), horizontal * math.sin(azimuth), dz])
        if _inside(position, room, config.wall_clearance):
            sources.append(position)

    scene = SceneGeometry(
        scene_id=scene_id or f"scene_{seed:020d}",
        seed=int(seed),
        sample_rate=config.sample_rate,
        room_dims=tuple(room.tolist()),
        array_center=tuple(center.tolist()),
        array_rotation=(tilt_x, tilt_y, yaw),
        array_radius=config.array_radius,
        wall_clearance=config.wall_clearance,
        mic_positions=[tuple(m.tolist()) for m in mics],
        source_positions=[tuple(s.tolist()) for s in sources],
        t60=t60,
        snr=snr,
    )
    logger.debug(f"Сцена {scene.scene_id} выбрана за {attempts} попыток размещения источников.")
    return scene


def validate_scene(scene: SceneGeometry, config: Optional[GeometryConfig] = None) -> list[str]:
    """
    Проверяет инварианты сцены. Нарушения возвращаются как данные.

    Args:
        scene (SceneGeometry): Проверяемая сцена.
        config (Optional[GeometryConfig]): Диапазоны для проверки расстояний
            до источников; по умолчанию ``GeometryConfig()``.

    Returns:
        list[str]: Пустой список, если все инварианты выполнены.
    """
    config = config or GeometryConfig()
    violations = []
    room = np.asarray(scene.room_dims)
    center = np.asarray(scene.array_center)

    for index, mic in enumerate(scene.mics):
        if not _inside(mic, room, scene.wall_clearance):
            violations.append(f"mic {index} outside clearance")
    radii = np.linalg.norm(scene.mics - center, axis=-1)
    if np.any(np.abs(radii - scene.array_radius) > 1e-9):
        violations.append("mic ring radius mismatch")

    low, high = config.source_distance_range
    for index, source in enumerate(scene.sources):
        if not _inside(source, room, scene.wall_clearance):
            violations.append(f"source {index} outside clearance")
        distance = float(np.linalg.norm(source - center))
        if not low - 1e-9 <= distance <= high + 1e-9:
            violations.append(f"source {index} distance out of range")

    if scene.t60 <= 0:
        violations.append("non-positive t60")
    return violations


def angular_distance(scene: SceneGeometry, first: int = 0, second: int = 1) -> float:
    """
    Угол (в градусах, 0..180) между двумя источниками, видимыми из центра массива,
    в горизонтальной плоскости.
    """
    if scene.num_sources <= max(first, second):
        return float("nan")
    offsets = scene.sources[[first, second], :2] - np.asarray(scene.array_center)[:2]
    azimuths = np.arctan2(offsets[:, 1], offsets[:, 0])
    difference = abs(azimuths[0] - azimuths[1]) % (2 * np.pi)
    return float(np.degrees(min(difference, 2 * np.pi - difference)))


def load_scene(path: Path) -> SceneGeometry:
    """Читает сцену из JSON-файла."""
    return SceneGeometry.from_json(Path(path).read_text(encoding="utf-8"))
