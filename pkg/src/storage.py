"""
Хранение данных: WAV (float32), ИХ и операторы улучшения (.npz), манифесты (JSON).

Манифест набора записывается атомарно: временный файл в той же папке
и переименование, так что при ошибке частичный манифест не остается.
"""
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.beamformer import BeamformerSolution, LinearOperator, MaskingOperator
from src.mixer import MixtureBundle
from src.rir_engine import RIRSet
from src.scene_geometry import SceneGeometry

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"
MANIFEST_NAME = "manifest.json"
SEPARATION_MANIFEST_NAME = "separation.json"
SCENES_DIR = "scenes"


class StorageError(Exception):
    """
    Ошибка чтения или записи файлов набора.

    Attributes:
        details (Any): Путь или исходное исключение.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


def write_wav(path: Path, data: np.ndarray, sample_rate: int) -> Path:
    """
    Записывает сигнал (C, L) или (L,) в WAV float32.

    Returns:
        Path: Путь к записанному файлу.
    """
    path = Path(path)
    data = np.asarray(data, dtype=float)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(path), np.atleast_2d(data).T.astype(np.float32), sample_rate, subtype="FLOAT")
    except (OSError, RuntimeError, sf.LibsndfileError) as e:
        raise StorageError(f"Не удалось записать {path}: {e}", details=str(path)) from e
    return path


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    """
    Читает WAV.

    Returns:
        tuple[np.ndarray, int]: Сигнал (C, L) в float64 и частота дискретизации.
    """
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Файл не найден: {path}", details=str(path))
    try:
        data, sample_rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as e:
        raise StorageError(f"Не удалось прочитать {path}: {e}", details=str(path)) from e
    return data.T, int(sample_rate)


def save_rirs(path: Path, rirs: RIRSet) -> Path:
    """Сохраняет набор ИХ в .npz (float64, без потерь)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, h=rirs.h, h_early=rirs.h_early, h_late=rirs.h_late, start_sample=rirs.start_sample,
             delay_compensation=rirs.delay_compensation, sample_rate=rirs.sample_rate,
             t60_target=rirs.t60_target, reflection_coefficient=rirs.reflection_coefficient)
    return path


def load_rirs(path: Path) -> RIRSet:
    """Загружает набор ИХ, сохраненный ``save_rirs``."""
    try:
        with np.load(Path(path)) as data:
            return RIRSet(h=data["h"], start_sample=data["start_sample"], sample_rate=int(data["sample_rate"]),
                          t60_target=float(data["t60_target"]), delay_compensation=data["delay_compensation"],
                          reflection_coefficient=float(data["reflection_coefficient"]),
                          h_early=data["h_early"], h_late=data["h_late"])
    except (OSError, KeyError, ValueError) as e:
        raise StorageError(f"Не удалось загрузить ИХ из {path}: {e}", details=str(path)) from e


def save_operator(path: Path, operator: LinearOperator) -> Path:
    """Сохраняет линейный оператор улучшения для инвазивного SDR."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(operator, BeamformerSolution):
        np.savez(path, kind="beamformer", weights=operator.weights, ref_channel=operator.ref_channel)
    elif isinstance(operator, MaskingOperator):
        np.savez(path, kind="masking", masks=operator.masks.astype(np.float32), ref_channel=operator.ref_channel)
    else:
        raise StorageError(f"Неизвестный тип оператора: {type(operator).__name__}.")
    return path


def load_operator(path: Path) -> LinearOperator:
    """Загружает оператор, сохраненный ``save_operator``."""
    try:
        with np.load(Path(path)) as data:
            kind = str(data["kind"])
            if kind == "beamformer":
                return BeamformerSolution(weights=data["weights"], ref_channel=data["ref_channel"])
            if kind == "masking":
                return MaskingOperator(masks=data["masks"].astype(float), ref_channel=int(data["ref_channel"]))
    except (OSError, KeyError, ValueError) as e:
        raise StorageError(f"Не удалось загрузить оператор из {path}: {e}", details=str(path)) from e
    raise StorageError(f"Неизвестный тип оператора в {path}: {kind}.")


class SceneEntry(BaseModel):
    """Запись о сцене в манифесте; пути файлов - относительно папки набора."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    scene_id: str
    seed: int
    directory: str
    files: dict[str, Union[str, list[str]]]
    geometry: SceneGeometry
    t60: float
    snr: float
    offsets: list[int]
    start_samples: list[int]
    num_samples: int
    sample_rate: int
    angular_distance_deg: Optional[float] = None
    relative_overlap: Optional[float] = None
    sources: list[str] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    """Манифест набора сцен."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    version: str = MANIFEST_VERSION
    master_seed: int
    config: dict = Field(default_factory=dict)
    entries: list[SceneEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _unique_ids(self) -> "DatasetManifest":
        ids = [entry.scene_id for entry in self.entries]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValueError(f"Повторяющиеся scene_id: {duplicates}")
        return self


class SeparationRecord(BaseModel):
    """Результат разделения одной сцены."""

    scene_id: str
    status: str
    estimates: list[str] = Field(default_factory=list)
    operator: Optional[str] = None
    error: Optional[str] = None


class SeparationManifest(BaseModel):
    """Манифест оценок одной системы."""

    version: str = MANIFEST_VERSION
    method: str
    records: list[SeparationRecord] = Field(default_factory=list)


def write_text_atomic(path: Path, text: str) -> Path:
    """Атомарно записывает текст: временный файл в той же папке и ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8") as temp_file:
            temp_file.write(text)
        os.replace(temp_name, path)
    except OSError as e:
        Path(temp_name).unlink(missing_ok=True)
        raise StorageError(f"Не удалось записать {path}: {e}", details=str(path)) from e
    return path


def write_manifest(path: Path, manifest: BaseModel) -> Path:
    """Записывает манифест (набора или разделения) атомарно."""
    return write_text_atomic(path, manifest.model_dump_json(indent=2))


def _load_model(path: Path, model: type[BaseModel]):
    path = Path(path)
    if path.is_dir():
        path = path / (MANIFEST_NAME if model is DatasetManifest else SEPARATION_MANIFEST_NAME)
    if not path.exists():
        raise StorageError(f"Манифест не найден: {path}", details=str(path))
    try:
        return model.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise StorageError(f"Некорректный манифест {path}: {e}", details=str(path)) from e


def load_manifest(path: Path) -> DatasetManifest:
    """Загружает манифест набора (путь к файлу или к папке набора)."""
    return _load_model(path, DatasetManifest)


def load_separation_manifest(path: Path) -> SeparationManifest:
    """Загружает манифест оценок (путь к файлу или к папке оценок)."""
    return _load_model(path, SeparationManifest)


def dataset_root(manifest_path: Path) -> Path:
    """Папка набора по пути к манифесту или к самой папке."""
    manifest_path = Path(manifest_path)
    return manifest_path if manifest_path.is_dir() else manifest_path.parent


def write_scene_json(path: Path, entry: SceneEntry) -> Path:
    return write_text_atomic(path, entry.model_dump_json(indent=2))


def scene_file_names(num_speakers: int) -> dict[str, Union[str, list[str]]]:
    """Имена файлов сцены внутри ее папки."""
    return {
        "observation": "observation.wav",
        "noise": "noise.wav",
        "speech_image": [f"speech_image_{k}.wav" for k in range(num_speakers)],
        "speech_image_early": [f"speech_image_early_{k}.wav" for k in range(num_speakers)],
        "speech_image_late": [f"speech_image_late_{k}.wav" for k in range(num_speakers)],
        "source": [f"source_{k}.wav" for k in range(num_speakers)],
        "rirs": "rirs.npz",
        "scene": "scene.json",
    }


def save_bundle(scene_dir: Path, bundle: MixtureBundle) -> dict[str, Union[str, list[str]]]:
    """
    Записывает все сигналы сцены в ее папку.

    Returns:
        dict: Имена записанных файлов (как ``scene_file_names``).
    """
    names = scene_file_names(bundle.num_speakers)
    fs = bundle.sample_rate
    write_wav(scene_dir / names["observation"], bundle.y, fs)
    write_wav(scene_dir / names["noise"], bundle.n, fs)
    for k in range(bundle.num_speakers):
        write_wav(scene_dir / names["speech_image"][k], bundle.x[k], fs)
        write_wav(scene_dir / names["speech_image_early"][k], bundle.x_early[k], fs)
        write_wav(scene_dir / names["speech_image_late"][k], bundle.x_late[k], fs)
        write_wav(scene_dir / names["source"][k], bundle.s[k], fs)
    if bundle.rirs is not None:
        save_rirs(scene_dir / names["rirs"], bundle.rirs)
    return names


def scene_path(root: Path, entry: SceneEntry, key: str, index: Optional[int] = None) -> Path:
    """Полный путь к файлу сцены по ключу из ``entry.files``."""
    name = entry.files.get(key)
    if name is None:
        raise StorageError(f"В записи сцены {entry.scene_id} нет файла '{key}'.")
    if index is not None:
        name = name[index]
    return Path(root) / entry.directory / name


def load_observation(root: Path, entry: SceneEntry) -> np.ndarray:
    """Наблюдение сцены, (D, L)."""
    data, _ = read_wav(scene_path(root, entry, "observation"))
    return data


def load_bundle(root: Path, entry: SceneEntry) -> MixtureBundle:
    """
    Восстанавливает все сигналы сцены с диска.

    Значения - float32 из WAV, поэтому равенство y = Σx + n выполняется
    лишь с точностью float32.
    """
    num_speakers = len(entry.files.get("source", []))

    def stack(key: str) -> np.ndarray:
        return np.stack([read_wav(scene_path(root, entry, key, k))[0] for k in range(num_speakers)])

    return MixtureBundle(
        s=stack("source")[:, 0],
        offset=np.asarray(entry.offsets),
        x=stack("speech_image"),
        x_early=stack("speech_image_early"),
        x_late=stack("speech_image_late"),
        n=read_wav(scene_path(root, entry, "noise"))[0],
        y=load_observation(root, entry),
        snr=entry.snr,
        sample_rate=entry.sample_rate,
    )
