import asyncio
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.beamformer import (BeamformerError, LinearOperator, MaskingOperator, channel_selection, mask_based_mvdr,
                            oracle_masks)
from src.cacgmm import CacgmmError, fit
from src.config import PipelineConfig
from src.logger import scene_logger
from src.rir_engine import InfeasibleT60Error
from src.stft import analyze, synthesize
from src.storage import (SceneEntry, load_bundle, load_observation, save_operator, scene_path, write_wav)

logger = logging.getLogger(__name__)

# Константы для статусов операции
STATUS_SUCCESS = "успех"
STATUS_ERROR = "ошибка"

# Ошибки, после которых CLI возвращает код 3 (численный сбой)
NUMERICAL_ERRORS = (CacgmmError, BeamformerError, InfeasibleT60Error, np.linalg.LinAlgError, FloatingPointError)


class SeparationError(Exception):
    """
    Ошибка разделения сцены (не выполнены предусловия метода).

    Attributes:
        details (Any): Дополнительная информация об ошибке.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


@dataclass
class SceneInput:
    """Сцена набора, из которой стратегия загружает нужные ей сигналы."""
    entry: SceneEntry
    root: Path
    config: PipelineConfig = field(default_factory=PipelineConfig)

    @property
    def num_speakers(self) -> int:
        return len(self.entry.files.get("source", []))

    def observation(self) -> np.ndarray:
        return load_observation(self.root, self.entry)


@dataclass
class SeparationResult:
    """
    Результат разделения.

    Attributes:
        estimates: Оценки дикторов во временной области, (K, L).
        operator: Линейный оператор, получивший оценки (None для оракульных сигналов).
        diagnostics: Дополнительные сведения (например, ход правдоподобия).
    """
    estimates: np.ndarray
    operator: Optional[LinearOperator] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)


class SeparationStrategy(ABC):
    """Абстрактный базовый класс для систем разделения (строк итоговой таблицы)."""

    # Оракульные системы используют образы речи и шум
    oracle: bool = False

    @abstractmethod
    def separate(self, scene: SceneInput) -> SeparationResult:
        """
        Разделяет одну сцену.

        Args:
            scene (SceneInput): Сцена набора.

        Returns:
            SeparationResult: Оценки и, если есть, линейный оператор.
        """
        pass

    def check_requirements(self, scene: SceneInput) -> Tuple[bool, str]:
        """
        Проверяет, что все нужные методу файлы на месте.

        Returns:
            Tuple[bool, str]: True и пустая строка при успехе, иначе False и сообщение.
        """
        keys = ["observation"] + (["speech_image", "speech_image_early", "noise", "source"] if self.oracle else [])
        for key in keys:
            names = scene.entry.files.get(key)
            if names is None:
                return False, f"В записи сцены {scene.entry.scene_id} нет файлов '{key}'."
            indices = range(len(names)) if isinstance(names, list) else [None]
            for index in indices:
                path = scene_path(scene.root, scene.entry, key, index)
                if not path.exists():
                    return False, f"Файл не найден: {path}"
        return True, ""


class ObservationStrategy(SeparationStrategy):
    """Наблюдение без обработки: опорный канал для каждого диктора."""

    def separate(self, scene: SceneInput) -> SeparationResult:
        y = scene.observation()
        ref = scene.config.evaluation.ref_mic
        Y = analyze(y, scene.config.stft)
        operator = channel_selection(scene.num_speakers, Y.num_frames, Y.num_bins, ref)
        return SeparationResult(estimates=np.repeat(y[ref][None], scene.num_speakers, axis=0), operator=operator)


class CacgmmMaskingStrategy(SeparationStrategy):
    """Маскирование опорного канала апостериорными вероятностями cACGMM."""

    def separate(self, scene: SceneInput) -> SeparationResult:
        config = scene.config
        Y = analyze(scene.observation(), config.stft)
        masks, _, trace = fit(Y, scene.num_speakers, seed=scene.entry.seed, config=config.cacgmm)
        operator = MaskingOperator(masks=masks.speaker_masks(), ref_channel=config.evaluation.ref_mic)
        estimates = synthesize(operator.apply(Y))
        return SeparationResult(estimates=estimates, operator=operator, diagnostics={"log_likelihood": trace})


class CacgmmMvdrStrategy(SeparationStrategy):
    """MVDR по Соудену с ковариациями, оцененными по маскам cACGMM."""

    def separate(self, scene: SceneInput) -> SeparationResult:
        config = scene.config
        Y = analyze(scene.observation(), config.stft)
        masks, _, trace = fit(Y, scene.num_speakers, seed=scene.entry.seed, config=config.cacgmm)
        solution = mask_based_mvdr(Y, masks, config.beamformer)
        return SeparationResult(estimates=synthesize(solution.apply(Y)), operator=solution,
                                diagnostics={"log_likelihood": trace, "ref_channel": solution.ref_channel.tolist()})


class OracleMaskMvdrStrategy(SeparationStrategy):
    """MVDR с оракульными масками (IRM или IBM) по образам речи и шуму."""

    oracle = True

    def __init__(self, kind: str):
        self.kind = kind

    def separate(self, scene: SceneInput) -> SeparationResult:
        config = scene.config
        bundle = load_bundle(scene.root, scene.entry)
        ref = config.evaluation.ref_mic
        images = analyze(bundle.x[:, ref], config.stft).data
        noise = analyze(bundle.n[ref], config.stft).data[0]
        masks = oracle_masks(images, noise, self.kind, config.beamformer.irm_exponent)
        Y = analyze(bundle.y, config.stft)
        solution = mask_based_mvdr(Y, masks, config.beamformer)
        return SeparationResult(estimates=synthesize(solution.apply(Y)), operator=solution,
                                diagnostics={"ref_channel": solution.ref_channel.tolist()})


class OracleSignalStrategy(SeparationStrategy):
    """Образы речи в опорном канале как «идеальные» оценки (без оператора)."""

    oracle = True

    def __init__(self, component: str):
        self.component = component

    def separate(self, scene: SceneInput) -> SeparationResult:
        bundle = load_bundle(scene.root, scene.entry)
        signals = bundle.x_early if self.component == "early" else bundle.x
        return SeparationResult(estimates=signals[:, scene.config.evaluation.ref_mic].copy())


SEPARATION_STRATEGIES = {
    "observation": ObservationStrategy(),
    "cacgmm-mask": CacgmmMaskingStrategy(),
    "cacgmm-mvdr": CacgmmMvdrStrategy(),
    "irm-mvdr": OracleMaskMvdrStrategy("irm"),
    "ibm-mvdr": OracleMaskMvdrStrategy("ibm"),
    "oracle-image": OracleSignalStrategy("image"),
    "oracle-early": OracleSignalStrategy("early"),
}


def write_result(out_dir: Path, scene_id: str, result: SeparationResult, sample_rate: int) -> Dict[str, Any]:
    """Записывает оценки (по файлу на диктора) и оператор в папку сцены."""
    scene_dir = Path(out_dir) / scene_id
    estimates = []
    for k, estimate in enumerate(result.estimates):
        write_wav(scene_dir / f"estimate_{k}.wav", estimate, sample_rate)
        estimates.append(f"{scene_id}/estimate_{k}.wav")
    operator = None
    if result.operator is not None:
        save_operator(scene_dir / "operator.npz", result.operator)
        operator = f"{scene_id}/operator.npz"
    return {"estimates": estimates, "operator": operator}


def separate_scene_sync(method: str, scene: SceneInput, out_dir: Path) -> Dict[str, Any]:
    """
    Синхронно разделяет одну сцену выбранным методом и записывает результат.

    Raises:
        SeparationError: Неизвестный метод или нет нужных файлов.
    """
    strategy = SEPARATION_STRATEGIES.get(method)
    if strategy is None:
        raise SeparationError(f"Не найдена стратегия разделения '{method}'.")
    ok, message = strategy.check_requirements(scene)
    if not ok:
        raise SeparationError(f"Метод '{method}' неприменим: {message}")
    result = strategy.separate(scene)
    files = write_result(out_dir, scene.entry.scene_id, result, scene.entry.sample_rate)
    return {"status": STATUS_SUCCESS, "scene_id": scene.entry.scene_id, **files}


async def separate_single_scene(task: Dict[str, Any]) -> Dict[str, Any]:
    """
    Выбирает и запускает нужную стратегию разделения для одной сцены.

    Является единой точкой входа для всей логики разделения; исключения
    не выбрасываются, а возвращаются в словаре статуса.

    Args:
        task (Dict[str, Any]): Словарь задачи с ключами 'method', 'scene' (SceneInput), 'out_dir'.

    Returns:
        Dict[str, Any]: Результат операции: 'status', 'scene_id' и либо пути файлов,
        либо 'error' и 'numerical' (True для численных сбоев).
    """
    scene: SceneInput = task["scene"]
    log = scene_logger(logger, scene.entry.scene_id)
    try:
        result = await asyncio.to_thread(separate_scene_sync, task["method"], scene, Path(task["out_dir"]))
        log.info(f"Сцена разделена методом '{task['method']}'.")
        return result
    except Exception as e:
        log.error(f"Не удалось разделить сцену методом '{task['method']}': {e}", exc_info=True)
        return {"status": STATUS_ERROR, "scene_id": scene.entry.scene_id, "error": str(e),
                "numerical": isinstance(e, NUMERICAL_ERRORS)}
