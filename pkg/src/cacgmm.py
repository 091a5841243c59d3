"""
Смесь комплексных угловых центральных гауссовых распределений (cACGMM)
с зависящими от времени весами, EM-оценкой и выравниванием перестановок
классов по частотам.

Классы: ``num_speakers`` дикторов и один класс шума (всегда последний
после ``fit``).
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment
from scipy.special import gammaln, logsumexp

from src.scene_geometry import make_rng
from src.stft import TFTensor

logger = logging.getLogger(__name__)

# До этого числа классов перестановки перебираются полностью.
BRUTE_FORCE_MAX_CLASSES = 4


class CacgmmError(Exception):
    """
    Ошибка оценки модели.

    Attributes:
        details (Any): Например, индекс частотного бина с вырожденной матрицей.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class CacgmmConfig(BaseModel):
    """Параметры EM для cACGMM."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = Field(100, ge=1)
    # Выравнивание запускается начиная с этой итерации (нумерация с нуля)
    alignment_start: int = Field(2, ge=0)
    align: bool = True
    regularization: float = Field(1e-10, ge=0)
    identify_noise: bool = True


@dataclass
class CacgmmParams:
    """
    Параметры модели.

    Attributes:
        B: Матрицы формы, (C, F, D, D).
        pi: Веса классов по кадрам, (C, T).
    """
    B: np.ndarray
    pi: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.B.shape[0]


@dataclass
class MaskSet:
    """
    Апостериорные вероятности классов (маски).

    Attributes:
        gamma: Маски, (C, T, F); сумма по классам равна 1.
        num_speakers: Число классов-дикторов; если ``has_noise``, последний класс - шум.
        permutations: Примененные перестановки по частотам, (F, C);
            ``gamma[c, :, f]`` взят из исходного класса ``permutations[f, c]``.
        has_noise: Есть ли класс шума.
    """
    gamma: np.ndarray
    num_speakers: int
    permutations: Optional[np.ndarray] = None
    has_noise: bool = True
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = [f"speaker_{k}" for k in range(self.num_speakers)]
            if self.has_noise:
                self.labels.append("noise")

    @property
    def num_classes(self) -> int:
        return self.gamma.shape[0]

    @property
    def noise_class(self) -> Optional[int]:
        return self.num_classes - 1 if self.has_noise else None

    def speaker_masks(self) -> np.ndarray:
        """Маски дикторов без класса шума, (K, T, F)."""
        return self.gamma[:self.num_speakers]


def init_posteriors(num_frames: int, num_bins: int, num_classes: int, seed: int) -> MaskSet:
    """
    Начальные апостериорные вероятности из равномерного распределения Дирихле.

    Args:
        num_frames (int): Число кадров T.
        num_bins (int): Число частотных бинов F.
        num_classes (int): Число классов K + 1.
        seed (int): Seed (поток "cacgmm").

    Returns:
        MaskSet: Маски (C, T, F); каждая точка (t, f) - независимая выборка Dirichlet(1, …, 1).
    """
    if min(num_frames, num_bins, num_classes) < 1:
        raise CacgmmError(f"Некорректные размеры: T={num_frames}, F={num_bins}, C={num_classes}.")
    rng = make_rng(seed, "cacgmm")
    draws = rng.dirichlet(np.ones(num_classes), size=(num_frames, num_bins))
    return MaskSet(gamma=np.moveaxis(draws, -1, 0), num_speakers=num_classes - 1)


def _pearson(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Матрица корреляций Пирсона строк ``first`` (C, T) и ``second`` (C, T); постоянные профили дают 0."""
    a = first - first.mean(axis=-1, keepdims=True)
    b = second - second.mean(axis=-1, keepdims=True)
    norm_a = np.linalg.norm(a, axis=-1)
    norm_b = np.linalg.norm(b, axis=-1)
    denominator = norm_a[:, None] * norm_b[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (a @ b.T) / denominator
    return np.where(denominator > 0, corr, 0.0)


def best_permutation(score: np.ndarray, brute_force_max: int = BRUTE_FORCE_MAX_CLASSES) -> np.ndarray:
    """
    Перестановка p, максимизирующая Σ_c score[c, p[c]].

    До ``brute_force_max`` классов - полный перебор в лексикографическом
    порядке (при равенстве побеждает первая, т.е. тождественная); иначе венгерский алгоритм.
    """
    num_classes = score.shape[0]
    if num_classes <= brute_force_max:
        best, best_value = None, -np.inf
        rows = np.arange(num_classes)
        for candidate in itertools.permutations(range(num_classes)):
            value = score[rows, list(candidate)].sum()
            if value > best_value + 1e-12:
                best, best_value = candidate, value
        return np.asarray(best, dtype=np.int64)
    _, columns = linear_sum_assignment(score, maximize=True)
    return columns.astype(np.int64)


def align_permutations(gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Согласует метки классов между частотами.

    Частоты обходятся от низких к высоким; для каждой выбирается перестановка,
    максимизирующая суммарную корреляцию Пирсона временных профилей классов
    с текущими центроидами (средними профилями уже выровненных частот).
    Затем выполняется один уточняющий проход против итоговых центроидов.

    Args:
        gamma (np.ndarray): Апостериорные вероятности, (C, T, F).

    Returns:
        tuple[np.ndarray, np.ndarray]: Выровненные маски и перестановки (F, C),
        такие что ``aligned[c, :, f] == gamma[perm[f, c], :, f]``.
    """
    num_classes, _, num_bins = gamma.shape
    permutations = np.tile(np.arange(num_classes), (num_bins, 1))
    aligned = gamma.copy()

    running = aligned[:, :, 0].copy()
    for f in range(1, num_bins):
        perm = best_permutation(_pearson(running / f, gamma[:, :, f]))
        permutations[f] = perm
        aligned[:, :, f] = gamma[perm, :, f]
        running += aligned[:, :, f]

    centroid = aligned.mean(axis=-1)
    for f in range(num_bins):
        perm = best_permutation(_pearson(centroid, aligned[:, :, f]))
        if np.any(perm != np.arange(num_classes)):
            permutations[f] = permutations[f][perm]
            aligned[:, :, f] = gamma[permutations[f], :, f]
    return aligned, permutations


def _apply_permutations(values: np.ndarray, permutations: np.ndarray, bin_axis: int) -> np.ndarray:
    """Переставляет ось классов (0) массива по частотам на оси ``bin_axis``."""
    result = np.empty_like(values)
    for f, perm in enumerate(permutations):
        index = [slice(None)] * values.ndim
        index[bin_axis] = f
        source = list(index)
        source[0] = perm
        result[tuple(index)] = values[tuple(source)]
    return result


def _log_cacg(observations: np.ndarray, shapes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Логарифм плотности cACG и квадратичная форма ỹ^H B⁻¹ ỹ.

    Args:
        observations: Нормированные наблюдения, (F, T, D).
        shapes: Матрицы формы, (C, F, D, D).

    Returns:
        tuple: log p (C, F, T) и квадратичная форма (C, F, T).
    """
    num_channels = observations.shape[-1]
    try:
        cholesky = np.linalg.cholesky(shapes)
    except np.linalg.LinAlgError:
        bad = [f for f in range(shapes.shape[1]) if np.any(np.linalg.eigvalsh(shapes[:, f]) <= 0)]
        raise CacgmmError(f"Матрица формы вырождена в частотном бине {bad[0] if bad else '?'}.",
                          details={"bins": bad})
    log_det = 2 * np.sum(np.log(np.abs(np.diagonal(cholesky, axis1=-2, axis2=-1))), axis=-1)
    whitened = np.linalg.solve(cholesky, np.swapaxes(observations, -1, -2)[None])
    quad = np.maximum(np.sum(np.abs(whitened) ** 2, axis=-2), np.finfo(float).tiny)
    constant = gammaln(num_channels) - np.log(2) - num_channels * np.log(np.pi)
    return constant - log_det[..., None] - num_channels * np.log(quad), quad


def _m_step(observations: np.ndarray, gamma: np.ndarray, quad: np.ndarray, valid: np.ndarray,
            regularization: float) -> CacgmmParams:
    """
    M-шаг: B = D · Σ_t γ ỹỹ^H / (ỹ^H B_old⁻¹ ỹ) / Σ_t γ; π = среднее γ по частотам.

    Args:
        observations: (F, T, D).
        gamma: (C, T, F).
        quad: Квадратичные формы предыдущих параметров, (C, F, T).
        valid: Маска ненулевых наблюдений, (F, T).
        regularization: Относительная диагональная нагрузка ε.
    """
    num_bins, _, num_channels = observations.shape
    weights = np.swapaxes(gamma, -1, -2) * valid[None]
    shapes = np.empty((gamma.shape[0], num_bins, num_channels, num_channels), dtype=complex)
    eye = np.eye(num_channels)
    for k in range(gamma.shape[0]):
        scaled = observations * (weights[k] / quad[k])[..., None]
        scatter = np.swapaxes(scaled, -1, -2) @ observations.conj()
        norm = weights[k].sum(axis=-1)
        empty = norm <= np.finfo(float).tiny
        shapes[k] = num_channels * scatter / np.where(empty, 1.0, norm)[:, None, None]
        shapes[k][empty] = eye
    shapes = (shapes + np.conj(np.swapaxes(shapes, -1, -2))) / 2
    trace = np.real(np.trace(shapes, axis1=-2, axis2=-1))
    shapes = shapes + (regularization * trace / num_channels)[..., None, None] * eye
    return CacgmmParams(B=shapes, pi=gamma.mean(axis=-1))


def _e_step(observations: np.ndarray, params: CacgmmParams, valid: np.ndarray):
    """E-шаг: апостериорные вероятности, квадратичные формы и логарифм правдоподобия."""
    log_density, quad = _log_cacg(observations, params.B)
    log_weights = np.log(np.maximum(params.pi, np.finfo(float).tiny))
    joint = log_weights[:, None, :] + log_density  # (C, F, T)
    normalizer = logsumexp(joint, axis=0)
    gamma = np.exp(joint - normalizer[None])
    gamma[:, ~valid] = 1.0 / joint.shape[0]
    log_likelihood = float(np.sum(normalizer[valid]))
    return np.swapaxes(gamma, -1, -2), quad, log_likelihood


def spectral_flatness(shapes: np.ndarray) -> np.ndarray:
    """Средняя по частотам спектральная плоскостность собственных чисел B, (C,); 1 - масштабированная единичная."""
    eigenvalues = np.maximum(np.linalg.eigvalsh(shapes), np.finfo(float).tiny)
    geometric = np.exp(np.mean(np.log(eigenvalues), axis=-1))
    return np.mean(geometric / np.mean(eigenvalues, axis=-1), axis=-1)


def fit(
        Y: TFTensor,
        num_speakers: int,
        iterations: Optional[int] = None,
        seed: int = 0,
        config: Optional[CacgmmConfig] = None,
        align: Optional[bool] = None,
) -> tuple[MaskSet, CacgmmParams, list[float]]:
    """
    Оценивает cACGMM на многоканальном спектре алгоритмом EM.

    Итерация: M-шаг (первый - по маскам Дирихле), E-шаг с расчетом
    правдоподобия, выравнивание перестановок (начиная с ``alignment_start``).
    Наблюдения нормируются на единичную сферу, поэтому результат не зависит
    от масштаба ``Y``: побитово для степеней двойки, иначе до ошибки округления
    (порядка 1e-15); бины с нулевым вектором получают равномерные маски и
    не участвуют в оценке.

    Args:
        Y (TFTensor): Спектр (D, T, F), D ≥ 2.
        num_speakers (int): Число дикторов K; модель содержит K + 1 класс.
        iterations (Optional[int]): Число итераций; по умолчанию из конфигурации.
        seed (int): Seed инициализации.
        config (Optional[CacgmmConfig]): Параметры EM.
        align (Optional[bool]): Переопределяет ``config.align``.

    Returns:
        tuple: (MaskSet, CacgmmParams, список логарифмов правдоподобия по итерациям).

    Raises:
        CacgmmError: Некорректный вход или вырожденная матрица формы.
    """
    config = config or CacgmmConfig()
    iterations = config.iterations if iterations is None else iterations
    align = config.align if align is None else align
    data = np.asarray(Y.data)
    if data.ndim != 3:
        raise CacgmmError(f"Ожидался спектр формы (D, T, F), получено {data.shape}.")
    num_channels, num_frames, num_bins = data.shape
    if num_channels < 2:
        raise CacgmmError("Для пространственной кластеризации нужно не меньше двух каналов.")
    if iterations < 1 or num_speakers < 0:
        raise CacgmmError(f"Некорректные параметры: iterations={iterations}, num_speakers={num_speakers}.")
    if not np.all(np.isfinite(data)):
        raise CacgmmError("Спектр содержит NaN или бесконечные значения.")

    observations = np.moveaxis(data, 0, -1).transpose(1, 0, 2)  # (F, T, D)
    norm = np.linalg.norm(observations, axis=-1)
    valid = norm > 0
    if not np.any(valid):
        raise CacgmmError("Спектр полностью нулевой.")
    observations = observations / np.where(valid, norm, 1.0)[..., None]

    num_classes = num_speakers + 1
    gamma = init_posteriors(num_frames, num_bins, num_classes, seed).gamma
    gamma[:, ~valid.T] = 1.0 / num_classes
    quad = np.ones((num_classes, num_bins, num_frames))
    permutations = np.tile(np.arange(num_classes), (num_bins, 1))
    trace = []
    params = None

    for iteration in range(iterations):
        params = _m_step(observations, gamma, quad, valid, config.regularization)
        gamma, quad, log_likelihood = _e_step(observations, params, valid)
        trace.append(log_likelihood)
        if align and num_classes > 1 and iteration >= config.alignment_start:
            gamma, step = align_permutations(gamma)
            quad = _apply_permutations(quad, step, bin_axis=1)
            params = CacgmmParams(B=_apply_permutations(params.B, step, bin_axis=1), pi=params.pi)
            permutations = np.take_along_axis(permutations, step, axis=1)
    logger.debug(f"cACGMM: {iterations} итераций, log-правдоподобие {trace[0]:.3f} → {trace[-1]:.3f}.")

    order = np.arange(num_classes)
    if config.identify_noise and num_classes > 1:
        noise = int(np.argmax(spectral_flatness(params.B)))
        order = np.array([c for c in range(num_classes) if c != noise] + [noise])
    gamma = gamma[order]
    params = CacgmmParams(B=params.B[order], pi=gamma.mean(axis=-1))
    permutations = permutations[:, order]
    return MaskSet(gamma=gamma, num_speakers=num_speakers, permutations=permutations), params, trace
