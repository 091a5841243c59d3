"""
Маскирование и MVDR-бимформинг в формулировке Соудена.

Оба вида улучшения - линейные операторы над многоканальным спектром:
``BeamformerSolution`` и ``MaskingOperator`` применимы к любой компоненте
смеси (образам речи, шуму), что требуется для инвазивного SDR.
"""
import logging
from dataclasses import dataclass
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.cacgmm import MaskSet
from src.stft import TFTensor

logger = logging.getLogger(__name__)


class BeamformerError(Exception):
    """
    Ошибка оценки ковариаций или весов бимформера.

    Attributes:
        details (Any): Например, индексы проблемных частотных бинов.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class BeamformerConfig(BaseModel):
    """Параметры бимформера и оракульных масок."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mask_floor: float = Field(1e-10, ge=0)
    diagonal_loading: float = Field(1e-8, ge=0)
    irm_exponent: float = Field(1.0, gt=0)
    # None - выбор по ожидаемому выходному SNR
    reference_channel: Optional[int] = Field(None, ge=0)


@dataclass
class SpatialCovariances:
    """
    Пространственные ковариации для одного целевого класса.

    Attributes:
        phi_x: Ковариация цели, (F, D, D).
        phi_n: Ковариация искажений (помехи + шум), (F, D, D).
        target: Индекс целевого класса.
    """
    phi_x: np.ndarray
    phi_n: np.ndarray
    target: int = 0


@dataclass
class BeamformerSolution:
    """
    Веса MVDR для всех дикторов.

    Attributes:
        weights: Комплексные веса, (K, F, D); выход ŝ = w^H y.
        ref_channel: Опорный канал на диктора, (K,).
    """
    weights: np.ndarray
    ref_channel: np.ndarray

    @property
    def num_targets(self) -> int:
        return self.weights.shape[0]

    def apply(self, tf: TFTensor) -> TFTensor:
        """ŝ_{k,t,f} = w_{k,f}^H y_{t,f} для спектра (..., D, T, F) → (..., K, T, F)."""
        data = np.asarray(tf.data)
        if data.ndim < 3 or data.shape[-3] != self.weights.shape[-1] or data.shape[-1] != self.weights.shape[1]:
            raise BeamformerError(
                f"Форма спектра {data.shape} не согласована с весами {self.weights.shape}."
            )
        return tf.with_data(np.einsum("kfd,...dtf->...ktf", self.weights.conj(), data))


@dataclass
class MaskingOperator:
    """
    Маскирование опорного канала: ŝ_{k,t,f} = γ_{k,t,f} · y_{ref,t,f}.

    Единичные маски дают выбор канала (наблюдение без обработки).

    Attributes:
        masks: Маски дикторов, (K, T, F).
        ref_channel: Опорный канал.
    """
    masks: np.ndarray
    ref_channel: int = 0

    @property
    def num_targets(self) -> int:
        return self.masks.shape[0]

    def apply(self, tf: TFTensor) -> TFTensor:
        data = np.asarray(tf.data)
        if data.ndim < 3 or data.shape[-2:] != self.masks.shape[-2:] or self.ref_channel >= data.shape[-3]:
            raise BeamformerError(f"Форма спектра {data.shape} не согласована с масками {self.masks.shape}.")
        reference = data[..., self.ref_channel, :, :]
        return tf.with_data(self.masks * reference[..., None, :, :])


LinearOperator = Union[BeamformerSolution, MaskingOperator]


def channel_selection(num_targets: int, num_frames: int, num_bins: int, ref_channel: int = 0) -> MaskingOperator:
    """Оператор «наблюдение без обработки»: канал ``ref_channel`` для каждого диктора."""
    return MaskingOperator(masks=np.ones((num_targets, num_frames, num_bins)), ref_channel=ref_channel)


def _weighted_psd(data: np.ndarray, mask: np.ndarray, target: str) -> np.ndarray:
    norm = mask.sum(axis=0)
    empty = np.flatnonzero(norm <= 0)
    if empty.size:
        raise BeamformerError(f"Маска {target} нулевая в частотном бине {int(empty[0])}.",
                              details={"bins": empty.tolist()})
    psd = np.einsum("tf,dtf,etf->fde", mask, data, data.conj())
    return psd / norm[:, None, None]


def estimate_covariances(Y: TFTensor, masks: MaskSet, target: int, mask_floor: float = 1e-10) -> SpatialCovariances:
    """
    Взвешенные средние внешних произведений наблюдения.

    Φx = Σ_t γ_k y y^H / Σ_t γ_k; для Φn маска - сумма всех остальных
    классов, включая шум. Маски ограничиваются снизу ``mask_floor``.

    Args:
        Y (TFTensor): Спектр наблюдения (D, T, F).
        masks (MaskSet): Выровненные маски (C, T, F).
        target (int): Индекс целевого класса.
        mask_floor (float): Нижняя граница масок.

    Returns:
        SpatialCovariances: Φx и Φn формы (F, D, D).

    Raises:
        BeamformerError: Несогласованные формы или пустая маска в каком-то бине.
    """
    data = np.asarray(Y.data)
    gamma = np.asarray(masks.gamma)
    if gamma.shape[1:] != data.shape[1:]:
        raise BeamformerError(f"Маски {gamma.shape} не согласованы со спектром {data.shape}.")
    if not 0 <= target < gamma.shape[0]:
        raise BeamformerError(f"Нет класса {target} среди {gamma.shape[0]}.")
    target_mask = np.maximum(gamma[target], mask_floor)
    distortion_mask = np.maximum(np.delete(gamma, target, axis=0).sum(axis=0), mask_floor)
    return SpatialCovariances(
        phi_x=_weighted_psd(data, target_mask, "цели"),
        phi_n=_weighted_psd(data, distortion_mask, "искажений"),
        target=target,
    )


def condition_covariance(matrix: np.ndarray, loading: float) -> np.ndarray:
    """Диагональная нагрузка: Φ + δ·tr(Φ)/D·I."""
    scale = loading * np.real(np.trace(matrix, axis1=-2, axis2=-1)) / matrix.shape[-1]
    return matrix + scale[..., None, None] * np.eye(matrix.shape[-1])


def souden_matrix(phi_x: np.ndarray, phi_n: np.ndarray, loading: float = 1e-8) -> np.ndarray:
    """
    Φn⁻¹Φx / tr(Φn⁻¹Φx) по частотам; столбец r - веса для опорного канала r.

    Raises:
        BeamformerError: Если след не превышает машинного нуля в каком-то бине.
    """
    numerator = np.linalg.solve(condition_covariance(phi_n, loading), phi_x)
    trace = np.trace(numerator, axis1=-2, axis2=-1)
    degenerate = np.flatnonzero(np.abs(trace) <= np.finfo(float).tiny)
    if degenerate.size:
        raise BeamformerError(f"Вырожденная цель: след Φn⁻¹Φx равен нулю в бине {int(degenerate[0])}.",
                              details={"bins": degenerate.tolist()})
    return numerator / trace[:, None, None]


def select_reference(phi_x: np.ndarray, phi_n: np.ndarray, candidates: Optional[np.ndarray] = None,
                     loading: float = 1e-8) -> int:
    """
    Опорный канал по ожидаемому выходному SNR.

    SNR_r = Σ_f w_r^H Φx w_r / Σ_f w_r^H Φn w_r (отношение сумм по частотам);
    при равенстве (с относительной точностью 1e-12) выбирается меньший индекс.

    Args:
        phi_x (np.ndarray): Ковариации цели, (F, D, D).
        phi_n (np.ndarray): Ковариации искажений без нагрузки, (F, D, D).
        candidates (Optional[np.ndarray]): Веса для каждого опорного канала, (F, D, R);
            по умолчанию ``souden_matrix``.
        loading (float): Диагональная нагрузка для расчета кандидатов.

    Returns:
        int: Индекс опорного канала.
    """
    if candidates is None:
        candidates = souden_matrix(phi_x, phi_n, loading)
    if candidates.shape[-1] == 1:
        return 0
    target_power = np.real(np.einsum("fdr,fde,fer->r", candidates.conj(), phi_x, candidates))
    noise_power = np.real(np.einsum("fdr,fde,fer->r", candidates.conj(), phi_n, candidates))
    snr = target_power / np.maximum(noise_power, np.finfo(float).tiny)
    if not np.all(np.isfinite(snr)):
        raise BeamformerError("Ожидаемый SNR не конечен: ковариации содержат NaN или inf.", details=snr)
    best = snr.max()
    return int(np.flatnonzero(snr >= best - 1e-12 * abs(best))[0])


def mvdr_souden(phi_x: np.ndarray, phi_n: np.ndarray, ref: Optional[int] = None,
                loading: float = 1e-8) -> tuple[np.ndarray, int]:
    """
    Веса MVDR по Соудену: w = (Φn⁻¹Φx / tr(Φn⁻¹Φx))·u_ref.

    Args:
        phi_x (np.ndarray): Ковариации цели, (F, D, D).
        phi_n (np.ndarray): Ковариации искажений, (F, D, D).
        ref (Optional[int]): Опорный канал; None - ``select_reference``.
        loading (float): Относительная диагональная нагрузка Φn.

    Returns:
        tuple[np.ndarray, int]: Веса (F, D) и использованный опорный канал.
    """
    matrix = souden_matrix(phi_x, phi_n, loading)
    if ref is None:
        ref = select_reference(phi_x, phi_n, candidates=matrix)
    if not 0 <= ref < matrix.shape[-1]:
        raise BeamformerError(f"Опорный канал {ref} вне диапазона [0, {matrix.shape[-1]}).")
    return matrix[..., ref], int(ref)


def mask_based_mvdr(Y: TFTensor, masks: MaskSet, config: Optional[BeamformerConfig] = None) -> BeamformerSolution:
    """
    MVDR для каждого диктора по маскам: ковариации → веса → опорный канал.

    Args:
        Y (TFTensor): Спектр наблюдения (D, T, F).
        masks (MaskSet): Маски; первые ``num_speakers`` классов - дикторы.
        config (Optional[BeamformerConfig]): Параметры.

    Returns:
        BeamformerSolution: Веса (K, F, D) и опорные каналы.
    """
    config = config or BeamformerConfig()
    weights, refs = [], []
    for k in range(masks.num_speakers):
        covariances = estimate_covariances(Y, masks, k, config.mask_floor)
        w, ref = mvdr_souden(covariances.phi_x, covariances.phi_n, config.reference_channel,
                             config.diagonal_loading)
        weights.append(w)
        refs.append(ref)
    logger.debug(f"MVDR: опорные каналы {refs}.")
    return BeamformerSolution(weights=np.stack(weights), ref_channel=np.asarray(refs, dtype=np.int64))


def apply_linear(op: LinearOperator, tf: TFTensor) -> TFTensor:
    """
    Применяет линейный оператор улучшения к спектру (..., D, T, F).

    Один и тот же оператор применяется к наблюдению и к каждой его компоненте;
    по линейности результат для суммы равен сумме результатов.

    Returns:
        TFTensor: Одноканальный выход на каждого диктора, (..., K, T, F).
    """
    return op.apply(tf)


def oracle_masks(images: np.ndarray, noise: np.ndarray, kind: Literal["irm", "ibm"] = "irm",
                 exponent: float = 1.0) -> MaskSet:
    """
    Оракульные маски по спектрам компонент в опорном канале.

    IRM_k = |X_k|^p / (Σ_j |X_j|^p + |N|^p); IBM_k = 1 там, где класс k
    (включая шум) имеет наибольшую амплитуду, при равенстве - меньший индекс.
    Для IRM точки, где все амплитуды нулевые, получают равномерную маску.

    Args:
        images (np.ndarray): Спектры образов речи, (K, T, F).
        noise (np.ndarray): Спектр шума, (T, F).
        kind (str): "irm" или "ibm".
        exponent (float): Показатель степени амплитуд для IRM.

    Returns:
        MaskSet: K масок дикторов и маска шума (последняя).
    """
    images = np.asarray(images)
    noise = np.asarray(noise)
    if images.shape[1:] != noise.shape:
        raise BeamformerError(f"Формы образов {images.shape} и шума {noise.shape} не согласованы.")
    magnitudes = np.abs(np.concatenate([images, noise[None]], axis=0))
    num_classes = magnitudes.shape[0]
    if kind == "irm":
        powered = magnitudes ** exponent
        total = powered.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            gamma = np.where(total > 0, powered / total, 1.0 / num_classes)
    elif kind == "ibm":
        winner = np.argmax(magnitudes, axis=0)
        gamma = (np.arange(num_classes)[:, None, None] == winner[None]).astype(float)
    else:
        raise BeamformerError(f"Неизвестный тип оракульной маски: {kind}.")
    return MaskSet(gamma=gamma, num_speakers=images.shape[0])
