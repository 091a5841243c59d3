"""
Метрики разделения: SDR, SI-SDR, BSS-Eval SDR (КИХ-проекция длины 512)
и инвазивный SDR через известный линейный оператор улучшения.

Бесконечности - штатные значения («идеальная» или «нулевая» оценка);
при агрегации они исключаются и подсчитываются отдельно.
"""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import cho_factor, cho_solve
from scipy.signal import fftconvolve

from src.beamformer import LinearOperator
from src.cacgmm import best_permutation
from src.mixer import MixtureBundle
from src.stft import StftConfig, TFTensor, analyze, tf_energy

logger = logging.getLogger(__name__)

# Остаток SI-SDR ниже этой доли энергии цели считается нулевым (+inf).
SI_SDR_EXACT_TOLERANCE = 1e-25

# Имя опорного сигнала в CLI → обозначение в отчете
REFERENCE_KINDS = {
    "source": "s",
    "early": "x_early",
    "image": "x",
    "noisy": "x+n",
}

METRIC_NAMES = ("sdr_db", "si_sdr_db", "bsseval_sdr_db", "invasive_sdr_db")


class MetricsError(Exception):
    """
    Ошибка расчета метрик.

    Attributes:
        details (Any): Дополнительная информация об ошибке.
    """
    def __init__(self, message: str, details: Any = None):
        super().__init__(message)
        self.details = details


class EvaluationConfig(BaseModel):
    """Параметры оценки."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tau_max: int = Field(512, ge=1)
    ref_mic: int = Field(0, ge=0)
    toeplitz_loading: float = Field(1e-12, ge=0)


def _check_pair(ref: np.ndarray, est: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=float)
    est = np.asarray(est, dtype=float)
    if ref.ndim != 1 or est.ndim != 1:
        raise MetricsError(f"Ожидались одноканальные сигналы, получено {ref.shape} и {est.shape}.")
    if ref.shape != est.shape:
        raise MetricsError(f"Длины опорного сигнала ({ref.size}) и оценки ({est.size}) различаются.")
    if not np.any(ref):
        raise MetricsError("Опорный сигнал нулевой.")
    return ref, est


def _ratio_db(signal_energy: float, error_energy: float) -> float:
    if error_energy == 0:
        return math.inf
    if signal_energy == 0:
        return -math.inf
    return float(10 * np.log10(signal_energy / error_energy))


def sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """
    SDR без допустимых преобразований: 10·log10(Σ|s|² / Σ|s − ŝ|²).

    Returns:
        float: Значение в дБ; +inf, если оценка совпадает с опорным сигналом.

    Raises:
        MetricsError: Разные длины или нулевой опорный сигнал.
    """
    ref, est = _check_pair(ref, est)
    return _ratio_db(float(np.sum(ref ** 2)), float(np.sum((ref - est) ** 2)))


def si_sdr(ref: np.ndarray, est: np.ndarray, scaling: Literal["reference", "estimate"] = "reference") -> float:
    """
    Масштабно-инвариантный SDR.

    ``scaling="reference"``: α = ⟨s, ŝ⟩/⟨s, s⟩, значение 10·log10(‖αs‖²/‖αs − ŝ‖²).
    ``scaling="estimate"``: β такое, что s ⊥ (s − βŝ), значение 10·log10(‖s‖²/‖s − βŝ‖²).
    Оба варианта совпадают с точностью округления.

    Args:
        ref (np.ndarray): Опорный сигнал.
        est (np.ndarray): Оценка.
        scaling (str): Какой из сигналов масштабируется.

    Returns:
        float: дБ; −inf при ортогональных сигналах (α = 0), +inf при ŝ = c·s.
    """
    ref, est = _check_pair(ref, est)
    cross = float(np.dot(ref, est))
    if cross == 0:
        return -math.inf
    if scaling == "reference":
        target = cross / float(np.dot(ref, ref)) * ref
        residual = target - est
    elif scaling == "estimate":
        target = ref
        residual = ref - float(np.dot(ref, ref)) / cross * est
    else:
        raise MetricsError(f"Неизвестный вариант масштабирования: {scaling}.")
    target_energy = float(np.sum(target ** 2))
    residual_energy = float(np.sum(residual ** 2))
    if residual_energy <= SI_SDR_EXACT_TOLERANCE * target_energy:
        return math.inf
    return _ratio_db(target_energy, residual_energy)


def _correlations(ref: np.ndarray, est: np.ndarray, taps: int) -> tuple[np.ndarray, np.ndarray]:
    """Автокорреляция ref и взаимная корреляция ref↔est для лагов 0..taps−1 (через БПФ, без зацикливания)."""
    size = int(2 ** math.ceil(math.log2(ref.size + taps - 1)))
    ref_spectrum = np.fft.rfft(ref, size)
    est_spectrum = np.fft.rfft(est, size)
    auto = np.fft.irfft(np.abs(ref_spectrum) ** 2, size)[:taps]
    cross = np.fft.irfft(np.conj(ref_spectrum) * est_spectrum, size)[:taps]
    return auto, cross


def _truncated_gram(ref: np.ndarray, auto: np.ndarray, taps: int) -> np.ndarray:
    """
    Матрица Грама столбцов усеченной до N отсчетов матрицы свертки.

    Полная автокорреляция r[|i−j|] уменьшается на энергию хвоста, который
    вытолкнут за отсчет N: для i = j + k это Σ_{p=N−j}^{N−1} s[p]·s[p−k].
    """
    n = ref.size
    padded = np.concatenate([np.zeros(taps), ref])
    lags = np.arange(taps)
    shifted = padded[n + lags[None, :] - lags[:, None]]
    tail = np.cumsum((shifted * ref[n - taps:][None, :])[:, ::-1], axis=1)
    i, j = np.meshgrid(lags, lags, indexing="ij")
    lag, start = np.abs(i - j), np.minimum(i, j)
    correction = np.where(start > 0, tail[lag, np.maximum(start - 1, 0)], 0.0)
    return auto[lag] - correction


def bss_eval_projection(ref: np.ndarray, est: np.ndarray, tau_max: int = 512,
                        loading: float = 1e-12) -> np.ndarray:
    """
    КИХ-фильтр a длины ``tau_max``, минимизирующий ‖(a ∗ s)[:N] − ŝ‖².

    Нормальные уравнения строятся для свертки, обрезанной до длины сигналов,
    и решаются через разложение Холецкого с нагрузкой ``loading``·r[0].
    Результат - ортогональная проекция ŝ на подпространство задержанных копий s.

    Returns:
        np.ndarray: Проекция (a ∗ s)[:N] длины N.

    Raises:
        MetricsError: Если система вырождена даже после нагрузки.
    """
    auto, cross = _correlations(ref, est, tau_max)
    matrix = _truncated_gram(ref, auto, tau_max)
    matrix[np.diag_indices_from(matrix)] += loading * auto[0]
    try:
        filt = cho_solve(cho_factor(matrix), cross)
    except np.linalg.LinAlgError as e:
        raise MetricsError(f"Вырожденная система BSS-Eval: {e}") from e
    return fftconvolve(ref, filt)[:ref.size]


def bss_eval_sdr(ref: np.ndarray, est: np.ndarray, tau_max: int = 512, loading: float = 1e-12) -> float:
    """
    BSS-Eval SDR: опорный сигнал может быть отфильтрован произвольным КИХ-фильтром
    длины ``tau_max``. Проекция и оценка сравниваются на первых N отсчетах, поэтому
    задержка оценки до tau_max − 1 отсчетов не считается искажением.

    Args:
        ref (np.ndarray): Опорный сигнал, длина N ≥ tau_max.
        est (np.ndarray): Оценка той же длины.
        tau_max (int): Длина фильтра.
        loading (float): Относительная диагональная нагрузка.

    Returns:
        float: дБ; −inf, если проекция нулевая.

    Raises:
        MetricsError: Короткие сигналы, разные длины, нулевой опорный сигнал.
    """
    ref, est = _check_pair(ref, est)
    if ref.size < tau_max:
        raise MetricsError(f"Сигнал короче длины фильтра BSS-Eval ({ref.size} < {tau_max}).")
    projection = bss_eval_projection(ref, est, tau_max, loading)
    return _ratio_db(float(np.sum(projection ** 2)), float(np.sum((projection - est) ** 2)))


def invasive_sdr(
        op: LinearOperator,
        images: TFTensor,
        noise: TFTensor,
        target_map: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """
    Инвазивный SDR: оператор улучшения применяется к каждой компоненте смеси.

    SDR_k = 10·log10(‖O_k{x_k}‖² / (Σ_{j≠k} ‖O_k{x_j}‖² + ‖O_k{n}‖²)),
    энергии - по Парсевалю в области STFT.

    Args:
        op (LinearOperator): Бимформер или маскирование.
        images (TFTensor): Спектры образов речи, (K, D, T, F).
        noise (TFTensor): Спектр шума, (D, T, F).
        target_map (Optional[Sequence[int]]): Для выхода k - индекс целевого источника;
            по умолчанию тождественно.

    Returns:
        np.ndarray: дБ на каждый выход оператора.
    """
    image_out = op.apply(images).data  # (J, K, T, F)
    noise_out = op.apply(noise).data  # (K, T, F)
    image_energy = tf_energy(image_out, images.config)  # (J, K)
    noise_energy = tf_energy(noise_out, noise.config)  # (K,)
    num_sources, num_outputs = image_energy.shape
    target_map = list(range(num_outputs)) if target_map is None else list(target_map)
    if len(target_map) != num_outputs or not all(0 <= j < num_sources for j in target_map):
        raise MetricsError(f"Некорректное сопоставление выходов и источников: {target_map}.")
    values = np.empty(num_outputs)
    for k, j in enumerate(target_map):
        interference = float(np.sum(np.delete(image_energy[:, k], j)) + noise_energy[k])
        values[k] = _ratio_db(float(image_energy[j, k]), interference)
    return values


def resolve_permutation(score: np.ndarray, maximize: bool = True) -> np.ndarray:
    """
    Перестановка, оптимизирующая суммарный счет.

    ``score[i, j]`` - счет пары (опорный сигнал i, оценка j); результат p
    сопоставляет опорному сигналу i оценку p[i]. До трех источников:
    полный перебор (лексикографически первая при равенстве), иначе
    венгерский алгоритм. Бесконечности заменяются большими конечными числами.

    Raises:
        MetricsError: Если матрица не квадратная или содержит NaN.
    """
    score = np.asarray(score, dtype=float)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise MetricsError(f"Ожидалась квадратная матрица, получено {score.shape}.")
    if np.any(np.isnan(score)):
        raise MetricsError("Матрица счетов содержит NaN.")
    finite = score if maximize else -score
    finite = np.nan_to_num(finite, posinf=1e12, neginf=-1e12)
    return best_permutation(finite, brute_force_max=3)


class MetricRow(BaseModel):
    """Метрики одного диктора одной сцены."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    scene_id: str
    speaker: int
    estimate: int
    reference: str
    sdr_db: float
    si_sdr_db: float
    bsseval_sdr_db: float
    invasive_sdr_db: Optional[float] = None
    permutation: list[int]


class MetricsReport(BaseModel):
    """
    Отчет оценки одной системы на наборе сцен.

    Средние считаются только по конечным значениям; число исключенных
    строк хранится рядом со средним.
    """

    model_config = ConfigDict(ser_json_inf_nan="constants")

    system: str = ""
    reference: str = "s"
    stft: Optional[dict] = None
    rows: list[MetricRow] = Field(default_factory=list)

    def aggregates(self) -> dict[str, dict[str, Any]]:
        """Среднее, число учтенных и исключенных (неконечных) значений по каждой метрике."""
        result = {}
        for name in METRIC_NAMES:
            values = np.array([getattr(row, name) for row in self.rows if getattr(row, name) is not None],
                              dtype=float)
            finite = values[np.isfinite(values)]
            result[name] = {
                "mean": float(finite.mean()) if finite.size else None,
                "count": int(finite.size),
                "non_finite": int(values.size - finite.size),
            }
        return result

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)

    def write_csv(self, path: Path) -> None:
        """Строки отчета в CSV: scene_id, speaker, estimate, reference, метрики, permutation."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, mode="w", newline="", encoding="utf-8") as csvfile:
            writer = csv.writer(csvfile, delimiter=",", quoting=csv.QUOTE_MINIMAL)
            writer.writerow(["scene_id", "speaker", "estimate", "reference", *METRIC_NAMES, "permutation"])
            for row in self.rows:
                metrics = [("n/a" if getattr(row, n) is None else repr(float(getattr(row, n)))) for n in METRIC_NAMES]
                writer.writerow([row.scene_id, row.speaker, row.estimate, row.reference, *metrics,
                                 " ".join(str(p) for p in row.permutation)])

    def write_json(self, path: Path) -> None:
        """Полный отчет с агрегатами в JSON (бесконечности как Infinity/-Infinity)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.loads(self.model_dump_json())
        payload["aggregates"] = self.aggregates()
        path.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")


def load_report(path: Path) -> MetricsReport:
    """Читает отчет, записанный ``MetricsReport.write_json``."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise MetricsError(f"Не удалось прочитать отчет {path}: {e}") from e
    payload.pop("aggregates", None)
    return MetricsReport.model_validate(payload)


def reference_signals(bundle: MixtureBundle, reference_kind: str, ref_mic: int = 0) -> np.ndarray:
    """
    Опорные сигналы дикторов, (K, L).

    Args:
        bundle (MixtureBundle): Сигналы сцены.
        reference_kind (str): "source" (s), "early" (x_early), "image" (x) или "noisy" (x + n).
        ref_mic (int): Опорный микрофон для образов.
    """
    if reference_kind == "source":
        return bundle.s
    if not 0 <= ref_mic < bundle.y.shape[0]:
        raise MetricsError(f"Опорный микрофон {ref_mic} вне диапазона.")
    if reference_kind == "early":
        return bundle.x_early[:, ref_mic]
    if reference_kind == "image":
        return bundle.x[:, ref_mic]
    if reference_kind == "noisy":
        return bundle.x[:, ref_mic] + bundle.n[ref_mic][None]
    raise MetricsError(f"Неизвестный тип опорного сигнала: {reference_kind}.")


def evaluate_bundle(
        bundle: MixtureBundle,
        estimates: np.ndarray,
        reference_kind: str = "source",
        operator: Optional[LinearOperator] = None,
        scene_id: str = "",
        system: str = "",
        config: Optional[EvaluationConfig] = None,
        stft_config: Optional[StftConfig] = None,
) -> MetricsReport:
    """
    Оценивает разделение одной сцены.

    Перестановка выбирается по среднему BSS-Eval SDR; все метрики строки
    считаются для пары (опорный сигнал i, оценка p[i]). Инвазивный SDR
    считается, если задан линейный оператор, получивший оценки.

    Args:
        bundle (MixtureBundle): Сигналы сцены.
        estimates (np.ndarray): Оценки дикторов, (K, L).
        reference_kind (str): Ключ из ``REFERENCE_KINDS``.
        operator (Optional[LinearOperator]): Оператор улучшения.
        scene_id (str): Идентификатор сцены для строк отчета.
        system (str): Имя системы.
        config (Optional[EvaluationConfig]): Параметры оценки.
        stft_config (Optional[StftConfig]): Параметры STFT для инвазивного SDR.

    Returns:
        MetricsReport: Строки по дикторам.
    """
    config = config or EvaluationConfig()
    stft_config = stft_config or StftConfig(sample_rate=bundle.sample_rate)
    references = reference_signals(bundle, reference_kind, config.ref_mic)
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if estimates.shape != references.shape:
        raise MetricsError(f"Форма оценок {estimates.shape} не совпадает с опорными {references.shape}.")

    num_speakers = references.shape[0]
    bss = np.array([[bss_eval_sdr(references[i], estimates[j], config.tau_max, config.toeplitz_loading)
                     for j in range(num_speakers)] for i in range(num_speakers)])
    permutation = resolve_permutation(bss)

    invasive = None
    if operator is not None:
        images = analyze(bundle.x, stft_config)
        noise = analyze(bundle.n, stft_config)
        # Выход permutation[i] оператора предназначен источнику i.
        target_map = np.argsort(permutation)
        invasive = invasive_sdr(operator, images, noise, target_map=target_map)

    rows = []
    for i, j in enumerate(permutation):
        rows.append(MetricRow(
            scene_id=scene_id,
            speaker=i,
            estimate=int(j),
            reference=REFERENCE_KINDS[reference_kind],
            sdr_db=sdr(references[i], estimates[j]),
            si_sdr_db=si_sdr(references[i], estimates[j]),
            bsseval_sdr_db=float(bss[i, j]),
            invasive_sdr_db=None if invasive is None else float(invasive[j]),
            permutation=[int(p) for p in permutation],
        ))
    return MetricsReport(system=system, reference=REFERENCE_KINDS[reference_kind],
                         stft=stft_config.model_dump(), rows=rows)


def cross_metric_table(bundle: MixtureBundle, tau_max: int = 512, mics: Sequence[int] = (0, 1)) -> dict:
    """
    Сравнение метрик на «идеальных» кандидатах.

    Кандидаты: s, x_early@d, x@d, x+n@d для микрофонов ``mics``; опорные
    сигналы: s, x_early@0, x@0. Для каждой пары считаются SI-SDR и
    BSS-Eval SDR, усредненные по дикторам (бесконечности сохраняются).

    Returns:
        dict: ``{"si_sdr_db" | "bsseval_sdr_db": {кандидат: {опорный: дБ}}}``.
    """
    candidates = {"s": bundle.s}
    for prefix, signals in (("x_early", bundle.x_early), ("x", bundle.x), ("x+n", bundle.x + bundle.n[None])):
        for mic in mics:
            candidates[f"{prefix}@{mic}"] = signals[:, mic]
    references = {"s": bundle.s, "x_early@0": bundle.x_early[:, 0], "x@0": bundle.x[:, 0]}
    table = {"si_sdr_db": {}, "bsseval_sdr_db": {}}
    for name, candidate in candidates.items():
        table["si_sdr_db"][name] = {}
        table["bsseval_sdr_db"][name] = {}
        for ref_name, reference in references.items():
            si = [si_sdr(reference[k], candidate[k]) for k in range(bundle.num_speakers)]
            bss = [bss_eval_sdr(reference[k], candidate[k], tau_max) for k in range(bundle.num_speakers)]
            table["si_sdr_db"][name][ref_name] = float(np.mean(si))
            table["bsseval_sdr_db"][name][ref_name] = float(np.mean(bss))
    return table
