"""Текстовые таблицы итогов в формате Markdown."""
import math
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from src.metrics import METRIC_NAMES, MetricsError, MetricsReport

# Порядок строк: наблюдение, слепые системы, оракульные системы
SYSTEM_ORDER = [
    "observation",
    "cacgmm-mask",
    "cacgmm-mvdr",
    "irm-mvdr",
    "ibm-mvdr",
    "oracle-image",
    "oracle-early",
]

SYSTEM_LABELS = {
    "observation": "y (observation)",
    "cacgmm-mask": "cACGMM, masking",
    "cacgmm-mvdr": "cACGMM, MVDR",
    "irm-mvdr": "IRM, MVDR",
    "ibm-mvdr": "IBM, MVDR",
    "oracle-image": "x (speech image)",
    "oracle-early": "x_early (early image)",
}

ORACLE_SYSTEMS = {"irm-mvdr", "ibm-mvdr", "oracle-image", "oracle-early"}
ORACLE_MARK = " *"

# Границы интервалов углового расстояния между дикторами, градусы
ANGULAR_BINS_DEG = (0.0, 15.0, 45.0, 90.0, 180.0)


def format_db(value: Optional[float]) -> str:
    """Значение в дБ для таблицы: два знака, "inf"/"-inf" или "n/a"."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.2f}"


def _system_key(system: str) -> tuple:
    return (SYSTEM_ORDER.index(system), "") if system in SYSTEM_ORDER else (len(SYSTEM_ORDER), system)


def merge_reports(reports: Iterable[MetricsReport]) -> dict[str, MetricsReport]:
    """Объединяет отчеты одной системы."""
    merged: dict[str, MetricsReport] = {}
    for report in reports:
        if report.system in merged:
            merged[report.system].extend(report)
        else:
            merged[report.system] = report.model_copy(deep=True)
    return merged


def render_report_table(reports: Iterable[MetricsReport]) -> str:
    """
    Итоговая таблица: строки - системы в фиксированном порядке, столбцы - средние
    BSS-Eval SDR и инвазивный SDR. Оракульные системы помечены звездочкой.

    Returns:
        str: Таблица Markdown.
    """
    merged = merge_reports(reports)
    references = sorted({report.reference for report in merged.values()})
    lines = [
        "| System | BSS-Eval SDR / dB | Invasive SDR / dB |",
        "|---|---:|---:|",
    ]
    for system in sorted(merged, key=_system_key):
        aggregates = merged[system].aggregates()
        label = SYSTEM_LABELS.get(system, system) + (ORACLE_MARK if system in ORACLE_SYSTEMS else "")
        lines.append(f"| {label} | {format_db(aggregates['bsseval_sdr_db']['mean'])} "
                     f"| {format_db(aggregates['invasive_sdr_db']['mean'])} |")
    lines.append("")
    lines.append(f"Reference: {', '.join(references)}. * oracle information used.")
    return "\n".join(lines) + "\n"


def render_cross_table(table: dict) -> str:
    """
    Таблица сравнения метрик: строки - кандидаты, столбцы - опорные сигналы
    для SI-SDR и для BSS-Eval SDR.
    """
    si = table["si_sdr_db"]
    bss = table["bsseval_sdr_db"]
    candidates = list(si)
    references = list(next(iter(si.values())))
    header = ["Candidate"] + [f"SI-SDR vs {r}" for r in references] + [f"BSS-Eval vs {r}" for r in references]
    lines = ["| " + " | ".join(header) + " |", "|---" + "|---:" * (len(header) - 1) + "|"]
    for name in candidates:
        cells = [format_db(si[name][r]) for r in references] + [format_db(bss[name][r]) for r in references]
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _bin_labels(edges: Sequence[float]) -> list[str]:
    labels = [f"[{low:g}°, {high:g}°)" for low, high in zip(edges[:-2], edges[1:-1])]
    return labels + [f"[{edges[-2]:g}°, {edges[-1]:g}°]"]


def angular_bin(angle: Optional[float], edges: Sequence[float] = ANGULAR_BINS_DEG) -> Optional[int]:
    """Номер интервала угла между дикторами; None для NaN и углов вне ``edges``. Последний интервал замкнут."""
    if angle is None or math.isnan(angle) or not edges[0] <= angle <= edges[-1]:
        return None
    return min(int(np.searchsorted(edges, angle, side="right")) - 1, len(edges) - 2)


def render_angular_table(reports: Iterable[MetricsReport], angles: Mapping[str, Optional[float]],
                         edges: Sequence[float] = ANGULAR_BINS_DEG, metric: str = "bsseval_sdr_db") -> str:
    """
    Средний SDR по интервалам углового расстояния между дикторами.

    Строки - системы в порядке итоговой таблицы, столбцы - интервалы ``edges``
    (градусы). В ячейке - среднее конечных значений ``metric`` по строкам отчета,
    чьи сцены попали в интервал, и их число; пустой интервал - "n/a".

    Args:
        reports (Iterable[MetricsReport]): Отчеты систем.
        angles (Mapping[str, Optional[float]]): Угол между дикторами по ``scene_id``.
        edges (Sequence[float]): Возрастающие границы интервалов.
        metric (str): Имя метрики из ``METRIC_NAMES``.

    Returns:
        str: Таблица Markdown.

    Raises:
        MetricsError: Неизвестная метрика или неупорядоченные границы.
    """
    if metric not in METRIC_NAMES:
        raise MetricsError(f"Неизвестная метрика: {metric}.")
    if len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise MetricsError(f"Границы интервалов должны строго возрастать: {list(edges)}.")
    merged = merge_reports(reports)
    labels = _bin_labels(edges)
    lines = [
        "| System | " + " | ".join(labels) + " |",
        "|---" + "|---:" * len(labels) + "|",
    ]
    for system in sorted(merged, key=_system_key):
        binned: list[list[float]] = [[] for _ in labels]
        for row in merged[system].rows:
            index = angular_bin(angles.get(row.scene_id), edges)
            value = getattr(row, metric)
            if index is not None and value is not None and math.isfinite(value):
                binned[index].append(value)
        cells = [f"{format_db(float(np.mean(values)))} ({len(values)})" if values else "n/a" for values in binned]
        label = SYSTEM_LABELS.get(system, system) + (ORACLE_MARK if system in ORACLE_SYSTEMS else "")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.append(f"{metric} by angular distance between speakers; (n) - number of rows.")
    return "\n".join(lines) + "\n"
