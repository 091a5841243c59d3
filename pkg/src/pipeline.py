"""
Пакетные операции за командами CLI: генерация набора, разделение,
оценка, итоговые таблицы.

Сцены обрабатываются параллельно в потоках (``asyncio.to_thread``) с
ограничением ``jobs``; результаты собираются в порядке сцен, поэтому
содержимое файлов не зависит от числа потоков.
"""
import asyncio
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Awaitable, Callable, Iterable, Optional, Sequence

import numpy as np

from src.config import PipelineConfig
from src.logger import scene_logger
from src.metrics import MetricsError, MetricsReport, cross_metric_table, evaluate_bundle, load_report
from src.mixer import build_scene_bundle, relative_overlap
from src.report import render_angular_table, render_cross_table, render_report_table
from src.scene_geometry import angular_distance, derive_scene_seed, sample_scene
from src.separator import STATUS_SUCCESS, SceneInput, separate_single_scene
from src.sources import load_source, pick_sources, synthesize_speech_like
from src.storage import (MANIFEST_NAME, SCENES_DIR, SEPARATION_MANIFEST_NAME, DatasetManifest, SceneEntry,
                         SeparationManifest, SeparationRecord, StorageError, dataset_root, load_bundle,
                         load_manifest, load_operator, load_separation_manifest, read_wav, save_bundle,
                         write_text_atomic, write_manifest, write_scene_json)

logger = logging.getLogger(__name__)


async def gather_limited(func: Callable[[Any], Awaitable[Any]], items: Sequence[Any], jobs: int) -> list:
    """Запускает ``func`` для всех элементов, не более ``jobs`` одновременно; порядок результатов сохраняется."""
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def run(item):
        async with semaphore:
            return await func(item)

    return await asyncio.gather(*(run(item) for item in items))


def _config_echo(config: PipelineConfig) -> dict:
    return json.loads(config.model_dump_json())


def ensure_writable(directory: Path) -> Path:
    """
    Создает папку и проверяет право записи.

    Raises:
        StorageError: Если папку нельзя создать или в нее нельзя писать.
    """
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Не удалось создать папку {directory}: {e}", details=str(directory)) from e
    if not os.access(directory, os.W_OK):
        raise StorageError(f"Нет прав на запись в папку: {directory}", details=str(directory))
    return directory


def generate_scene(config: PipelineConfig, out_dir: Path, master_seed: int, index: int,
                   source_dir: Optional[Path] = None) -> SceneEntry:
    """
    Генерирует одну сцену: геометрия → источники → ИХ → смесь → файлы.

    Args:
        config (PipelineConfig): Конфигурация.
        out_dir (Path): Папка набора.
        master_seed (int): Главный seed.
        index (int): Номер сцены.
        source_dir (Optional[Path]): Папка с моно-WAV; None - синтетические источники.

    Returns:
        SceneEntry: Запись для манифеста.
    """
    seed = derive_scene_seed(master_seed, index)
    scene_id = f"scene_{index:05d}"
    log = scene_logger(logger, scene_id)
    scene = sample_scene(config.geometry, seed, scene_id)
    fs = config.geometry.sample_rate
    if source_dir is None:
        names = ["synthetic"] * scene.num_sources
        signals = [synthesize_speech_like(config.synthetic, fs, seed, k) for k in range(scene.num_sources)]
    else:
        paths = pick_sources(source_dir, scene.num_sources, seed)
        names = [p.name for p in paths]
        signals = [load_source(p, fs) for p in paths]

    bundle = build_scene_bundle(scene, signals, seed, rir_config=config.rir, config=config.mixer)
    directory = f"{SCENES_DIR}/{scene_id}"
    files = save_bundle(Path(out_dir) / directory, bundle)
    entry = SceneEntry(
        scene_id=scene_id,
        seed=seed,
        directory=directory,
        files=files,
        geometry=scene,
        t60=scene.t60,
        snr=bundle.snr,
        offsets=bundle.offset.tolist(),
        start_samples=bundle.rirs.start_sample.tolist(),
        num_samples=bundle.num_samples,
        sample_rate=fs,
        angular_distance_deg=angular_distance(scene) if scene.num_sources > 1 else None,
        relative_overlap=relative_overlap([len(s) for s in signals], bundle.offset.tolist()),
        sources=names,
    )
    write_scene_json(Path(out_dir) / directory / files["scene"], entry)
    log.info(f"Сцена сгенерирована: T60={scene.t60:.3f} с, SNR={bundle.snr:.2f} дБ.")
    return entry


async def run_generate(config: PipelineConfig, out_dir: Path, count: int, master_seed: int,
                       source_dir: Optional[Path] = None, jobs: int = 1) -> DatasetManifest:
    """
    Генерирует набор из ``count`` сцен и записывает манифест.

    Манифест пишется только после успешной генерации всех сцен.

    Returns:
        DatasetManifest: Манифест набора.
    """
    out_dir = ensure_writable(out_dir)
    if count < 1:
        raise StorageError(f"Число сцен должно быть положительным, получено {count}.")
    logger.info(f"Генерация {count} сцен в {out_dir} (seed={master_seed}, потоков: {jobs}).")

    async def one(index: int) -> SceneEntry:
        return await asyncio.to_thread(generate_scene, config, out_dir, master_seed, index, source_dir)

    entries = await gather_limited(one, list(range(count)), jobs)
    manifest = DatasetManifest(master_seed=master_seed, config=_config_echo(config), entries=entries)
    write_manifest(out_dir / MANIFEST_NAME, manifest)
    logger.info(f"Манифест записан: {out_dir / MANIFEST_NAME}")
    return manifest


async def run_separate(config: PipelineConfig, manifest_path: Path, method: str,
                       out_dir: Optional[Path] = None, jobs: int = 1) -> tuple[SeparationManifest, list[dict]]:
    """
    Разделяет все сцены набора выбранным методом.

    Неудачная сцена не прерывает обработку остальных.

    Returns:
        tuple: Манифест оценок и список статусов по сценам.
    """
    manifest = load_manifest(manifest_path)
    root = dataset_root(manifest_path)
    out_dir = ensure_writable(out_dir or root / "estimates" / method)
    tasks = [{"method": method, "scene": SceneInput(entry=entry, root=root, config=config), "out_dir": out_dir}
             for entry in manifest.entries]
    results = await gather_limited(separate_single_scene, tasks, jobs)

    records = [SeparationRecord(scene_id=r["scene_id"], status=r["status"], estimates=r.get("estimates", []),
                                operator=r.get("operator"), error=r.get("error")) for r in results]
    separation = SeparationManifest(method=method, records=records)
    write_manifest(out_dir / SEPARATION_MANIFEST_NAME, separation)
    failed = sum(1 for r in results if r["status"] != STATUS_SUCCESS)
    logger.info(f"Разделение '{method}': успешно {len(results) - failed}, с ошибкой {failed}.")
    return separation, results


def evaluate_scene(config: PipelineConfig, root: Path, entry: SceneEntry, estimates_dir: Path,
                   record: SeparationRecord, method: str, reference_kind: str) -> MetricsReport:
    """Оценивает одну сцену по сохраненным оценкам и (если есть) оператору."""
    bundle = load_bundle(root, entry)
    estimates = np.stack([read_wav(estimates_dir / name)[0][0] for name in record.estimates])
    operator = load_operator(estimates_dir / record.operator) if record.operator else None
    return evaluate_bundle(bundle, estimates, reference_kind, operator=operator, scene_id=entry.scene_id,
                           system=method, config=config.evaluation, stft_config=config.stft)


async def run_evaluate(config: PipelineConfig, manifest_path: Path, estimates_dir: Path, reference_kind: str,
                       out_path: Optional[Path] = None, jobs: int = 1) -> MetricsReport:
    """
    Оценивает все успешно разделенные сцены и пишет CSV (строки) и JSON (с агрегатами).

    Raises:
        MetricsError: Если оценок нет.
    """
    estimates_dir = Path(estimates_dir)
    if not (estimates_dir / SEPARATION_MANIFEST_NAME).exists():
        raise MetricsError(f"В {estimates_dir} нет оценок ({SEPARATION_MANIFEST_NAME} не найден).")
    manifest = load_manifest(manifest_path)
    root = dataset_root(manifest_path)
    separation = load_separation_manifest(estimates_dir)
    records = {r.scene_id: r for r in separation.records if r.status == STATUS_SUCCESS and r.estimates}
    entries = [entry for entry in manifest.entries if entry.scene_id in records]
    if not entries:
        raise MetricsError(f"В {estimates_dir} нет успешно разделенных сцен.")

    async def one(entry: SceneEntry) -> MetricsReport:
        return await asyncio.to_thread(evaluate_scene, config, root, entry, estimates_dir,
                                       records[entry.scene_id], separation.method, reference_kind)

    reports = await gather_limited(one, entries, jobs)
    report = reports[0].model_copy(deep=True)
    for other in reports[1:]:
        report.extend(other)

    out_path = Path(out_path) if out_path else estimates_dir / f"metrics_{reference_kind}.csv"
    report.write_csv(out_path.with_suffix(".csv"))
    report.write_json(out_path.with_suffix(".json"))
    means = report.aggregates()
    logger.info(f"Оценка '{separation.method}' ({len(entries)} сцен): BSS-Eval SDR "
                f"{means['bsseval_sdr_db']['mean']}, инвазивный SDR {means['invasive_sdr_db']['mean']}.")
    return report


def run_report(paths: Iterable[Path], out_path: Optional[Path] = None,
               manifest_path: Optional[Path] = None) -> str:
    """
    Строит итоговую таблицу по файлам оценки (JSON; для CSV берется JSON рядом).

    С манифестом набора к таблице добавляется разбивка BSS-Eval SDR по угловому
    расстоянию между дикторами.

    Raises:
        MetricsError: Если не передано ни одного файла.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise MetricsError("Не передано ни одного файла оценки.")
    reports = [load_report(p.with_suffix(".json")) for p in paths]
    table = render_report_table(reports)
    if manifest_path:
        angles = {entry.scene_id: entry.angular_distance_deg for entry in load_manifest(manifest_path).entries}
        table += "\n" + render_angular_table(reports, angles)
    if out_path:
        write_text_atomic(Path(out_path), table)
    return table


def average_over_scenes(values: Sequence[float]) -> tuple[float, int]:
    """
    Среднее по сценам без неконечных значений и число исключенных.

    Если конечных значений нет, а все бесконечности одного знака, возвращается
    эта бесконечность; при смеси +inf и −inf - NaN.
    """
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    excluded = int(values.size - finite.size)
    if finite.size:
        return float(finite.mean()), excluded
    if values.size and np.all(values == values[0]):
        return float(values[0]), excluded
    return math.nan, excluded


def run_compare(manifest_path: Path, out_path: Optional[Path] = None, count: Optional[int] = None,
                tau_max: int = 512) -> tuple[dict, str]:
    """
    Таблица сравнения метрик, усредненная по сценам набора.

    Неконечные значения (точное совпадение с опорным сигналом) в среднее не
    входят; их число по каждой ячейке пишется в JSON под ключом ``non_finite``.

    Returns:
        tuple: Словарь средних и таблица Markdown.
    """
    manifest = load_manifest(manifest_path)
    root = dataset_root(manifest_path)
    entries = manifest.entries[:count] if count else manifest.entries
    if not entries:
        raise MetricsError("Манифест не содержит сцен.")
    tables = [cross_metric_table(load_bundle(root, entry), tau_max) for entry in entries]
    averaged: dict = {}
    non_finite: dict = {}
    for metric, candidates in tables[0].items():
        averaged[metric], non_finite[metric] = {}, {}
        for candidate, refs in candidates.items():
            cells = {ref: average_over_scenes([t[metric][candidate][ref] for t in tables]) for ref in refs}
            averaged[metric][candidate] = {ref: mean for ref, (mean, _) in cells.items()}
            non_finite[metric][candidate] = {ref: excluded for ref, (_, excluded) in cells.items()}
    text = render_cross_table(averaged)
    if out_path:
        out_path = Path(out_path)
        summary = {"mean": averaged, "non_finite": non_finite}
        write_text_atomic(out_path.with_suffix(".json"), json.dumps(summary, indent=2))
        write_text_atomic(out_path.with_suffix(".md"), text)
    return averaged, text
