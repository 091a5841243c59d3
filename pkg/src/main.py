import argparse
import asyncio
import sys
from pathlib import Path

from src.config import ConfigError, get_config, load_pipeline_config
from src.logger import setup_logger
from src.metrics import REFERENCE_KINDS, MetricsError
from src.mixer import MixingError
from src.pipeline import run_compare, run_evaluate, run_generate, run_report, run_separate
from src.rir_engine import RirError
from src.scene_geometry import GeometryError
from src.separator import NUMERICAL_ERRORS, SEPARATION_STRATEGIES, STATUS_SUCCESS, SeparationError
from src.stft import StftError
from src.storage import StorageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Порядок важен: InfeasibleT60Error наследует RirError и должна давать код 3
DATA_ERRORS = (GeometryError, RirError, MixingError, StftError, MetricsError, StorageError, SeparationError, OSError)


class CliOperationError(Exception):
    """Недопустимое значение аргумента командной строки."""

    def __init__(self, message: str, exit_code: int = EXIT_USAGE):
        super().__init__(message)
        self.exit_code = exit_code


class MixlabArgumentParser(argparse.ArgumentParser):
    """Парсер аргументов, завершающийся кодом 1 при ошибке использования."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Ошибка: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser(default_jobs: int = 1) -> argparse.ArgumentParser:
    """Создает парсер с подкомандами generate, separate, evaluate, report, compare."""
    parser = MixlabArgumentParser(prog="mixlab", description="Моделирование, разделение и оценка смесей речи.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    generate = subparsers.add_parser("generate", help="Сгенерировать набор сцен.")
    generate.add_argument("--config", type=Path, help="JSON-файл конфигурации конвейера.")
    generate.add_argument("--seed", type=int, default=0, help="Главный seed набора.")
    generate.add_argument("--count", type=int, default=1, help="Число сцен.")
    generate.add_argument("--jobs", type=int, default=default_jobs, help="Число параллельно обрабатываемых сцен.")
    generate.add_argument("--out", type=Path, required=True, help="Папка набора.")
    sources = generate.add_mutually_exclusive_group(required=True)
    sources.add_argument("--synthetic", action="store_true", help="Синтетические речеподобные источники.")
    sources.add_argument("--sources", type=Path, help="Папка с моно-WAV источниками.")

    separate = subparsers.add_parser("separate", help="Разделить сцены набора.")
    separate.add_argument("--config", type=Path, help="JSON-файл конфигурации конвейера.")
    separate.add_argument("--manifest", type=Path, required=True, help="Манифест набора или его папка.")
    separate.add_argument("--method", choices=list(SEPARATION_STRATEGIES), default="cacgmm-mvdr")
    separate.add_argument("--jobs", type=int, default=default_jobs)
    separate.add_argument("--out", type=Path, help="Папка оценок (по умолчанию <набор>/estimates/<метод>).")

    evaluate = subparsers.add_parser("evaluate", help="Оценить разделение.")
    evaluate.add_argument("--config", type=Path, help="JSON-файл конфигурации конвейера.")
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--estimates", type=Path, required=True, help="Папка оценок.")
    evaluate.add_argument("--reference", choices=list(REFERENCE_KINDS), default="source")
    evaluate.add_argument("--jobs", type=int, default=default_jobs)
    evaluate.add_argument("--out", type=Path, help="Путь к CSV (JSON пишется рядом).")

    report = subparsers.add_parser("report", help="Итоговая таблица по файлам оценки.")
    report.add_argument("evaluations", type=Path, nargs="+", help="Файлы оценки (JSON или CSV).")
    report.add_argument("--out", type=Path, help="Файл Markdown для таблицы.")
    report.add_argument("--manifest", type=Path, help="Манифест набора: добавляет разбивку по углу между дикторами.")

    compare = subparsers.add_parser("compare", help="Таблица сравнения метрик на идеальных кандидатах.")
    compare.add_argument("--manifest", type=Path, required=True)
    compare.add_argument("--count", type=int, help="Сколько первых сцен использовать.")
    compare.add_argument("--out", type=Path, help="Базовый путь для .json и .md.")
    return parser


def validate_arguments(args: argparse.Namespace) -> None:
    """Проверяет значения, которые argparse не ограничивает: --jobs и --count должны быть положительными."""
    for name in ("jobs", "count"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise CliOperationError(f"--{name} должно быть положительным, получено {value}.")


def dispatch(args: argparse.Namespace, logger) -> int:
    """
    Выполняет подкоманду.

    Returns:
        int: Код завершения.
    """
    validate_arguments(args)
    if args.command == "report":
        print(run_report(args.evaluations, args.out, args.manifest))
        return EXIT_OK
    if args.command == "compare":
        _, table = run_compare(args.manifest, args.out, args.count)
        print(table)
        return EXIT_OK

    config = load_pipeline_config(args.config)

    if args.command == "generate":
        manifest = asyncio.run(run_generate(config, args.out, args.count, args.seed,
                                            source_dir=None if args.synthetic else args.sources, jobs=args.jobs))
        logger.info(f"Сгенерировано сцен: {len(manifest.entries)}.")
        return EXIT_OK

    if args.command == "separate":
        _, results = asyncio.run(run_separate(config, args.manifest, args.method, args.out, args.jobs))
        failed = [r for r in results if r["status"] != STATUS_SUCCESS]
        if not failed:
            return EXIT_OK
        logger.error(f"Не удалось разделить сцен: {len(failed)} из {len(results)}.")
        return EXIT_NUMERICAL if any(r.get("numerical") for r in failed) else EXIT_DATA

    # evaluate
    report = asyncio.run(run_evaluate(config, args.manifest, args.estimates, args.reference, args.out, args.jobs))
    logger.info(f"Оценено строк: {len(report.rows)}.")
    return EXIT_OK


def main(argv=None):
    """
    Основная точка входа в приложение.

    Анализирует аргументы командной строки и выполняет подкоманду.
    Коды завершения: 0 - успех, 1 - ошибка использования или конфигурации,
    2 - ошибка данных, 3 - численный сбой.
    """
    try:
        app_config = get_config()
    except ConfigError as e:
        print(f"Ошибка конфигурации: {e}", file=sys.stderr)
        sys.exit(EXIT_USAGE)

    args = build_parser(app_config.JOBS).parse_args(argv)

    logger = setup_logger(
        "src",
        level=app_config.LOG_LEVEL,
        to_file=app_config.LOG_TO_FILE,
        file_path=app_config.LOG_FILE_PATH,
    )

    try:
        code = dispatch(args, logger)
    except ConfigError as e:
        logger.error(f"Ошибка конфигурации: {e}")
        code = EXIT_USAGE
    except NUMERICAL_ERRORS as e:
        logger.critical(f"Численный сбой: {e}", exc_info=True)
        code = EXIT_NUMERICAL
    except DATA_ERRORS as e:
        logger.critical(f"Ошибка данных: {e}", exc_info=True)
        code = EXIT_DATA
    except CliOperationError as e:
        logger.error(f"Ошибка аргументов: {e}")
        code = e.exit_code
    sys.exit(code)


if __name__ == "__main__":
    main()  # pragma: no cover
