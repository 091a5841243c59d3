import numpy as np
import pytest

from src.sources import SyntheticSourceConfig, load_source, pick_sources, synthesize_speech_like
from src.storage import StorageError, write_wav


@pytest.fixture
def source_dir(tmp_path):
    """Фикстура: папка с четырьмя моно-WAV по 0.5 с при 16 кГц."""
    rng = np.random.default_rng(0)
    for i in range(4):
        write_wav(tmp_path / f"utt_{i}.wav", 0.1 * rng.standard_normal(8000), 16000)
    return tmp_path


def test_synthetic_source_rms_and_length():
    """Тест: синтетический источник имеет заданный RMS и длину в диапазоне."""
    config = SyntheticSourceConfig()

    signal = synthesize_speech_like(config, 8000, seed=1, index=0)

    assert 2.0 * 8000 <= signal.size <= 4.0 * 8000
    assert np.sqrt(np.mean(signal ** 2)) == pytest.approx(config.rms)


def test_synthetic_source_is_deterministic():
    """Тест: одинаковые (seed, index) - одинаковый сигнал, разные index - разные."""
    first = synthesize_speech_like(seed=3, index=0)

    np.testing.assert_array_equal(first, synthesize_speech_like(seed=3, index=0))
    assert not np.array_equal(first[:1000], synthesize_speech_like(seed=3, index=1)[:1000])


def test_synthetic_source_has_pauses():
    """Тест: при вероятности паузы 0.5 в сигнале есть участки тишины."""
    config = SyntheticSourceConfig(silence_probability=0.5, duration_range=(4.0, 4.0))

    signal = synthesize_speech_like(config, 8000, seed=2)

    assert np.mean(signal == 0) > 0.05


def test_load_source_resamples(source_dir):
    """Тест: 16 кГц передискретизируется в 8 кГц."""
    signal = load_source(source_dir / "utt_0.wav", 8000)

    assert signal.ndim == 1
    assert signal.size == 4000


def test_load_source_rejects_stereo(tmp_path):
    """Тест: стерео-файл - ошибка."""
    write_wav(tmp_path / "stereo.wav", np.ones((2, 100)) * 0.1, 8000)

    with pytest.raises(StorageError, match="моно"):
        load_source(tmp_path / "stereo.wav")


def test_load_source_rejects_silence(tmp_path):
    """Тест: файл из одной тишины - ошибка."""
    write_wav(tmp_path / "silent.wav", np.zeros(100), 8000)

    with pytest.raises(StorageError, match="тишину"):
        load_source(tmp_path / "silent.wav")


def test_pick_sources_distinct_and_deterministic(source_dir):
    """Тест: выбираются разные файлы, выбор зависит только от seed."""
    first = pick_sources(source_dir, 2, seed=10)

    assert len(set(first)) == 2
    assert first == pick_sources(source_dir, 2, seed=10)


def test_pick_sources_not_enough_files(source_dir):
    """Тест: файлов меньше, чем нужно, - ошибка."""
    with pytest.raises(StorageError):
        pick_sources(source_dir, 5, seed=0)
