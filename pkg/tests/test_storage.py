import json
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from src.beamformer import BeamformerSolution, MaskingOperator
from src.mixer import build_scene_bundle
from src.scene_geometry import GeometryConfig, sample_scene
from src.storage import (MANIFEST_NAME, DatasetManifest, SceneEntry, SeparationManifest, SeparationRecord,
                         StorageError, load_bundle, load_manifest, load_operator, load_rirs,
                         load_separation_manifest, read_wav, save_bundle, save_operator, save_rirs,
                         scene_file_names, write_manifest, write_wav)
from tests.conftest import make_rirs


@pytest.fixture
def scene():
    """Фикстура: случайная сцена."""
    return sample_scene(GeometryConfig(), 17)


@pytest.fixture
def entry(scene):
    """Фикстура: запись манифеста для сцены."""
    return SceneEntry(scene_id="scene_00000", seed=scene.seed, directory="scenes/scene_00000",
                      files=scene_file_names(2), geometry=scene, t60=scene.t60, snr=scene.snr, offsets=[0, 10],
                      start_samples=[0, 0], num_samples=1000, sample_rate=8000)


def test_wav_roundtrip_keeps_channels(tmp_path):
    """Тест: многоканальный WAV читается в форме (C, L) с точностью float32."""
    data = np.random.default_rng(0).uniform(-0.5, 0.5, (3, 1000))

    path = write_wav(tmp_path / "a" / "x.wav", data, 8000)
    loaded, sample_rate = read_wav(path)

    assert sample_rate == 8000
    assert loaded.shape == (3, 1000)
    np.testing.assert_allclose(loaded, data, atol=1e-7)


def test_read_missing_wav_raises(tmp_path):
    """Тест: отсутствующий файл - ошибка хранения."""
    with pytest.raises(StorageError, match="не найден"):
        read_wav(tmp_path / "absent.wav")


def test_rirs_roundtrip(tmp_path):
    """Тест: ИХ сохраняются без потерь."""
    rirs = make_rirs(num_sources=2, num_mics=3)

    loaded = load_rirs(save_rirs(tmp_path / "rirs.npz", rirs))

    np.testing.assert_array_equal(loaded.h, rirs.h)
    np.testing.assert_array_equal(loaded.h_late, rirs.h_late)
    assert loaded.reflection_coefficient == rirs.reflection_coefficient


def test_operator_roundtrip(tmp_path):
    """Тест: оба вида операторов сохраняются и читаются обратно."""
    rng = np.random.default_rng(1)
    beamformer = BeamformerSolution(weights=rng.standard_normal((2, 5, 3)) + 1j, ref_channel=np.array([0, 2]))
    masking = MaskingOperator(masks=rng.random((2, 4, 5)), ref_channel=1)

    loaded_beamformer = load_operator(save_operator(tmp_path / "bf.npz", beamformer))
    loaded_masking = load_operator(save_operator(tmp_path / "mask.npz", masking))

    assert isinstance(loaded_beamformer, BeamformerSolution)
    np.testing.assert_array_equal(loaded_beamformer.weights, beamformer.weights)
    assert isinstance(loaded_masking, MaskingOperator)
    assert loaded_masking.ref_channel == 1
    np.testing.assert_allclose(loaded_masking.masks, masking.masks, atol=1e-7)


def test_manifest_rejects_duplicate_ids(entry):
    """Тест: повторяющиеся scene_id отклоняются."""
    with pytest.raises(ValidationError, match="Повторяющиеся"):
        DatasetManifest(master_seed=0, entries=[entry, entry])


def test_manifest_roundtrip_from_directory(tmp_path, entry):
    """Тест: манифест читается по пути к папке набора."""
    manifest = DatasetManifest(master_seed=4, entries=[entry])
    write_manifest(tmp_path / MANIFEST_NAME, manifest)

    loaded = load_manifest(tmp_path)

    assert loaded == manifest
    assert loaded.entries[0].geometry == entry.geometry


def test_manifest_with_infinite_snr(tmp_path, entry):
    """Тест: бесконечный SNR сохраняется и читается."""
    manifest = DatasetManifest(master_seed=0, entries=[entry.model_copy(update={"snr": float("inf")})])
    write_manifest(tmp_path / MANIFEST_NAME, manifest)

    assert load_manifest(tmp_path / MANIFEST_NAME).entries[0].snr == float("inf")


def test_invalid_manifest_raises(tmp_path):
    """Тест: манифест неверной структуры - ошибка хранения."""
    (tmp_path / MANIFEST_NAME).write_text(json.dumps({"entries": "nope"}), encoding="utf-8")

    with pytest.raises(StorageError, match="Некорректный манифест"):
        load_manifest(tmp_path)


def test_missing_manifest_raises(tmp_path):
    """Тест: отсутствующий манифест - ошибка хранения."""
    with pytest.raises(StorageError, match="не найден"):
        load_separation_manifest(tmp_path)


@patch("src.storage.os.replace")
def test_failed_write_leaves_previous_manifest(mock_replace, tmp_path, entry):
    """Тест: сбой записи не портит прежний манифест и не оставляет временных файлов."""
    path = tmp_path / MANIFEST_NAME
    path.write_text("previous", encoding="utf-8")
    mock_replace.side_effect = OSError("disk full")

    with pytest.raises(StorageError, match="disk full"):
        write_manifest(path, DatasetManifest(master_seed=0, entries=[entry]))

    assert path.read_text(encoding="utf-8") == "previous"
    assert [p.name for p in tmp_path.iterdir()] == [MANIFEST_NAME]


def test_separation_manifest_roundtrip(tmp_path):
    """Тест: манифест оценок сохраняется и читается."""
    manifest = SeparationManifest(method="observation", records=[
        SeparationRecord(scene_id="scene_00000", status="успех", estimates=["scene_00000/estimate_0.wav"]),
        SeparationRecord(scene_id="scene_00001", status="ошибка", error="boom"),
    ])
    write_manifest(tmp_path / "separation.json", manifest)

    assert load_separation_manifest(tmp_path) == manifest


def test_bundle_roundtrip(tmp_path, scene, entry):
    """Тест: все сигналы сцены записываются и восстанавливаются."""
    rng = np.random.default_rng(2)
    bundle = build_scene_bundle(scene, [rng.standard_normal(1000) * 0.1, rng.standard_normal(900) * 0.1],
                                rirs=make_rirs(num_sources=2, num_mics=scene.num_mics, length=300))
    files = save_bundle(tmp_path / entry.directory, bundle)
    entry = entry.model_copy(update={"files": files, "offsets": bundle.offset.tolist()})

    loaded = load_bundle(tmp_path, entry)

    assert (tmp_path / entry.directory / "rirs.npz").exists()
    assert loaded.x.shape == bundle.x.shape
    np.testing.assert_allclose(loaded.y, bundle.y, atol=1e-6)
    np.testing.assert_allclose(loaded.x_early, bundle.x_early, atol=1e-6)
    np.testing.assert_allclose(loaded.s, bundle.s, atol=1e-7)
    np.testing.assert_array_equal(loaded.offset, bundle.offset)
