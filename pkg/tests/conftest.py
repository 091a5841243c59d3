import numpy as np
import pytest

from src.config import PipelineConfig
from src.cacgmm import CacgmmConfig
from src.pipeline import generate_scene
from src.rir_engine import RIRSet, split_early_late
from src.scene_geometry import GeometryConfig, SceneGeometry
from src.sources import SyntheticSourceConfig
from src.storage import MANIFEST_NAME, DatasetManifest, write_manifest


def make_scene(mics, sources, room=(8.0, 6.0, 3.0), t60=0.3, snr=25.0, seed=7, sample_rate=8000) -> SceneGeometry:
    """Собирает сцену с заданными позициями (без случайной выборки)."""
    mics = [tuple(float(v) for v in m) for m in mics]
    center = tuple(np.mean(np.asarray(mics, dtype=float), axis=0).tolist())
    return SceneGeometry(
        scene_id="manual",
        seed=seed,
        sample_rate=sample_rate,
        room_dims=room,
        array_center=center,
        array_rotation=(0.0, 0.0, 0.0),
        array_radius=0.1,
        mic_positions=mics,
        source_positions=[tuple(float(v) for v in s) for s in sources],
        t60=t60,
        snr=snr,
    )


def make_rirs(num_sources: int, num_mics: int, length: int = 1200, decay: float = 0.01, seed: int = 0,
              sample_rate: int = 8000) -> RIRSet:
    """Синтетический набор ИХ: прямой путь в первом отсчете и экспоненциально затухающий хвост."""
    rng = np.random.default_rng(seed)
    tail = rng.standard_normal((num_sources, num_mics, length)) * 0.3 * np.exp(-decay * np.arange(length))
    h = tail
    h[..., 0] = 1.0
    rirs = RIRSet(h=h, start_sample=np.zeros(num_sources, dtype=np.int64), sample_rate=sample_rate,
                  t60_target=0.3, delay_compensation=np.zeros(num_sources, dtype=np.int64),
                  reflection_coefficient=0.8)
    return split_early_late(rirs)


@pytest.fixture(scope="session")
def small_config():
    """Фикстура: конфигурация с короткими ИХ, короткими источниками и малым числом итераций EM."""
    return PipelineConfig(
        geometry=GeometryConfig(t60_range=(0.2, 0.25)),
        synthetic=SyntheticSourceConfig(duration_range=(1.0, 1.5)),
        cacgmm=CacgmmConfig(iterations=5),
    )


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_config):
    """Фикстура: набор из одной синтетической сцены на диске."""
    root = tmp_path_factory.mktemp("dataset")
    entry = generate_scene(small_config, root, master_seed=3, index=0)
    manifest = DatasetManifest(master_seed=3, entries=[entry])
    write_manifest(root / MANIFEST_NAME, manifest)
    return root, manifest
