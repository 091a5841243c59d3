import math

import numpy as np
import pytest

from src.rir_engine import (InfeasibleT60Error, RirConfig, RirError, RIRSet, detect_rir_start, estimate_t60,
                            image_source_response, schroeder_curve, simulate_rir, split_early_late,
                            t60_to_absorption)
from tests.conftest import make_scene

SOUND_SPEED = 343.0
FS = 8000


def test_t60_to_absorption_matches_sabine():
    """Тест: коэффициент отражения по формуле Сэбина для комнаты 8×6×3 м."""
    expected = math.sqrt(1 - 0.161 * 144 / (180 * 0.35))

    assert t60_to_absorption((8, 6, 3), 0.35) == pytest.approx(expected, rel=1e-12)


def test_t60_to_absorption_long_t60_approaches_one():
    """Тест: при T60 → ∞ коэффициент отражения стремится к 1."""
    beta = t60_to_absorption((8, 6, 3), 1e6)

    assert 0.999999 < beta < 1


def test_t60_to_absorption_infeasible_room():
    """Тест: комната 1×1×1 м и T60 = 0.02 с недостижимы по Сэбину (α ≈ 1.34)."""
    with pytest.raises(InfeasibleT60Error):
        t60_to_absorption((1, 1, 1), 0.02)


def test_t60_to_absorption_rejects_non_positive():
    """Тест: неположительное T60 - ошибка."""
    with pytest.raises(RirError):
        t60_to_absorption((8, 6, 3), 0.0)


def test_t60_to_absorption_eyring():
    """Тест: по Эйрингу α = 1 − exp(−0.161·V/(S·T60)); недостижимых T60 нет."""
    expected = math.sqrt(math.exp(-0.161 * 144 / (180 * 0.35)))

    assert t60_to_absorption((8, 6, 3), 0.35, model="eyring") == pytest.approx(expected, rel=1e-12)
    assert 0 < t60_to_absorption((1, 1, 1), 0.02, model="eyring") < 1


def test_eyring_reflection_is_weaker_than_sabine():
    """Тест: при одинаковом T60 коэффициент отражения по Эйрингу больше, чем по Сэбину."""
    assert t60_to_absorption((8, 6, 3), 0.2, model="eyring") > t60_to_absorption((8, 6, 3), 0.2)


def test_schroeder_t60_short_target_with_eyring():
    """Тест: для T60 = 0.2 с формула Эйринга дает спад в пределах ±20%."""
    scene = make_scene([(4.0, 3.0, 1.3)], [(5.3, 3.6, 1.7)], t60=0.2)

    rirs = simulate_rir(scene, rir_length=int(2 * 0.2 * FS), config=RirConfig(absorption_model="eyring"))

    assert estimate_t60(rirs.h[0, 0], FS) == pytest.approx(0.2, rel=0.2)


@pytest.mark.parametrize("h, expected", [
    ([0, 0, 1.0, 0.05], 2),
    ([0, 0, 0, 0, 0.05, 0.091, 0.3, 0.9, 0.1], 5),
])
def test_detect_rir_start_single_channel(h, expected):
    """Тест: первый отсчет больше максимума, деленного на десять."""
    assert detect_rir_start(np.asarray(h)) == expected


def test_detect_rir_start_takes_minimum_over_channels():
    """Тест: результат - минимум стартов по каналам."""
    h = np.zeros((2, 12))
    h[0, 7] = 1.0
    h[1, 4] = 0.5

    assert detect_rir_start(h) == 4


def test_detect_rir_start_zero_channel_raises():
    """Тест: нулевой канал - ошибка."""
    with pytest.raises(RirError):
        detect_rir_start(np.zeros((2, 10)))


def test_split_early_late_boundary_and_identity():
    """Тест: граница 12 + 400 = 412, разложение точное, носители не пересекаются."""
    rng = np.random.default_rng(0)
    h = rng.standard_normal((1, 2, 1000))
    rirs = RIRSet(h=h, start_sample=np.array([12]), sample_rate=FS, t60_target=0.3,
                  delay_compensation=np.zeros(1, dtype=int), reflection_coefficient=0.9)

    split = split_early_late(rirs)

    np.testing.assert_array_equal(split.h_early + split.h_late, h)
    assert np.all(split.h_early[..., 412:] == 0)
    assert np.all(split.h_late[..., :412] == 0)
    assert np.sum(h ** 2) == pytest.approx(np.sum(split.h_early ** 2) + np.sum(split.h_late ** 2))


def test_split_early_late_short_rir_keeps_everything_early():
    """Тест: граница за концом ИХ - ранняя часть совпадает с полной, поздняя нулевая."""
    h = np.ones((1, 1, 100))
    rirs = RIRSet(h=h, start_sample=np.array([0]), sample_rate=FS, t60_target=0.3,
                  delay_compensation=np.zeros(1, dtype=int), reflection_coefficient=0.9)

    split = split_early_late(rirs)

    np.testing.assert_array_equal(split.h_early, h)
    assert not np.any(split.h_late)


@pytest.mark.parametrize("distance", [1.0, 1.5, 1.93])
def test_anechoic_peak_matches_free_field(distance):
    """Тест: без отражений пик на d/c·fs отсчетах, площадь ядра ≈ 1/(4πd) с точностью 1%."""
    mic = (4.0, 3.0, 1.5)
    source = (4.0 + distance, 3.0, 1.5)
    scene = make_scene([mic], [source])

    rirs = simulate_rir(scene, max_order=0, rir_length=400, compensate_delay=False)
    h = rirs.h[0, 0]

    assert abs(int(np.argmax(np.abs(h))) - round(distance / SOUND_SPEED * FS)) <= 1
    assert h.sum() == pytest.approx(1 / (4 * np.pi * distance), rel=0.01)
    assert not np.any(rirs.h_late)


def test_nearer_mic_peaks_first():
    """Тест: пик ИХ ближнего микрофона наступает не позже пика дальнего."""
    scene = make_scene([(3.0, 3.0, 1.5), (3.5, 3.0, 1.5)], [(2.0, 3.2, 1.6)], t60=0.2)

    rirs = simulate_rir(scene)

    assert np.argmax(np.abs(rirs.h[0, 0])) <= np.argmax(np.abs(rirs.h[0, 1]))


def test_delay_compensation_preserves_inter_channel_delays():
    """Тест: компенсация сдвигает все каналы источника одинаково."""
    scene = make_scene([(3.0, 3.0, 1.5), (3.1, 3.0, 1.5), (3.0, 3.1, 1.5)],
                       [(4.6, 3.7, 1.6), (1.9, 2.2, 1.4)], t60=0.2)

    raw = simulate_rir(scene, max_order=0, rir_length=600, compensate_delay=False)
    compensated = simulate_rir(scene, max_order=0, rir_length=600)

    for k in range(scene.num_sources):
        peaks_raw = np.argmax(np.abs(raw.h[k]), axis=-1)
        peaks_comp = np.argmax(np.abs(compensated.h[k]), axis=-1)
        np.testing.assert_array_equal(peaks_raw - peaks_comp, compensated.delay_compensation[k])
    np.testing.assert_array_equal(compensated.start_sample, 0)


def test_simulated_rir_split_is_exact():
    """Тест: ранняя и поздняя части смоделированной ИХ в сумме дают ИХ точно."""
    scene = make_scene([(3.0, 3.0, 1.5), (3.1, 3.0, 1.5)], [(4.2, 3.9, 1.7)], t60=0.2)

    rirs = simulate_rir(scene)

    assert rirs.h.shape == (1, 2, math.ceil(1.25 * 0.2 * FS))
    np.testing.assert_array_equal(rirs.h_early + rirs.h_late, rirs.h)
    boundary = rirs.start_sample[0] + 400
    assert not np.any(rirs.h_late[..., :boundary])
    assert not np.any(rirs.h_early[..., boundary:])


def test_image_method_is_reciprocal():
    """Тест: перестановка источника и микрофона дает ту же ИХ."""
    room = np.array([7.0, 5.0, 3.0])
    first = np.array([2.0, 1.5, 1.2])
    second = np.array([4.5, 3.1, 1.8])

    forward = image_source_response(first, second[None], room, 0.8, 1500, FS, max_order=4)
    backward = image_source_response(second, first[None], room, 0.8, 1500, FS, max_order=4)

    assert np.linalg.norm(forward - backward) <= 1e-6 * np.linalg.norm(forward)


def test_schroeder_t60_close_to_target():
    """Тест: T60 по кривой Шрёдера в пределах ±20% от заданного."""
    scene = make_scene([(4.0, 3.0, 1.3)], [(5.3, 3.6, 1.7)], t60=0.4)

    rirs = simulate_rir(scene, rir_length=int(2 * 0.4 * FS))
    t60 = estimate_t60(rirs.h[0, 0], FS)

    assert t60 == pytest.approx(0.4, rel=0.2)


def test_schroeder_curve_starts_at_zero_db():
    """Тест: кривая спада нормирована к 0 дБ и не возрастает."""
    h = np.exp(-np.arange(2000) / 200.0)

    curve = schroeder_curve(h)

    assert curve[0] == 0.0
    assert np.all(np.diff(curve) <= 1e-12)


def test_estimate_t60_of_exponential_decay():
    """Тест: для экспоненциального спада оценка совпадает с аналитическим T60."""
    decay_time = 0.3
    t = np.arange(int(1.5 * FS)) / FS
    h = 10 ** (-3 * t / decay_time)

    assert estimate_t60(h, FS) == pytest.approx(decay_time, rel=0.02)


def test_simulate_rir_rejects_source_outside_room():
    """Тест: источник вне комнаты - ошибка."""
    scene = make_scene([(3.0, 3.0, 1.5)], [(9.0, 3.0, 1.5)])

    with pytest.raises(RirError, match="вне комнаты"):
        simulate_rir(scene, max_order=0, rir_length=400)


def test_simulate_rir_too_short_for_direct_path():
    """Тест: ИХ без компенсации должна вмещать прямой путь."""
    scene = make_scene([(1.0, 3.0, 1.5)], [(6.0, 3.0, 1.5)])

    with pytest.raises(RirError, match="прямой путь"):
        simulate_rir(scene, max_order=0, rir_length=50, compensate_delay=False)


def test_rir_config_requires_odd_kernel():
    """Тест: четная длина ядра дробной задержки отклоняется."""
    with pytest.raises(ValueError):
        RirConfig(kernel_taps=80)
