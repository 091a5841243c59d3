import numpy as np
import pytest

from src.beamformer import (BeamformerConfig, BeamformerError, BeamformerSolution, MaskingOperator, apply_linear,
                            channel_selection, estimate_covariances, mask_based_mvdr, mvdr_souden, oracle_masks,
                            select_reference, souden_matrix)
from src.cacgmm import MaskSet
from src.stft import StftConfig, TFTensor

NUM_BINS = 6


def make_tf(data: np.ndarray) -> TFTensor:
    return TFTensor(data=data, config=StftConfig(), num_samples=0)


@pytest.fixture
def observation():
    """Фикстура: случайный трехканальный спектр (D=3, T=50, F=6)."""
    rng = np.random.default_rng(0)
    shape = (3, 50, NUM_BINS)
    return make_tf(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@pytest.fixture
def masks():
    """Фикстура: маски двух дикторов и шума."""
    gamma = np.random.default_rng(1).dirichlet(np.ones(3), size=(50, NUM_BINS))
    return MaskSet(gamma=np.moveaxis(gamma, -1, 0), num_speakers=2)


def rank_one_target(steering: np.ndarray) -> np.ndarray:
    """Ковариация цели ранга 1 на каждой частоте, (F, D, D)."""
    return np.einsum("fd,fe->fde", steering, steering.conj())


def test_covariances_hermitian_psd(observation, masks):
    """Тест: Φx и Φn эрмитовы и неотрицательно определены."""
    covariances = estimate_covariances(observation, masks, target=0)

    for matrix in (covariances.phi_x, covariances.phi_n):
        assert matrix.shape == (NUM_BINS, 3, 3)
        np.testing.assert_allclose(matrix, np.conj(np.swapaxes(matrix, -1, -2)), atol=1e-10)
        assert np.linalg.eigvalsh(matrix).min() >= -1e-8


def test_covariances_empty_mask_raises(observation, masks):
    """Тест: нулевая маска цели в частотном бине - ошибка."""
    gamma = masks.gamma.copy()
    gamma[0, :, 2] = 0.0

    with pytest.raises(BeamformerError, match="бине 2"):
        estimate_covariances(observation, MaskSet(gamma=gamma, num_speakers=2), target=0, mask_floor=0.0)


def test_covariances_shape_mismatch(observation):
    """Тест: маски другой формы - ошибка."""
    with pytest.raises(BeamformerError):
        estimate_covariances(observation, MaskSet(gamma=np.ones((3, 10, NUM_BINS)) / 3, num_speakers=2), 0)


def test_mvdr_is_distortionless_for_rank_one_target():
    """Тест: для цели ранга 1 и белого шума w^H h равен h_ref."""
    rng = np.random.default_rng(2)
    steering = rng.standard_normal((NUM_BINS, 4)) + 1j * rng.standard_normal((NUM_BINS, 4))
    phi_n = np.broadcast_to(np.eye(4), (NUM_BINS, 4, 4))

    weights, ref = mvdr_souden(rank_one_target(steering), phi_n, ref=2, loading=0.0)

    assert ref == 2
    response = np.einsum("fd,fd->f", weights.conj(), steering)
    np.testing.assert_allclose(response, steering[:, 2], rtol=1e-10)


def random_covariance(rng: np.random.Generator, channels: int = 4, frames: int = 12) -> np.ndarray:
    """Случайная эрмитова положительно определенная ковариация, (F, D, D)."""
    a = rng.standard_normal((NUM_BINS, channels, frames)) + 1j * rng.standard_normal((NUM_BINS, channels, frames))
    return np.einsum("fdt,fet->fde", a, a.conj()) / frames


@pytest.mark.parametrize("scale", [1e-3, 3.7, 250.0])
def test_mvdr_is_invariant_to_common_covariance_scale(scale):
    """Тест: общий множитель Φx и Φn не меняет ни веса, ни выбранный опорный канал."""
    rng = np.random.default_rng(6)
    phi_x, phi_n = random_covariance(rng), random_covariance(rng)

    weights, ref = mvdr_souden(phi_x, phi_n)
    scaled_weights, scaled_ref = mvdr_souden(scale * phi_x, scale * phi_n)

    assert scaled_ref == ref
    np.testing.assert_allclose(scaled_weights, weights, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("channel", [0, 2])
def test_mvdr_picks_reference_channel_for_single_channel_target(channel):
    """Тест: Φx = u_ref·u_refᴴ и Φn = I дают веса, равные единичному вектору опорного канала."""
    unit = np.zeros(4, dtype=complex)
    unit[channel] = 1.0
    phi_x = np.broadcast_to(np.outer(unit, unit), (NUM_BINS, 4, 4))
    phi_n = np.broadcast_to(np.eye(4, dtype=complex), (NUM_BINS, 4, 4))

    weights, ref = mvdr_souden(phi_x, phi_n, ref=channel, loading=0.0)

    assert ref == channel
    np.testing.assert_allclose(weights, np.broadcast_to(unit, (NUM_BINS, 4)), atol=1e-14)


@pytest.mark.parametrize("scale", [1e-4, 0.5, 1e5])
def test_select_reference_is_invariant_to_common_scale(scale):
    """Тест: общий положительный множитель ковариаций не меняет выбор опорного канала."""
    rng = np.random.default_rng(7)
    phi_x, phi_n = random_covariance(rng), random_covariance(rng)

    assert select_reference(scale * phi_x, scale * phi_n) == select_reference(phi_x, phi_n)


def test_select_reference_prefers_highest_snr():
    """Тест: выбирается канал с наибольшим ожидаемым SNR."""
    phi_x = np.broadcast_to(np.diag([1.0, 4.0, 2.0]).astype(complex), (NUM_BINS, 3, 3))
    phi_n = np.broadcast_to(np.eye(3, dtype=complex), (NUM_BINS, 3, 3))
    candidates = np.broadcast_to(np.eye(3, dtype=complex), (NUM_BINS, 3, 3))

    assert select_reference(phi_x, phi_n, candidates=candidates) == 1


def test_select_reference_tie_goes_to_lowest_index():
    """Тест: при равных SNR выбирается канал с меньшим индексом."""
    steering = np.ones((NUM_BINS, 3), dtype=complex)
    phi_n = np.broadcast_to(np.eye(3, dtype=complex), (NUM_BINS, 3, 3))

    assert select_reference(rank_one_target(steering), phi_n) == 0


def test_select_reference_single_channel():
    """Тест: один канал - опорный канал 0."""
    phi = np.ones((NUM_BINS, 1, 1), dtype=complex)

    assert select_reference(phi, phi) == 0


def test_souden_matrix_degenerate_target_raises():
    """Тест: нулевая ковариация цели - ошибка."""
    phi_n = np.broadcast_to(np.eye(2, dtype=complex), (NUM_BINS, 2, 2))

    with pytest.raises(BeamformerError, match="Вырожденная цель"):
        souden_matrix(np.zeros((NUM_BINS, 2, 2), dtype=complex), phi_n)


def test_mask_based_mvdr_shapes_and_fixed_reference(observation, masks):
    """Тест: веса (K, F, D), заданный опорный канал применяется ко всем дикторам."""
    solution = mask_based_mvdr(observation, masks, BeamformerConfig(reference_channel=1))

    assert solution.weights.shape == (2, NUM_BINS, 3)
    np.testing.assert_array_equal(solution.ref_channel, [1, 1])
    assert apply_linear(solution, observation).data.shape == (2, 50, NUM_BINS)


def test_beamformer_is_linear(observation, masks):
    """Тест: выход для суммы компонент равен сумме выходов."""
    solution = mask_based_mvdr(observation, masks)
    rng = np.random.default_rng(3)
    other = make_tf(rng.standard_normal(observation.data.shape) + 1j * rng.standard_normal(observation.data.shape))

    combined = apply_linear(solution, make_tf(observation.data + other.data)).data
    separate = apply_linear(solution, observation).data + apply_linear(solution, other).data

    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_beamformer_applies_to_stacked_components(observation):
    """Тест: оператор применим к стопке компонент (J, D, T, F)."""
    solution = BeamformerSolution(weights=np.ones((2, NUM_BINS, 3), dtype=complex), ref_channel=np.zeros(2))
    stacked = make_tf(np.stack([observation.data, 2 * observation.data]))

    output = solution.apply(stacked).data

    assert output.shape == (2, 2, 50, NUM_BINS)
    np.testing.assert_allclose(output[1], 2 * output[0])


def test_beamformer_rejects_wrong_channel_count(observation):
    """Тест: число каналов спектра не совпадает с весами - ошибка."""
    solution = BeamformerSolution(weights=np.ones((2, NUM_BINS, 4)), ref_channel=np.zeros(2))

    with pytest.raises(BeamformerError):
        solution.apply(observation)


def test_channel_selection_returns_reference_channel(observation):
    """Тест: единичные маски дают опорный канал без изменений."""
    operator = channel_selection(2, 50, NUM_BINS, ref_channel=1)

    output = apply_linear(operator, observation).data

    np.testing.assert_array_equal(output[0], observation.data[1])
    np.testing.assert_array_equal(output[1], observation.data[1])


def test_masking_operator_scales_reference(observation):
    """Тест: маскирование умножает опорный канал на маску."""
    masks = np.random.default_rng(4).random((2, 50, NUM_BINS))

    output = MaskingOperator(masks=masks, ref_channel=0).apply(observation).data

    np.testing.assert_allclose(output, masks * observation.data[0][None])


def test_irm_masks_sum_to_one_and_handle_silence():
    """Тест: IRM в сумме дает 1, в точках тишины - равномерная маска."""
    rng = np.random.default_rng(5)
    images = rng.standard_normal((2, 8, NUM_BINS)) + 0j
    noise = rng.standard_normal((8, NUM_BINS)) + 0j
    images[:, 0, 0] = 0
    noise[0, 0] = 0

    masks = oracle_masks(images, noise, "irm")

    np.testing.assert_allclose(masks.gamma.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(masks.gamma[:, 0, 0], 1 / 3)
    assert masks.num_speakers == 2


def test_ibm_masks_are_binary_one_hot():
    """Тест: IBM - ровно одна единица в каждой точке у класса с наибольшей амплитудой."""
    images = np.array([[[3.0, 0.0]], [[1.0, 2.0]]]) + 0j
    noise = np.array([[2.0, 5.0]]) + 0j

    masks = oracle_masks(images, noise, "ibm")

    np.testing.assert_array_equal(masks.gamma[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(masks.gamma[:, 0, 1], [0, 0, 1])
    assert set(np.unique(masks.gamma)) <= {0.0, 1.0}


def test_oracle_masks_unknown_kind():
    """Тест: неизвестный тип маски - ошибка."""
    with pytest.raises(BeamformerError):
        oracle_masks(np.ones((1, 2, 2)), np.ones((2, 2)), "wiener")
