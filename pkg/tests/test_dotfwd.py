import math

import numpy as np
import pytest

from ucosdot.dotfwd import (SPEED_OF_LIGHT, ForwardModel, Instrument, MeasurementError, OpticalField,
                            Patch, difference_data, experimental, experimental_background,
                            forward_data, full_view, jacobian, limited_view, measure,
                            nonlinear_difference_data, patches_at_fractions, read_data_vector,
                            simulate_difference_data, solve_forward, wrap_phase, write_data_vector)
from ucosdot.operator import DimensionError, ZeroOperator
from ucosdot.verify import jacobian_fd_error

L = 50.0


def top_bottom(omega=2 * math.pi * 100e6, strength=1.0):
    """One source at the top-edge midpoint and a detector at the bottom-edge midpoint."""
    return Instrument((Patch(L / 2, 2.0, strength),), (Patch(2.5 * L, 2.0),), extent=L, omega=omega)


def four_by_four():
    k = np.arange(4)
    return Instrument(patches_at_fractions((k + 0.1) / 4, 2.0, L),
                      patches_at_fractions((k + 0.6) / 4, 2.0, L))


def random_background(n, seed=0):
    rng = np.random.default_rng(seed)
    return OpticalField(0.01 + 0.002 * rng.random((n, n)), 1.0 + 0.2 * rng.random((n, n)))


def test_static_field_is_real_and_positive():
    phi = solve_forward(OpticalField.homogeneous(16), top_bottom(omega=0.0), 0)
    np.testing.assert_array_equal(phi.imag, 0.0)
    assert phi.real.min() > 0


def test_symmetric_source_gives_mirror_symmetric_field():
    phi = solve_forward(OpticalField.homogeneous(16), top_bottom(), 0)
    assert np.abs(phi - phi[:, ::-1]).max() <= 1e-10 * np.abs(phi).max()


def test_solver_residual_is_small():
    fm = ForwardModel(random_background(16), four_by_four())
    res = np.linalg.norm(fm.matrix @ fm.fields.T - fm.rhs) / np.linalg.norm(fm.rhs)
    assert res < 1e-9


def test_source_strength_shifts_log_amplitude():
    bg = OpticalField.homogeneous(12)
    y1 = forward_data(bg, top_bottom(strength=1.0))
    y3 = forward_data(bg, top_bottom(strength=3.0))
    np.testing.assert_allclose(y3[:1] - y1[:1], math.log(3.0), rtol=1e-10)
    np.testing.assert_allclose(y3[1:], y1[1:], atol=1e-12)


def test_static_measurements_have_zero_phase():
    y = forward_data(random_background(12), Instrument(four_by_four().sources,
                                                       four_by_four().detectors, omega=0.0))
    np.testing.assert_array_equal(y[y.size // 2:], 0.0)


def test_measure_matches_model_measurements():
    bg, inst = random_background(12, 1), four_by_four()
    np.testing.assert_allclose(measure(solve_forward(bg, inst), bg, inst), forward_data(bg, inst),
                               rtol=1e-13)


def test_zero_fluence_is_a_measurement_error():
    bg, inst = OpticalField.homogeneous(8), four_by_four()
    with pytest.raises(MeasurementError):
        measure(np.zeros((4, 8, 8)), bg, inst)


def test_reciprocity_under_source_detector_swap():
    bg, inst = random_background(16, 2), four_by_four()
    y = forward_data(bg, inst)
    ys = forward_data(bg, inst.swapped())
    S, D = inst.n_sources, inst.n_detectors
    swapped = np.concatenate([b.reshape(D, S).T.ravel() for b in np.split(ys, 2)])
    assert np.linalg.norm(swapped - y) <= 1e-6 * np.linalg.norm(y)


def test_jacobian_columns_match_finite_differences():
    assert jacobian_fd_error() < 1e-3


def test_jacobian_of_zero_perturbation_is_zero():
    A = jacobian(OpticalField.homogeneous(8), four_by_four(), rescale=False)
    np.testing.assert_array_equal(A.apply(np.zeros(A.domain_shape)), 0.0)


def test_symmetric_pair_sensitivity_is_mirror_symmetric():
    inst = Instrument((Patch(L / 2 - 5, 2.0),), (Patch(L / 2 + 5, 2.0),))
    for J in ForwardModel(OpticalField.homogeneous(16), inst).jacobian_dense():
        for row in J:
            m = row.reshape(16, 16)
            assert np.abs(m - m[:, ::-1]).max() <= 1e-8 * np.abs(m).max()


def test_jacobian_adjoint_consistency():
    A = jacobian(random_background(8, 3), four_by_four())
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal(A.domain_shape)
        y = rng.standard_normal(A.codomain_dim)
        lhs = A.apply(x) @ y
        rhs = np.sum(x * A.adjoint(y))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_rescaled_jacobian_matches_nonlinear_difference_for_small_contrast():
    bg, inst = OpticalField.homogeneous(12), four_by_four()
    A = jacobian(bg, inst)
    x = np.full((2, 12, 12), 0.5)
    x[:, 4:7, 5:8] = [[[0.52]], [[0.51]]]
    lin = A.apply(x) - A.apply(np.full_like(x, 0.5))
    nonlin = nonlinear_difference_data(x, bg, inst)
    np.testing.assert_allclose(nonlinear_difference_data(np.full_like(x, 0.5), bg, inst), 0.0,
                               atol=1e-12)
    assert np.linalg.norm(lin - nonlin) <= 0.05 * np.linalg.norm(nonlin)


def test_simulated_data_without_noise_at_zero_is_zero():
    A = ZeroOperator((2, 4, 4), 10)
    y = simulate_difference_data(np.zeros((2, 4, 4)), A, 0, noise=False)
    np.testing.assert_array_equal(y, 0.0)


def test_noise_levels_per_block():
    n = 100_000
    A = ZeroOperator((2, 2, 2), 2 * n)
    y = simulate_difference_data(np.zeros((2, 2, 2)), A, 7)
    assert abs(y[:n].std() / 0.05 - 1) < 0.01
    assert abs(y[n:].std() / 0.001 - 1) < 0.01


def test_noise_is_seeded():
    A = ZeroOperator((2, 2, 2), 6)
    a = simulate_difference_data(np.zeros((2, 2, 2)), A, 3)
    b = simulate_difference_data(np.zeros((2, 2, 2)), A, 3)
    assert a.tobytes() == b.tobytes()


def test_grid_refinement_is_second_order():
    # patch edges fall on cell faces at every level
    inst = Instrument((Patch(25.0, 6.25),), (Patch(62.5, 6.25), Patch(112.5, 6.25)), extent=L)
    ys = [forward_data(OpticalField.homogeneous(n), inst) for n in (16, 32, 64)]
    ratio = np.linalg.norm(ys[0] - ys[1]) / np.linalg.norm(ys[1] - ys[2])
    assert 3.0 <= ratio <= 5.0


def test_data_grid_may_differ_from_inversion_grid():
    inst = four_by_four()
    A32 = jacobian(OpticalField.homogeneous(32), inst)
    A33 = jacobian(OpticalField.homogeneous(33), inst)
    truth = np.full((2, 32, 32), 0.5)
    truth[:, 10:16, 12:18] = 0.8
    y32 = simulate_difference_data(truth, A32, 0, noise=False)
    y33 = simulate_difference_data(truth, A33, 0, noise=False)
    assert A33.domain_shape == (2, 33, 33)
    assert not np.array_equal(y32, y33)
    assert np.linalg.norm(y32 - y33) <= 0.1 * np.linalg.norm(y32)


def test_truth_with_wrong_channels_is_rejected():
    with pytest.raises(DimensionError):
        simulate_difference_data(np.zeros((3, 4, 4)), ZeroOperator((2, 5, 5), 4), 0)


def test_data_vector_round_trip(tmp_path):
    y = np.random.default_rng(0).standard_normal(32)
    path = tmp_path / "y.bin"
    write_data_vector(path, y)
    assert path.stat().st_size == 8 * 32
    np.testing.assert_array_equal(read_data_vector(path, 32), y)
    with pytest.raises(DimensionError):
        read_data_vector(path, 30)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DimensionError):
        read_data_vector(path)


def test_wrap_phase_range():
    p = np.array([0.0, math.pi, -math.pi, 3 * math.pi / 2, -7.0, 2 * math.pi])
    w = wrap_phase(p)
    assert np.all((w > -math.pi) & (w <= math.pi))
    np.testing.assert_allclose(w, [0.0, math.pi, math.pi, -math.pi / 2, -7.0 + 2 * math.pi, 0.0],
                               atol=1e-15)


def test_difference_data_wraps_phase_only():
    y2 = np.array([1.0, 3.0, 3.0, -3.0])
    y1 = np.array([0.5, -3.0, -3.0, 3.0])
    d = difference_data(y2, y1)
    np.testing.assert_allclose(d[:2], [0.5, 6.0])
    np.testing.assert_allclose(d[2:], [6.0 - 2 * math.pi, -6.0 + 2 * math.pi])


def test_instrument_validation():
    with pytest.raises(ValueError):
        Instrument((), (Patch(10.0, 1.0),))
    with pytest.raises(ValueError):
        Instrument((Patch(10.0, 1.0),), (Patch(30.0, 1.0),), omega=-1.0)
    with pytest.raises(ValueError, match="corner"):
        Instrument((Patch(L, 2.0),), (Patch(30.0, 1.0),))
    with pytest.raises(ValueError, match="overlaps"):
        Instrument((Patch(10.0, 4.0),), (Patch(12.0, 1.0),))
    with pytest.raises(ValueError, match="perimeter"):
        Instrument((Patch(199.9, 1.0),), (Patch(30.0, 1.0),))


def test_optical_field_validation():
    with pytest.raises(ValueError):
        OpticalField(np.zeros((4, 4)), np.ones((4, 4)))
    with pytest.raises(DimensionError):
        OpticalField(np.ones((4, 4)), np.ones((4, 5)))


def test_standard_geometries():
    assert (full_view().n_sources, full_view().n_detectors) == (20, 20)
    lv = limited_view()
    assert (lv.n_sources, lv.n_detectors) == (10, 10)
    assert max(p.center for p in lv.sources + lv.detectors) < 2 * lv.extent
    ex = experimental()
    assert ex.n_measurements == 2 * 16 * 16
    assert ex.omega == pytest.approx(2 * math.pi * 56.98e6)
    bg = experimental_background(20)
    assert set(np.unique(bg.mua)) == {0.0065, 0.01}
    assert SPEED_OF_LIGHT == pytest.approx(2.99792458e11 / 1.4)
