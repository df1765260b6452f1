import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagflow.errors import DegenerateStep, InvalidDimension, OutsideChart
from flagflow.flag import (
    FlagDims,
    FlagPoint,
    bottom_blocks,
    chart_residual,
    flag_generator_apply,
    flag_qv_predict,
    project_affine,
    radial_from_chart,
    radial_from_unitary,
    sample_chart_increments,
)
from flagflow.liebm import RngStream, run_unitary_batch
from flagflow.matcore import haar_unitary

ROT = np.array([[1.0, 1.0], [-1.0, 1.0]]) / np.sqrt(2.0)
D11 = FlagDims(1, 1)


def test_dims():
    d = FlagDims(2, 2)
    assert (d.n, d.ncols) == (6, 3)
    with pytest.raises(InvalidDimension):
        FlagDims(0, 1)


class TestProjectAffine:
    def test_rotation_example(self):
        w = project_affine(ROT, D11)
        assert np.allclose(w.w.ravel(), [-1.0, 1.0], atol=1e-15)
        assert w.residual() < 1e-15

    def test_swap_leaves_chart(self):
        # bottom row of the swap is (1, 0)
        with pytest.raises(OutsideChart):
            project_affine(np.array([[0.0, 1.0], [1.0, 0.0]]), D11)

    def test_identity_outside_chart(self):
        with pytest.raises(OutsideChart):
            project_affine(np.eye(2), D11)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([(1, 1), (2, 1), (1, 2), (2, 2)]))
    def test_chart_constraint(self, seed, mk):
        d = FlagDims(*mk)
        U = haar_unitary(d.n, np.random.default_rng(seed))
        try:
            w = project_affine(U, d)
        except OutsideChart:
            return
        if np.min(np.abs(np.linalg.det(bottom_blocks(U, d)))) > 1e-3:
            assert w.residual() < 1e-10

    def test_wrong_shape(self):
        with pytest.raises(InvalidDimension):
            project_affine(np.eye(3), D11)


class TestRadial:
    def test_rotation(self):
        lam = radial_from_unitary(ROT, D11).lam
        assert np.allclose(lam.ravel(), [0.5, 0.5])

    def test_zero_block_is_boundary(self):
        d = FlagDims(1, 1)
        lam = radial_from_unitary(np.eye(2), d).lam
        assert lam[0, 0, 0] == 0.0

    def test_sum_identity(self, rng):
        d = FlagDims(2, 2)
        lam = radial_from_unitary(haar_unitary(6, rng), d).lam
        assert np.linalg.norm(lam.sum(axis=0) - np.eye(2)) < 1e-12

    def test_chart_formula(self):
        w = FlagPoint(D11, np.array([[[-1.0]], [[1.0]]], dtype=complex))
        assert np.allclose(radial_from_chart(w).lam.ravel(), [0.5, 0.5])

    def test_zero_chart_block(self):
        w = FlagPoint(D11, np.array([[[0.0]], [[1.0]]], dtype=complex))
        assert radial_from_chart(w).lam[0, 0, 0] == 1.0

    def test_cross_implementation(self, rng):
        d = FlagDims(2, 1)
        worst = 0.0
        for _ in range(200):
            U = haar_unitary(4, rng)
            a = radial_from_chart(project_affine(U, d)).lam
            b = radial_from_unitary(U, d).lam
            worst = max(worst, np.max(np.linalg.norm(a - b, axis=(-2, -1))))
        assert worst < 1e-9

    def test_simplex_invariants(self, rng):
        d = FlagDims(2, 2)
        assert radial_from_unitary(haar_unitary(6, rng), d).check()


class TestQVTables:
    W = FlagPoint(D11, np.array([[[-1.0]], [[1.0]]], dtype=complex))

    def test_same_column_coefficient(self):
        t = flag_qv_predict(self.W)
        assert t.same[0, 0] == pytest.approx(16.0)
        assert t.covariation()[0][0, 0] == pytest.approx(8.0)

    def test_cross_column_coefficient(self):
        t = flag_qv_predict(self.W)
        assert t.cross[0, 1] == pytest.approx(8.0)
        # ordered pairs: both (1,2) and (2,1) carry the coefficient
        assert t.covariation()[1][0, 1] == pytest.approx(8.0)

    def test_equal_columns_no_cross(self):
        t = flag_qv_predict(np.array([[[0.5]], [[0.5]]], dtype=complex))
        assert np.all(t.cross == 0)

    def test_conjugate_tables(self):
        t = flag_qv_predict(np.random.default_rng(0).standard_normal((3, 4, 2)) + 0j)
        assert np.array_equal(t.same_conj, np.conj(t.same))

    def test_monte_carlo_at_rotation(self):
        dt = 1e-4
        inc = sample_chart_increments(ROT, D11, dt, 100000, np.random.default_rng(3))
        dw1, dw2 = inc[:, 0, 0, 0], inc[:, 1, 0, 0]
        for x, target in ((np.abs(dw1) ** 2 / dt, 8.0), ((dw1 * dw2).real / dt, 8.0)):
            assert abs(x.mean() - target) < 3 * x.std() / np.sqrt(x.size) + 8.0 * 20 * dt


class TestGenerator:
    def test_constant(self):
        assert flag_generator_apply(lambda w: 1.0, TestQVTables.W) == pytest.approx(0.0, abs=1e-9)

    def test_linear_is_harmonic(self, rng):
        d = FlagDims(2, 1)
        w = project_affine(haar_unitary(4, rng), d)
        assert abs(flag_generator_apply(lambda x: x[0, 0, 0].real, w)) < 1e-6

    def test_step_range(self):
        with pytest.raises(DegenerateStep):
            flag_generator_apply(lambda w: 1.0, TestQVTables.W, h=0.5)

    def test_log_det_closed_form(self, rng):
        # f = sum_j log det(I + w_j^* w_j) has generator 2 m (n - m)(k + 1)
        for mk in [(1, 1), (2, 1), (1, 2)]:
            d = FlagDims(*mk)
            w = project_affine(haar_unitary(d.n, rng), d)
            f = lambda x: sum(np.log(np.real(np.linalg.det(np.eye(d.m) + x[j].conj().T @ x[j]))) for j in range(d.ncols))
            val = flag_generator_apply(f, w, h=1e-3, order=4)
            assert val == pytest.approx(2 * d.m * (d.n - d.m) * d.ncols, rel=1e-5)

    def test_log_det_against_monte_carlo(self):
        dt = 1e-4
        f = lambda x: sum(np.log(np.real(np.linalg.det(np.eye(1) + x[j].conj().T @ x[j]))) for j in range(2))
        inc = sample_chart_increments(ROT, D11, dt, 200000, np.random.default_rng(4))
        w0 = project_affine(ROT, D11).w
        vals = np.array([f(w0 + dw) for dw in inc[:20000]]) - f(w0)
        mc = vals.mean() / dt
        se = vals.std() / np.sqrt(vals.size) / dt
        assert abs(mc - 4.0) < 3 * se + 0.5


def test_chart_preserved_along_path():
    d = FlagDims(1, 2)
    worst = []

    def on_step(s, t, U, alive):
        worst.append(np.max(chart_residual(project_affine(U[0], d).w)))

    U0 = np.fft.fft(np.eye(3)) / np.sqrt(3)
    run_unitary_batch(U0, 0.5, 1e-3, [RngStream(2, 0)], on_step=on_step)
    assert max(worst) < 1e-8


def test_chart_martingale():
    d = FlagDims(1, 1)
    inc = sample_chart_increments(ROT, d, 1e-3, 2000, np.random.default_rng(8)).reshape(2000, -1)
    for part in (inc.real, inc.imag):
        se = part.std(axis=0) / np.sqrt(2000)
        assert np.all(np.abs(part.mean(axis=0)) < 4 * se)
