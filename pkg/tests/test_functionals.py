import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagflow.errors import ChartMismatch, SingularBlock, StepTooLarge
from flagflow.flag import FlagDims, FlagPoint, SimplexPoint, project_affine, radial_from_unitary
from flagflow.functionals import (
    AreaObserver,
    ConnectionObserver,
    FunctionalState,
    MartingaleObserver,
    WindingObserver,
    area_increment,
    connection_form_increment,
    exp_martingale_update,
    horizontal_lift_start,
    horizontal_lift_step,
    stiefel_blocks,
    stiefel_section,
    winding_update,
)
from flagflow.liebm import RngStream, run_unitary_batch
from flagflow.matcore import haar_unitary

D11 = FlagDims(1, 1)


def scalar_point(c1, c2=None):
    """m = k = 1 chart point; the chart forces w_2 = -1/conj(w_1)."""
    c2 = -1.0 / np.conj(c1) if c2 is None else c2
    return FlagPoint(D11, np.array([[[c1]], [[c2]]], dtype=complex))


def fourier(n):
    return np.fft.fft(np.eye(n)) / np.sqrt(n)


class TestArea:
    def test_no_motion(self):
        w = scalar_point(0.7 + 0.2j)
        assert np.all(area_increment(w, w) == 0)

    def test_circular_arc(self):
        # w_1(s) = e^{is} c over one small arc: +|c|^2/(1+|c|^2) ds
        c, ds = 0.8, 1e-3
        total = 0.0
        for s in np.arange(0, 0.1, ds):
            total += area_increment(scalar_point(c * np.exp(1j * s)), scalar_point(c * np.exp(1j * (s + ds))))[0]
        assert total == pytest.approx(c**2 / (1 + c**2) * 0.1, rel=1e-6)

    def test_real_path(self, rng):
        d = FlagDims(2, 1)
        w0 = project_affine(np.real(haar_unitary(4, rng)) if False else _real_orthogonal(rng), d)
        w1 = project_affine(_real_orthogonal(rng), d)
        assert np.allclose(area_increment(w0, w1), 0.0, atol=1e-15)

    def test_chart_mismatch(self):
        w = scalar_point(0.5)
        with pytest.raises(ChartMismatch):
            area_increment(w, FlagPoint(FlagDims(1, 2), np.zeros((3, 2, 1), complex)))

    def test_explicit_midpoint_radial(self):
        a, b = scalar_point(0.5 + 0.1j), scalar_point(0.52 + 0.13j)
        from flagflow.flag import radial_from_chart
        mid = radial_from_chart(FlagPoint(D11, 0.5 * (a.w + b.w)))
        assert np.allclose(area_increment(a, b, mid), area_increment(a, b))

    @given(st.integers(0, 2**32 - 1))
    def test_real_valued(self, seed):
        d = FlagDims(2, 2)
        g = np.random.default_rng(seed)
        U = haar_unitary(6, g)
        V = U @ _small_rotation(g, 6)
        da = area_increment(project_affine(U, d), project_affine(V, d))
        assert da.dtype == float and np.all(np.isfinite(da))


def _real_orthogonal(rng, n=4):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q.astype(complex)


def _small_rotation(g, n, eps=1e-2):
    X = g.standard_normal((n, n)) + 1j * g.standard_normal((n, n))
    A = eps * (X - X.conj().T)
    from scipy.linalg import expm

    return expm(A)


class TestStiefel:
    def test_identity(self):
        Z = stiefel_blocks(np.eye(2), D11)
        assert np.allclose(Z.ravel(), [0.0, 1.0])

    def test_row_orthonormal(self, rng):
        d = FlagDims(2, 1)
        Z = stiefel_blocks(haar_unitary(4, rng), d)
        assert np.linalg.norm(sum(z @ z.conj().T for z in Z) - np.eye(2)) < 1e-12

    def test_matches_radial(self, rng):
        d = FlagDims(2, 2)
        U = haar_unitary(6, rng)
        Z = stiefel_blocks(U, d)
        assert np.array_equal(Z @ np.conj(np.swapaxes(Z, -1, -2)), radial_from_unitary(U, d).lam) or np.allclose(
            Z @ np.conj(np.swapaxes(Z, -1, -2)), radial_from_unitary(U, d).lam, atol=1e-15
        )


class TestWinding:
    def test_constant(self, rng):
        Z = stiefel_blocks(fourier(2), D11)
        s = FunctionalState.start(Z)
        assert np.all(winding_update(s, Z).theta == 0)

    def test_full_revolution(self):
        Z0 = np.array([[[1.0]], [[1.0]]], dtype=complex)
        s = FunctionalState.start(Z0)
        for t in np.arange(1, 64) * 0.1:
            s = winding_update(s, np.array([[[np.exp(1j * t)]], [[1.0]]]))
        s = winding_update(s, Z0 * np.array([[[np.exp(1j * 2 * np.pi)]], [[1.0]]]))
        # 63 steps of 0.1 then the remainder to 2 pi
        assert s.theta[0] == pytest.approx(2 * np.pi, abs=1e-12)

    def test_step_too_large(self):
        Z0 = np.array([[[1.0]], [[1.0]]], dtype=complex)
        s = FunctionalState.start(Z0)
        with pytest.raises(StepTooLarge):
            winding_update(s, np.array([[[1j]], [[1.0]]]))

    def test_singular(self):
        s = FunctionalState.start(np.array([[[1.0]], [[1.0]]], dtype=complex))
        with pytest.raises(SingularBlock):
            winding_update(s, np.array([[[1e-9]], [[1.0]]], dtype=complex))

    def test_modulus_identity_along_path(self):
        d = FlagDims(2, 1)
        ob = WindingObserver(d)
        run_unitary_batch(fourier(4), 0.5, 1e-3, [RngStream(0, i) for i in range(4)], [ob])
        assert ob.max_modulus_residual < 1e-12

    def test_observer_matches_sequential(self):
        d = FlagDims(1, 1)
        ob = WindingObserver(d)
        seq = {}

        def on_step(s, t, U, alive):
            Z = stiefel_blocks(U[0], d)
            seq["s"] = winding_update(seq.get("s") or FunctionalState.start(stiefel_blocks(fourier(2), d)), Z)

        run_unitary_batch(fourier(2), 0.3, 1e-3, [RngStream(1, 0)], [ob], on_step=on_step)
        assert np.allclose(ob.theta[0], seq["s"].theta, atol=1e-12)


class TestConnection:
    def test_no_motion(self, rng):
        U = haar_unitary(4, rng)
        assert np.all(connection_form_increment(U, U, FlagDims(2, 1)) == 0)

    @pytest.mark.parametrize("mk", [(1, 1), (2, 1), (1, 2)])
    def test_vertical_move(self, rng, mk):
        d = FlagDims(*mk)
        U = haar_unitary(d.n, rng)
        eps = 1e-4
        for j in range(d.ncols):
            phase = np.ones(d.n, dtype=complex)
            phase[j * d.m : (j + 1) * d.m] = np.exp(1j * eps / d.m)
            eta = connection_form_increment(U, U * phase, d)
            expect = np.zeros(d.ncols)
            expect[j] = eps
            assert np.allclose(eta, expect, atol=1e-10)

    def test_qv_linear_in_time(self):
        d = FlagDims(1, 1)
        ob = ConnectionObserver(d)
        streams = [RngStream(7, i) for i in range(20)]
        slopes = []
        for T in (0.5, 1.0):
            run_unitary_batch(fourier(2), T, 1e-3, streams, [ob])
            slopes.append(ob.qv.mean() / T)
        assert slopes[0] == pytest.approx(slopes[1], rel=0.05)
        # Im Tr dA_jj has variance 2 m dt
        assert slopes[1] == pytest.approx(2.0 * d.m, rel=0.05)


class TestMartingale:
    def lam(self, x):
        return SimplexPoint(D11, np.array([[[x]], [[1 - x]]], dtype=complex))

    def test_zero_u(self):
        s = FunctionalState.start(np.ones((2, 1, 1), complex), u=(0.0, 0.0))
        assert exp_martingale_update(s, self.lam(0.3), self.lam(0.6), 0.1).D == 1.0

    def test_zero_time(self):
        s = FunctionalState.start(np.ones((2, 1, 1), complex), u=(0.5, -0.3))
        assert exp_martingale_update(s, self.lam(0.3), self.lam(0.3), 0.0).D == 1.0

    def test_singular(self):
        s = FunctionalState.start(np.ones((2, 1, 1), complex), u=(0.5, -0.3))
        with pytest.raises(SingularBlock):
            exp_martingale_update(s, self.lam(0.3), self.lam(1e-13), 0.01)

    def test_factor(self):
        u = np.array([0.5, -0.3])
        s = FunctionalState.start(np.ones((2, 1, 1), complex), u=u)
        dt = 1e-3
        out = exp_martingale_update(s, self.lam(0.4), self.lam(0.405), dt)
        mid = np.array([0.4025, 0.5975])
        expect = np.exp((0.8 + 0.5 * 2 * 0.15) * dt)
        expect *= (0.405 / 0.4) ** 0.25 * (0.595 / 0.6) ** 0.15
        expect *= np.exp(-np.sum(u**2 / 2 * (1 / mid - 1)) * dt)
        # away from the boundary the bridge factor is the midpoint rule up to O(dt^2)
        assert out.D == pytest.approx(expect, rel=1e-6)

    def test_boundary_step_damped(self):
        # an excursion to the edge of the simplex must shrink D
        s = FunctionalState.start(np.ones((2, 1, 1), complex), u=(0.2, 0.2))
        a = exp_martingale_update(s, self.lam(1e-4), self.lam(1e-4), 1e-3).D
        b = exp_martingale_update(s, self.lam(0.5), self.lam(0.5), 1e-3).D
        assert a < b

    def test_mean_one(self):
        d = FlagDims(1, 1)
        ob = MartingaleObserver(d, [(0.5, -0.3)])
        run_unitary_batch(fourier(2), 0.5, 1e-3, [RngStream(11, i) for i in range(1000)], [ob])
        D = ob.D[:, 0]
        assert abs(D.mean() - 1.0) < 3 * D.std() / np.sqrt(D.size)
        ob = MartingaleObserver(d, [(0.2, 0.2)])
        run_unitary_batch(fourier(2), 0.5, 1e-2, [RngStream(12, i) for i in range(2000)], [ob])
        D = ob.D[:, 0]
        assert abs(D.mean() - 1.0) < 3 * D.std() / np.sqrt(D.size)


class TestLift:
    def path(self, d, steps, dt=1e-5, seed=0):
        keep = [fourier(d.n)]
        run_unitary_batch(fourier(d.n), steps * dt, dt, [RngStream(seed, 0)],
                          on_step=lambda s, t, U, a: keep.append(U[0].copy()))
        return [project_affine(U, d) for U in keep]

    def test_static(self):
        w = project_affine(fourier(4), FlagDims(2, 1))
        lift = horizontal_lift_start(w)
        new = horizontal_lift_step(lift, w, w, None, None, np.zeros(2))
        assert np.allclose(new.Theta, lift.Theta, atol=1e-15)
        assert np.allclose(new.X, lift.X, atol=1e-15)

    def test_section_orthonormal(self, rng):
        d = FlagDims(2, 1)
        S = stiefel_section(project_affine(haar_unitary(4, rng), d).w)
        X = np.concatenate(list(S), axis=-1)
        assert np.linalg.norm(X.conj().T @ X - np.eye(4)) < 1e-12

    def test_consistency_along_path(self):
        d = FlagDims(2, 1)
        ws = self.path(d, 1000)
        lift = horizontal_lift_start(ws[0])
        for a, b in zip(ws[:-1], ws[1:]):
            lift = horizontal_lift_step(lift, a, b, None, None, area_increment(a, b))
            assert np.linalg.norm(lift.X.conj().T @ lift.X - np.eye(4)) < 1e-8
            assert np.max(np.abs(np.linalg.det(lift.Theta) - 1)) < 1e-8
            assert np.max(np.abs(project_affine(lift.X, d).w - b.w)) < 1e-8

    def test_horizontal(self):
        d = FlagDims(2, 1)
        ws = self.path(d, 300, seed=3)
        lift = horizontal_lift_start(ws[0])
        total = np.zeros(2)
        for a, b in zip(ws[:-1], ws[1:]):
            new = horizontal_lift_step(lift, a, b, None, None, area_increment(a, b))
            total += np.abs(connection_form_increment(lift.X, new.X, d))
            lift = new
        assert np.all(total < 1e-3)

    def test_step_too_large(self, rng):
        d = FlagDims(2, 1)
        a = project_affine(haar_unitary(4, rng), d)
        b = project_affine(haar_unitary(4, rng), d)
        with pytest.raises(StepTooLarge):
            horizontal_lift_step(horizontal_lift_start(a), a, b, None, None, np.zeros(2))


class TestAreaObserver:
    def test_matches_sequential(self):
        d = FlagDims(1, 2)
        ob = AreaObserver(d)
        keep = [fourier(3)]
        run_unitary_batch(fourier(3), 0.2, 1e-3, [RngStream(5, 0)], [ob],
                          on_step=lambda s, t, U, a: keep.append(U[0].copy()))
        ws = [project_affine(U, d) for U in keep]
        seq = sum(area_increment(a, b) for a, b in zip(ws[:-1], ws[1:]))
        assert np.allclose(ob.a[0], seq, atol=1e-12)

    def test_cross_covariation(self):
        d = FlagDims(2, 1)
        ob = AreaObserver(d, track_qv=True)
        run_unitary_batch(fourier(4), 0.2, 1e-4, [RngStream(6, 0)], [ob])
        assert ob.qv[0, 0, 1] == pytest.approx(d.m * 0.2, rel=0.25)
