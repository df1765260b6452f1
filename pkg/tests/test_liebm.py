import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagflow.errors import DimensionMismatch, InvalidDimension, InvalidStep, StepTooLarge
from flagflow.liebm import (
    GUARD_OK,
    GUARD_REFINE,
    LieIncrement,
    NoiseBuffer,
    RngStream,
    run_unitary_batch,
    sample_skew_increment,
    simulate_unitary_path,
    skew_from_normals,
    step_unitary,
)
from flagflow.matcore import haar_unitary


def batch_increments(n, dt, N, seed=7):
    g = np.random.default_rng(seed).standard_normal((N, n * n))
    return skew_from_normals(n, dt, g)


class TestIncrement:
    def test_exact_skew(self):
        inc = sample_skew_increment(4, 0.01, RngStream(1, 0))
        assert np.array_equal(inc.dA, -inc.dA.conj().T)

    @given(st.integers(2, 6), st.floats(1e-6, 1.0), st.integers(0, 2**32 - 1))
    def test_skew_property(self, n, dt, seed):
        dA = sample_skew_increment(n, dt, np.random.default_rng(seed)).dA
        assert np.array_equal(dA, -np.conj(dA.T))
        assert np.all(np.real(np.diag(dA)) == 0)

    def test_errors(self):
        with pytest.raises(InvalidDimension):
            sample_skew_increment(1, 0.1, RngStream(0, 0))
        with pytest.raises(InvalidStep):
            sample_skew_increment(2, 0.0, RngStream(0, 0))

    def test_zero_mean(self):
        dA = batch_increments(2, 0.01, 100000)
        mean = dA.mean(axis=0)
        se = np.sqrt(np.var(dA.real, axis=0) + np.var(dA.imag, axis=0)) / np.sqrt(len(dA))
        se = np.where(se > 0, se, 1.0)
        assert np.max(np.abs(mean) / se) < 4

    def test_square_expectation(self):
        # E[dA dA] / dt = -2 n I at n = 2
        dt = 0.01
        dA = batch_increments(2, dt, 100000)
        P = dA @ dA / dt
        mean = P.mean(axis=0)
        se = P.real.std(axis=0) / np.sqrt(len(P))
        assert np.all(np.abs(mean.real - (-4.0) * np.eye(2)) <= 3 * se + 1e-12)

    def test_off_block_product_vanishes(self):
        # n = 4, m = 2: E[dA_11 dA_12] = 0
        dt = 0.01
        dA = batch_increments(4, dt, 100000, seed=11)
        P = dA[:, 0:2, 0:2] @ dA[:, 0:2, 2:4] / dt
        for part in (P.real, P.imag):
            z = np.abs(part.mean(axis=0)) / (part.std(axis=0) / np.sqrt(len(P)))
            assert np.max(z) < 3.5

    def test_block_normalization(self):
        dt = 0.01
        dA = batch_increments(4, dt, 100000, seed=12)
        # each single block product dA_1j dA_j1 has mean -2m I dt
        for j in (slice(0, 2), slice(2, 4)):
            P = dA[:, 0:2, j] @ dA[:, j, 0:2] / dt
            mean = P.real.mean(axis=0)
            se = P.real.std(axis=0) / np.sqrt(len(P))
            assert np.all(np.abs(mean - (-4.0) * np.eye(2)) <= 3 * se)


class TestStep:
    def test_zero_increment(self, rng):
        U = haar_unitary(3, rng)
        assert np.allclose(step_unitary(U, LieIncrement(3, 0.1, np.zeros((3, 3), complex))), U, atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            step_unitary(np.eye(3), np.zeros((2, 2)))

    def test_drift(self):
        # E[U_dt - I]/dt -> -n I at U = I, n = 2
        dt = 1e-3
        dA = batch_increments(2, dt, 100000, seed=5)
        D = (step_unitary(np.eye(2), dA) - np.eye(2)) / dt
        mean = D.real.mean(axis=0)
        se = D.real.std(axis=0) / np.sqrt(len(D))
        assert np.all(np.abs(mean - (-2.0) * np.eye(2)) <= 3 * se + 2.0 * dt * 10)

    def test_unitarity_long_run(self):
        U = np.eye(4, dtype=complex)
        gen = RngStream(3, 0).generator()
        for s in range(10000):
            U = step_unitary(U, sample_skew_increment(4, 1e-3, gen), step_index=s, proj_interval=64)
        assert np.linalg.norm(U.conj().T @ U - np.eye(4)) < 1e-10


class TestRng:
    def test_reproducible(self):
        a = RngStream(42, 7).standard_normal(5)
        b = RngStream(42, 7).standard_normal(5)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        a = RngStream(42, 7).standard_normal(1000)
        b = RngStream(42, 8).standard_normal(1000)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.15

    def test_substream_disjoint(self):
        a = RngStream(42, 7).standard_normal(10)
        b = RngStream(42, 7).substream(1).standard_normal(10)
        assert not np.array_equal(a, b)

    def test_noise_buffer_independent_of_batch(self):
        streams = [RngStream(5, i) for i in range(4)]
        nb = NoiseBuffer(streams, 3, chunk=4)
        rows = np.stack([nb.take(np.arange(4)) for _ in range(10)])
        alone = NoiseBuffer([RngStream(5, 2)], 3, chunk=7)
        rows2 = np.stack([alone.take(np.arange(1)) for _ in range(10)])
        assert np.array_equal(rows[:, 2], rows2[:, 0])


class TestPaths:
    def test_single_step(self):
        seen = []
        simulate_unitary_path(np.eye(2), 0.01, 0.01, RngStream(0, 0), [lambda s, t, U, dA: seen.append(s)])
        assert seen == [0]

    def test_deterministic(self):
        f = lambda s, t, U, dA: U.copy()
        _, (a,) = simulate_unitary_path(np.eye(3), 0.05, 1e-3, RngStream(9, 1), [f])
        _, (b,) = simulate_unitary_path(np.eye(3), 0.05, 1e-3, RngStream(9, 1), [f])
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_residual_monitoring(self):
        res = run_unitary_batch(np.eye(2), 10.0, 1e-3, [RngStream(1, 0)], monitor_every=1)
        assert res.max_unitarity_residual < 1e-9

    def test_last_step_hits_horizon(self):
        times = []
        simulate_unitary_path(np.eye(2), 0.0105, 1e-3, RngStream(0, 0), [lambda s, t, U, dA: times.append(t)])
        assert len(times) == 11 and times[-1] == 0.0105

    def test_batch_matches_single(self):
        streams = [RngStream(4, i) for i in range(3)]
        res = run_unitary_batch(np.eye(3), 0.1, 1e-2, streams)
        single = run_unitary_batch(np.eye(3), 0.1, 1e-2, [RngStream(4, 1)])
        assert np.array_equal(res.U[1], single.U[0])

    def test_refinement_keeps_endpoint_law(self):
        class Picky:
            """Asks for refinement on every full step."""

            def start(self, U0):
                self.calls = 0

            def check(self, idx, Up, Un):
                self.calls += 1
                return np.full(len(idx), GUARD_REFINE if self.calls == 1 else GUARD_OK)

            def commit(self, *a):
                pass

        ob = Picky()
        res = run_unitary_batch(np.eye(2), 0.01, 0.01, [RngStream(0, 0)], [ob])
        assert res.n_refined[0] == 1 and not res.flagged[0]
        assert np.linalg.norm(res.U[0].conj().T @ res.U[0] - np.eye(2)) < 1e-12

    def test_exhausted_refinement_raises(self):
        class Never:
            def start(self, U0):
                pass

            def check(self, idx, Up, Un):
                return np.full(len(idx), GUARD_REFINE)

            def commit(self, *a):
                pass

        with pytest.raises(StepTooLarge):
            simulate_unitary_path(np.eye(2), 0.01, 0.01, RngStream(0, 0), [Never()], max_refine=3)

    def test_invalid_horizon(self):
        with pytest.raises(InvalidStep):
            run_unitary_batch(np.eye(2), 0.001, 0.01, [RngStream(0, 0)])
