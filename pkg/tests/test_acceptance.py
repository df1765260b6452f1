"""Acceptance criteria, each run at its stated tolerance.

Seeds are fixed in advance.  Every test prints one pass/fail line, and the
lines are repeated in the terminal summary.
"""

import numpy as np
import pytest

from flagflow.cli import main
from flagflow.errors import RuntimeFailure
from flagflow.experiments import ExperimentConfig, fourier_start, run_experiment
from flagflow.flag import FlagDims, radial_from_unitary
from flagflow.jacobi import JacobiIndex, eigenfunction_bracket, jacobi_generator_apply
from flagflow.liebm import RngStream, run_unitary_batch
from flagflow.matcore import haar_unitary

SEED = 20261016

pytestmark = pytest.mark.acceptance


def experiment(**kw):
    kw.setdefault("master_seed", SEED)
    cfg = ExperimentConfig.from_dict(kw)
    try:
        return run_experiment(cfg, write=False).summary
    except RuntimeFailure as exc:
        # too many flagged paths: the criterion fails, the summary is still reported
        return exc.diagnostics


def checks_by_name(summary):
    return {c["name"]: c for c in summary["checks"]}


def fmt_checks(summary, names=None):
    cs = summary["checks"] if names is None else [checks_by_name(summary)[n] for n in names]
    return ", ".join(f"{c['name']}={_short(c['value'])}" for c in cs)


def _short(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def test_c01_unitarity(acceptance_report):
    dims = FlagDims(2, 1)
    worst = [0.0]

    def on_step(s, t, U, alive):
        R = np.conj(np.swapaxes(U, -1, -2)) @ U - np.eye(4)
        worst[0] = max(worst[0], float(np.linalg.norm(R, axis=(-2, -1)).max()))

    run_unitary_batch(fourier_start(dims), 10.0, 1e-3, [RngStream(SEED, 0)], proj_interval=64, on_step=on_step)
    ok = worst[0] < 1e-10
    acceptance_report(1, ok, f"max |U*U - I|_F = {worst[0]:.3g} over 1e4 steps")
    assert ok


def test_c02_lie_algebra_qv(acceptance_report):
    s = experiment(experiment="unitary-qv", m=2, k=1, T=1.0, dt=1e-3, n_paths=100)
    ok = s["verdict"] and s["estimates"]["n_increments"] >= 1e5
    acceptance_report(2, ok, f"{int(s['estimates']['n_increments'])} increments, " + fmt_checks(s))
    assert ok


def test_c03_flag_generator(acceptance_report):
    results = []
    for m, k in ((1, 1), (2, 1), (1, 2), (2, 2)):
        results.append(experiment(experiment="flag-generator", m=m, k=k, dt=1e-5, n_paths=5, samples=20000))
    zc = max(max(s["estimates"]["covariation_z"]) for s in results)
    zd = max(max(s["estimates"]["drift_z"]) for s in results)
    ok = zc <= 3.0 and zd <= 4.0
    acceptance_report(3, ok, f"20 points, max covariation z = {zc:.3g} (<= 3), max drift z = {zd:.3g} (<= 4)")
    assert ok


def test_c04_radial_jacobi(acceptance_report):
    s = experiment(experiment="radial-match", m=2, k=1, T=4.0, dt=2e-3, n_paths=4000)
    ok = s["verdict"]
    worst = max(abs(c["value"]) / c["tolerance"] for c in s["checks"])
    acceptance_report(4, ok, f"worst |diff| / 3SE = {worst:.3g} over t in (0.25, 1, 4)")
    assert ok


def test_c05_eigenfunction(acceptance_report):
    g = np.random.default_rng(SEED)
    shapes = [(1, 1), (2, 1), (1, 2), (2, 2)]
    worst = 0.0
    for i in range(50):
        dims = FlagDims(*shapes[i % 4])
        lam = _interior(dims, g)
        u = g.uniform(-2.0, 2.0, dims.ncols)
        f = _det_power(u)
        val = jacobi_generator_apply(f, lam, JacobiIndex.flag(dims), h=2.5e-4, order=4)
        ref = eigenfunction_bracket(lam, u, dims.m) * f(lam)
        worst = max(worst, abs(val - ref) / abs(ref))
    ok = worst < 1e-6
    acceptance_report(5, ok, f"max relative error {worst:.3g} at 50 points")
    assert ok


def _interior(dims, g, floor=0.05):
    while True:
        lam = radial_from_unitary(haar_unitary(dims.n, g), dims).lam
        if np.min(np.linalg.eigvalsh(lam)) > floor:
            return lam


def _det_power(u):
    u = np.abs(np.asarray(u, dtype=float))
    return lambda L: float(np.prod([np.real(np.linalg.det(L[j])) ** (u[j] / 2) for j in range(len(u))]))


def test_c06_martingale(acceptance_report):
    s = experiment(experiment="martingale", m=1, k=1, T=1.0, dt=1e-3, n_paths=5000,
                   u=[[0.5, -0.3], [1.0, 0.0], [0.2, 0.2]])
    ok = s["verdict"]
    acceptance_report(6, ok, fmt_checks(s))
    assert ok


def test_c07_area_covariation(acceptance_report):
    s = experiment(experiment="area-covariation", m=2, k=1, T=1.0, dt=1e-4, n_paths=1)
    ok = s["verdict"]
    acceptance_report(7, ok, "relative errors: " + fmt_checks(s))
    assert ok


def _cauchy_criterion(s, ks):
    names = []
    fits = s["estimates"]["fits"]
    ok = True
    parts = []
    for f in fits:
        tgt = f["target_scale"]
        good = abs(f["scale"] - tgt) <= 0.15 * tgt and abs(f["location"]) <= 0.1 * f["scale"]
        if ks:
            good = good and f["ks_p"] > 0.01
        ok = ok and good
        parts.append(f"a_{f['component']}: scale {f['scale']:.3f} (target {tgt:g}), loc {f['location']:+.3f}"
                     + (f", KS p {f['ks_p']:.3f}" if ks else ""))
    return ok, "; ".join(parts)


@pytest.fixture(scope="module")
def cauchy_m1k2():
    return experiment(experiment="cauchy-limit", m=1, k=2, T=30.0, dt=1e-3, n_paths=2000, thin=30000)


def test_c08a_cauchy_m1k1(acceptance_report):
    s = experiment(experiment="cauchy-limit", m=1, k=1, T=30.0, dt=1e-3, n_paths=4000, thin=30000)
    f = s["estimates"]["fits"][0]
    ok = 0.85 <= f["scale"] <= 1.15 and f["ks_p"] > 0.01 and abs(f["location"]) <= 0.1 * f["scale"]
    acceptance_report("8a", ok, f"scale {f['scale']:.3f} in [0.85, 1.15], KS p {f['ks_p']:.3f}, loc {f['location']:+.3f}")
    assert ok


def test_c08b_cauchy_m2k1(acceptance_report):
    s = experiment(experiment="cauchy-limit", m=2, k=1, T=30.0, dt=1e-3, n_paths=2000, thin=30000)
    ok, detail = _cauchy_criterion(s, ks=False)
    acceptance_report("8b", ok, detail + " [3.4, 4.6]")
    assert ok


def test_c08c_cauchy_m1k2(acceptance_report, cauchy_m1k2):
    ok, detail = _cauchy_criterion(cauchy_m1k2, ks=False)
    acceptance_report("8c", ok, detail + " [1.7, 2.3]")
    assert ok


def test_c09_independence(acceptance_report, cauchy_m1k2):
    rep = cauchy_m1k2["estimates"]["independence"]
    ok = len(rep) == 9 and all(r["pass"] for r in rep)
    worst = max(r["abs_diff"] - 0.05 - 3 * r["se"] for r in rep)
    acceptance_report(9, ok, f"3x3 grid, max(|diff| - 0.05 - 3SE) = {worst:+.4f}")
    assert ok


def test_c10_stiefel_windings(acceptance_report):
    s = experiment(experiment="stiefel-winding", m=2, k=1, T=30.0, dt=1e-2, n_paths=3000, engine="unitary",
                   thin=3000)
    fits = s["estimates"]["winding_fits"]
    mod = s["estimates"]["max_modulus_residual"]
    ok = all(3.4 <= f.get("scale", -1) <= 4.6 for f in fits) and mod < 1e-10
    scales = ", ".join(f"{f.get('scale', float('nan')):.3f}" for f in fits)
    acceptance_report(10, ok, f"winding scales [{scales}] in [3.4, 4.6], modulus residual {mod:.3g}")
    assert ok


def test_c11_stationarity(acceptance_report):
    s1 = experiment(experiment="jacobi-stationary", m=1, k=1, T=20.0, dt=1e-3, n_paths=3000, thin=20000)
    s2 = experiment(experiment="jacobi-stationary", m=1, k=2, T=20.0, dt=1e-3, n_paths=3000, thin=20000)
    e1, e2 = s1["estimates"]["lambda_1"], s2["estimates"]["lambda_1"]
    ok = e1["ks_p"] > 0.01 and e2["ks_p"] > 0.01 and (e1["beta_a"], e1["beta_b"]) == (1.0, 1.0) \
        and (e2["beta_a"], e2["beta_b"]) == (1.0, 2.0)
    acceptance_report(11, ok, f"Beta(1,1) KS p {e1['ks_p']:.3f}; Beta(1,2) KS p {e2['ks_p']:.3f}")
    assert ok


def test_c12_horizontal_lift(acceptance_report):
    s = experiment(experiment="horizontal-lift", m=2, k=1, T=1e-2, dt=1e-5, n_paths=3)
    ok = s["verdict"]
    acceptance_report(12, ok, "max residuals: " + fmt_checks(s))
    assert ok


def test_c13_reproducible(acceptance_report, tmp_path):
    outs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        code = main(["run", "--experiment", "stiefel-winding", "--m", "1", "--k", "2", "--T", "0.5", "--dt", "1e-3",
                     "--paths", "16", "--seed", str(SEED), "--engine", "unitary", "--thin", "10", "--out", str(out)])
        assert code in (0, 1)
        outs.append((out / "paths.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    acceptance_report(13, ok, f"paths.csv {len(outs[0])} bytes, identical = {outs[0] == outs[1]}")
    assert ok
