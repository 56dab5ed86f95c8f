import csv

import numpy as np
import pytest

from rpslab.conditions import assemble_report
from rpslab.linearflow import decay_envelope
from rpslab.operators import (GainConfig, PeriodicProcess, picard_blocks, picard_fixed_point,
                              realize_rps)
from rpslab.pullback import (crosscheck_pullback_vs_fixpoint, envelope_diagnostics,
                             noise_floor, run_pullback, verify_rps_invariance)
from rpslab.sdeflow import evolve_indices, period_steps
from rpslab.wiener import Ensemble

from conftest import scalar_spec

# slow scalar system: contraction per period ~e^{-0.6}, so fans shrink visibly over n = 1..8
SLOW_H = "0.06*(1 + 0.5*sin(2*pi*t)) + 0.24*x1/(1 + 0.25*x1)"
X0_SET = [[0.0], [1.0], [5.0]]


@pytest.fixture(scope="module")
def slow():
    spec = scalar_spec(0.6, 0.1, h=SLOW_H)
    env = decay_envelope(spec)
    P = 100
    ens = Ensemble.from_seeds(range(256), 1 / P, -8 * P, 0, 1)
    return spec, env, ens


@pytest.fixture(scope="module")
def slow_fixpoint():
    spec = scalar_spec(0.6, 0.1, h=SLOW_H)
    env = decay_envelope(spec)
    cfg = GainConfig()
    P, kmax = 50, 12
    nb = picard_blocks(spec, env, cfg, kmax)
    ens = Ensemble.from_seeds(range(32), 1 / P, -(nb + 1) * P, P, 1)
    res = picard_fixed_point(spec, env, cfg, 0.0, k_max=kmax, tol=1e-8, ensemble=ens)
    Y = realize_rps(spec, env, cfg, res.u)
    return spec, env, cfg, ens, res, Y


def test_zero_feedback_fan_collapses():
    spec = scalar_spec(1.0, 0.3)
    ens = Ensemble.from_seeds(range(32), 0.01, -1000, 0, 1)
    fan = run_pullback(spec, ens, 0.0, 0.0, range(0, 9), X0_SET)
    med = fan.median_diameter()
    assert med[0] == 5.0
    assert np.all(np.diff(med) < 0)
    assert med[-1] < 1e-2


def test_deterministic_constant_feedback_limit():
    alpha, c = 2.0, 1.0
    spec = scalar_spec(alpha, 0.0, h=str(c))
    ens = Ensemble.from_seeds([0], 1e-3, -8000, 0, 1)
    fan = run_pullback(spec, ens, 0.0, 0.0, [8], X0_SET)
    # EM map x -> x + (c - alpha x) dt contracts towards c/alpha by (1 - alpha dt) per step
    dist0 = np.abs(np.array(X0_SET) - c / alpha)[None, :, None]
    bound = dist0 * (1 - alpha * 1e-3) ** 8000 + 1e-14
    assert np.all(np.abs(fan.terminal - c / alpha) <= bound)


def test_slope_in_heuristic_band(slow):
    spec, env, ens = slow
    fan = run_pullback(spec, ens, 0.0, 0.0, range(1, 9), X0_SET, lam=env.lam)
    lo, hi = fan.heuristic_band()
    assert lo <= fan.fit_slope() <= hi
    assert np.all(np.diff(fan.median_diameter()) < 0)
    assert fan.summary()["slope_in_band"] is True


def test_single_n_has_no_slope(slow):
    spec, env, ens = slow
    fan = run_pullback(spec, ens, 0.0, 0.0, [3], X0_SET, lam=env.lam)
    assert fan.fit_slope() is None
    assert fan.cauchy.shape == (0, len(ens))
    assert fan.summary()["slope_in_band"] is None


def test_fan_matches_separate_runs(slow):
    spec, _, ens = slow
    sub = ens.subset([0, 7, 100])
    fan = run_pullback(spec, sub, 0.0, 0.25, [1, 2, 5], X0_SET)
    P = period_steps(spec, sub.dt)
    i_t, i_a = 0, round(0.25 * P)
    for a, n in enumerate(fan.ns):
        for b, x0 in enumerate(X0_SET):
            for p, g in enumerate(sub.grids):
                ref = evolve_indices(spec, g, i_t - i_a - n * P, i_t, x0, store=False).final
                assert np.array_equal(fan.terminal[a, b, p], ref)


def test_envelopes_squeeze_on_slow_system(slow):
    spec, _, ens = slow
    diag = envelope_diagnostics(spec, ens, 0.0, 0.0, range(1, 9), [5.0])
    assert all(diag.check().values())
    gaps = diag.mean_gap()
    assert gaps[-1] == 0.0  # single-element tail
    assert gaps[-2] < gaps[0] / 4


def test_constant_feedback_envelopes_coincide():
    spec = scalar_spec(1.0, 0.2, h="0.5")
    ens = Ensemble.from_seeds(range(8), 0.01, -600, 0, 1)
    diag = envelope_diagnostics(spec, ens, 0.0, 0.0, range(1, 6), [2.0])
    assert np.array_equal(diag.a, diag.b)
    assert not diag.mean_gap().any()


def test_single_n_envelope():
    spec = scalar_spec(1.0, 0.2, h="x1/(1 + x1)")
    ens = Ensemble.from_seeds(range(4), 0.01, -300, 0, 1)
    diag = envelope_diagnostics(spec, ens, 0.0, 0.0, [2], [1.0])
    assert np.array_equal(diag.a, diag.values) and np.array_equal(diag.b, diag.values)
    assert all(diag.check().values())


def test_ex55_fan_and_gaps_nonincreasing(ex55):
    P = period_steps(ex55, ex55.T / 200)
    ens = Ensemble.from_seeds(range(16), ex55.T / P, -8 * P, 0, ex55.d)
    fan = run_pullback(ex55, ens, 0.0, 0.0, range(1, 9), np.eye(ex55.d) * 5)
    assert np.all(np.diff(fan.median_diameter()) <= 0)
    diag = envelope_diagnostics(ex55, ens, 0.0, 0.0, range(1, 9), np.ones(ex55.d))
    assert diag.check()["gap_nonincreasing"]


def test_order_sandwich(presets):
    spec = presets["othmer_tyson"]
    P = period_steps(spec, spec.T / 100)
    ens = Ensemble.from_seeds(range(8), spec.T / P, -4 * P, 0, spec.d)
    lo, mid, hi = np.zeros(spec.d), np.ones(spec.d), 3 * np.ones(spec.d)
    fan = run_pullback(spec, ens, 0.0, 0.0, range(1, 5), [lo, mid, hi])
    X = fan.terminal
    assert np.all(X[:, 0] <= X[:, 1]) and np.all(X[:, 1] <= X[:, 2])


def test_argument_errors(slow):
    spec, _, ens = slow
    with pytest.raises(ValueError):
        run_pullback(spec, ens, 0.0, 1.0, [1], X0_SET)
    with pytest.raises(ValueError):
        run_pullback(spec, ens, 0.0, 0.0, [-1], X0_SET)
    with pytest.raises(ValueError):
        run_pullback(spec, ens, 0.0, 0.0, [1], [[-1.0]])
    with pytest.raises(IndexError):
        run_pullback(spec, ens, 0.0, 0.0, [9], X0_SET)


def test_csv_output(slow, tmp_path):
    spec, env, ens = slow
    fan = run_pullback(spec, ens.subset(range(16)), 0.0, 0.0, range(1, 4), X0_SET, lam=env.lam)
    gaps = np.array([0.3, 0.2, 0.0])
    fan.to_csv(tmp_path / "fan.csv", gaps)
    rows = list(csv.reader(open(tmp_path / "fan.csv")))
    assert rows[0] == ["n", "median_diameter", "median_cauchy", "mean_envelope_gap"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert float(rows[1][1]) == fan.median_diameter()[0]
    assert rows[3][2] == ""


def test_noise_floor_scales():
    assert noise_floor(1.0) == 16 * np.finfo(float).eps
    assert noise_floor(0.0) > 0


# -- random periodic solution checks ------------------------------------------------


def test_invariance_on_slow_system(slow_fixpoint):
    spec, env, cfg, ens, res, Y = slow_fixpoint
    assert res.max_ratio <= assemble_report(spec).kappa
    r = verify_rps_invariance(spec, env, cfg, Y, [(0.0, 0.5), (0.2, 0.9)])
    assert max(r.flow_max) < 2e-3


def test_invariance_zero_feedback():
    spec = scalar_spec(1.0, 0.3)
    env = decay_envelope(spec)
    cfg = GainConfig()
    B = cfg.blocks(spec, env)
    ens = Ensemble.from_seeds(range(4), 0.02, -(B + 2) * 50, 50, 1)
    Y = realize_rps(spec, env, cfg, PeriodicProcess.constant(ens, spec, 0.0, B + 1))
    r = verify_rps_invariance(spec, env, cfg, Y, [(0.0, 0.5), (-1.0, 0.5)])
    assert r.flow_max == [0.0, 0.0]
    assert r.shift_residual == 0.0


def _ex55_invariance(spec, dt, M):
    env = decay_envelope(spec)
    cfg = GainConfig(M_trunc=M)
    P = round(spec.T / dt)
    kmax = 3
    nb = picard_blocks(spec, env, cfg, kmax) + 1
    ens = Ensemble.from_seeds(range(8), spec.T / P, -(nb + 1) * P, P, spec.d)
    res = picard_fixed_point(spec, env, cfg, 0.0, k_max=kmax, tol=1e-12, ensemble=ens)
    Y = realize_rps(spec, env, cfg, res.u)
    half = (P // 2) * Y.dt
    return verify_rps_invariance(spec, env, cfg, Y, [(0.0, half), (-half, half)])


def test_ex55_invariance_refines(ex55):
    T = ex55.T
    coarse = _ex55_invariance(ex55, 1e-2, 5 * T)
    fine = _ex55_invariance(ex55, 5e-3, 10 * T)
    assert max(fine.flow_median) < max(coarse.flow_median)
    assert coarse.shift_residual == 0.0 and fine.shift_residual == 0.0


def test_shift_residual_zero_on_presets(presets):
    for name, spec in presets.items():
        env = decay_envelope(spec)
        cfg = GainConfig(M_trunc=3 * spec.T)
        B = cfg.blocks(spec, env)
        P = 50
        ens = Ensemble.from_seeds(range(4), spec.T / P, -(B + 3) * P, P, spec.d)
        Y = realize_rps(spec, env, cfg, PeriodicProcess.random(ens, spec, B + 2, seed=5))
        assert Y.nblocks == 3
        r = verify_rps_invariance(spec, env, cfg, Y, [(0.0, spec.T / 2)])
        assert r.shift_residual == 0.0, name


def test_crosscheck_shrinks(slow_fixpoint):
    spec, env, cfg, ens, res, Y = slow_fixpoint
    fan = run_pullback(spec, ens, 0.0, 0.0, range(1, 9), X0_SET, lam=env.lam)
    cc = crosscheck_pullback_vs_fixpoint(spec, env, cfg, fan, Y)
    med = np.array(cc["median_distance"])
    assert np.all(np.diff(med) < 0)
    assert cc["final_median"] < med[0] / 10


def _deterministic_crosscheck(P):
    spec = scalar_spec(2.0, 0.0, h="1 + 0.5*sin(2*pi*t)")
    env = decay_envelope(spec)
    cfg = GainConfig()
    kmax = 2
    nb = picard_blocks(spec, env, cfg, kmax)
    ens = Ensemble.from_seeds([0], 1 / P, -(nb + 1) * P, P, 1)
    res = picard_fixed_point(spec, env, cfg, 0.0, k_max=kmax, tol=1e-12, ensemble=ens)
    Y = realize_rps(spec, env, cfg, res.u)
    fan = run_pullback(spec, ens, 0.0, 0.0, [12], [[0.0], [3.0]])
    return crosscheck_pullback_vs_fixpoint(spec, env, cfg, fan, Y)["final_median"]


def test_crosscheck_deterministic():
    # K adds h dt before the linear step, the pull-back uses a plain Euler step:
    # both are first-order quadratures of the same periodic orbit
    e1, e2 = _deterministic_crosscheck(200), _deterministic_crosscheck(400)
    assert e1 <= 1.5 * (1 / 200)
    assert 1.8 <= e1 / e2 <= 2.2


def test_crosscheck_zero_feedback():
    spec = scalar_spec(1.0, 0.3)
    env = decay_envelope(spec)
    cfg = GainConfig()
    B = cfg.blocks(spec, env)
    ens = Ensemble.from_seeds(range(4), 0.02, -(B + 2) * 50, 50, 1)
    Y = realize_rps(spec, env, cfg, PeriodicProcess.constant(ens, spec, 0.0, B))
    fan = run_pullback(spec, ens, 0.0, 0.0, [4], [[0.0]])
    cc = crosscheck_pullback_vs_fixpoint(spec, env, cfg, fan, Y)
    assert cc["final_median"] == 0.0


def test_crosscheck_rejects_mismatched_seeds(slow_fixpoint):
    spec, env, cfg, ens, res, Y = slow_fixpoint
    other = Ensemble.from_seeds(range(100, 132), ens.dt, -8 * 50, 0, 1)
    fan = run_pullback(spec, other, 0.0, 0.0, [1], X0_SET)
    with pytest.raises(ValueError):
        crosscheck_pullback_vs_fixpoint(spec, env, cfg, fan, Y)
    fan = run_pullback(spec, ens, 1.0, 0.0, [1], X0_SET)
    with pytest.raises(ValueError):
        crosscheck_pullback_vs_fixpoint(spec, env, cfg, fan, Y)
