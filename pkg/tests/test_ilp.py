import logging

from dampshift import ilp
from dampshift.dae import nominal_operating_point, residuals
from dampshift.ilp import (IlpConfig, LpError, LpProblem, LpStep, Scenario,
                           ScenarioError, TABLE2)
from dampshift.netcase import load_case, parse_case
from dampshift.smallsignal import Spectrum, spectrum_of
from tests import toys

import numpy as np
import pytest


def tableau_simplex(c, a, b):
    """ Textbook dense tableau simplex with Bland's rule for
    ``max c.x, a x <= b, x >= 0`` with ``b >= 0``.
    """
    m, n = a.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = a
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[-1, :n] = -c
    basis = list(range(n, n + m))
    while True:
        entering = [j for j in range(n + m) if tab[-1, j] < -1e-12]
        if not entering:
            return tab[-1, -1]
        j = entering[0]
        rows = [i for i in range(m) if tab[i, j] > 1e-12]
        assert rows, "unbounded"
        ratios = [(tab[i, -1] / tab[i, j], basis[i], i) for i in rows]
        _, _, r = min(ratios)
        tab[r] /= tab[r, j]
        for i in range(m + 1):
            if i != r:
                tab[i] -= tab[i, j] * tab[r]
        basis[r] = j


def dense_problem(c, a, b):
    n = len(c)
    return LpProblem(c=c, a_ub=a, b_ub=b, a_eq=np.zeros((0, n)),
                     b_eq=np.zeros(0), bounds=[(0, None)] * n)


def test_lp_matches_tableau_simplex():
    rng = np.random.RandomState(12)
    for _ in range(100):
        n, m = 20, 10
        a = rng.uniform(0.1, 1.0, size=(m, n))
        b = rng.uniform(1.0, 5.0, size=m)
        c = rng.uniform(-1.0, 1.0, size=n)
        expected = tableau_simplex(c, a, b)
        result = ilp.lp_solve(dense_problem(c, a, b))
        msg = "HiGHS and the tableau simplex should agree"
        assert abs(result.objective - expected) <= 1e-8 * max(1, abs(
            expected)), msg


def test_lp_failures():
    with pytest.raises(LpError) as err:
        ilp.lp_solve(LpProblem(c=np.ones(1), a_ub=np.ones((1, 1)),
                               b_ub=np.ones(1), a_eq=np.zeros((0, 1)),
                               b_eq=np.zeros(0), bounds=[(2.0, None)]))
    assert err.value.status == 'infeasible'
    with pytest.raises(LpError) as err:
        ilp.lp_solve(LpProblem(c=np.ones(1), a_ub=np.zeros((0, 1)),
                               b_ub=np.zeros(0), a_eq=np.zeros((0, 1)),
                               b_eq=np.zeros(0), bounds=[(1.0, 0.0)]))
    assert err.value.status == 'infeasible'


def test_scenario_payloads():
    with pytest.raises(ScenarioError):
        Scenario.pairwise(3, 3)
    with pytest.raises(ScenarioError):
        Scenario.q_only(q_dev_cap=-1.0)
    with pytest.raises(ScenarioError):
        ilp.scenario_from_name('case9')
    with pytest.raises(ScenarioError):
        ilp.scenario_from_name('pairwise')
    assert TABLE2['case5'].q_dev_cap == 20.0
    assert TABLE2['case6'].moves_generation
    assert not TABLE2['case6'].shifts_p
    assert TABLE2['case1'].coupled_q and TABLE2['case1'].conserves_p
    assert TABLE2['case3'].conserves_q and not TABLE2['case3'].shifts_p


def test_config_bounds():
    with pytest.raises(AssertionError):
        IlpConfig(eps_lower=0.01, eps_upper=0.02)
    config = IlpConfig().with_eps(0.002)
    assert (config.eps_lower, config.eps_upper) == (-0.002, 0.002)


def damped(zetas, omega=5.0):
    lam = []
    for z in zetas:
        top = omega * complex(-z, np.sqrt(1 - z * z))
        lam += [top, np.conj(top)]
    n = len(lam)
    eye = np.eye(n, dtype=complex)
    return Spectrum(np.array(lam), eye, eye, n_x=n)


def test_select_criticals():
    spec = damped([0.01, 0.012, 0.02])
    chosen = ilp.select_criticals(spec)
    msg = "Modes within the margin of the smallest damping are critical"
    assert [spec.damping[m] for m in chosen] == pytest.approx([0.01, 0.012]), \
        msg
    assert all(spec.imag[m] > 0 for m in chosen)

    spec = damped([0.010, 0.011, 0.012, 0.013, 0.014, 0.0145, 0.0148])
    chosen = ilp.select_criticals(spec)
    assert len(chosen) == 5
    assert spec.damping[chosen[0]] == pytest.approx(0.010)

    spec = damped([0.03])
    assert len(ilp.select_criticals(spec)) == 1


def ieee14_lp(scenario, config=None):
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    lin, spec, _ = spectrum_of(case, 'avr-pss', op)
    config = config or IlpConfig()
    criticals = ilp.select_criticals(spec, config)
    problem = ilp.build_lp(lin, spec, criticals, op, scenario, config)
    return case, op, problem, ilp.lp_solve(problem)


def test_zero_step_bounds_give_zero_objective():
    _, _, _, result = ieee14_lp(TABLE2['case1'], IlpConfig().with_eps(0.0))
    msg = "Without eigenvalue movement the LP cannot improve damping"
    assert abs(result.objective) < 1e-9, msg


def test_coupled_step_conserves_and_follows_power_factor():
    case, op, problem, result = ieee14_lp(TABLE2['case1'])
    assert result.objective >= -1e-9
    step = ilp.extract_step(problem, result, op.layout)
    pos = case.dr_positions()
    msg = "Shifted demand should sum to zero"
    assert abs(step.dp_d[pos].sum()) <= 1e-8, msg
    mu = ilp.power_factor_ratio(case, op, case.dr.buses)
    msg = "Reactive steps should follow the power-factor ratio"
    assert np.allclose(step.dp_d[pos], mu * step.dq_d[pos], atol=1e-8), msg
    others = np.setdiff1d(np.arange(case.n_bus), pos)
    assert np.allclose(step.dp_d[others], 0.0)
    assert np.allclose(step.dp_sched, 0.0)
    lo, hi = problem.index['step']
    alpha = result.x[problem.index['alpha']]
    assert np.all(alpha >= lo - 1e-9) and np.all(alpha <= hi + 1e-9)


def test_ramp_limits_generation_step():
    case, op, problem, result = ieee14_lp(ilp.scenario_from_name('ramp1'))
    lay = op.layout
    for k in range(lay.n_gen):
        if lay.gen_bus[k] == lay.slack:
            continue
        lo, hi = problem.bounds[lay.n_x + lay.p_g[k]]
        msg = "PV steps should stay within the 1 MW ramp"
        assert lo >= -0.01 - 1e-12 and hi <= 0.01 + 1e-12, msg
    step = ilp.extract_step(problem, result, lay)
    assert np.all(np.abs(step.dp_sched) <= 0.01 + 1e-9)
    assert np.allclose(step.dp_d, 0.0)


def test_zero_step_restores_same_point():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    again = ilp.restore(case, 'avr-pss', op, LpStep.zero(case, op.layout))
    msg = "A zero step should restore the same operating point"
    assert np.allclose(again.x, op.x, atol=1e-12), msg
    assert np.allclose(again.y, op.y, atol=1e-12), msg
    assert again.pf.iterations == 0


def test_restore_reimposes_totals():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    pos = case.dr_positions()
    step = LpStep.zero(case, op.layout)
    dp = np.zeros(case.n_bus)
    dp[pos[0]], dp[pos[1]] = 0.01, -0.0099
    step = LpStep(dp_d=dp, dq_d=np.zeros(case.n_bus),
                  dp_sched=step.dp_sched, dk_w=step.dk_w)
    moved = ilp.restore(case, 'avr-pss', op, step, TABLE2['case1'])
    assert np.isclose(moved.p_d[pos].sum(), op.p_d[pos].sum(), atol=1e-12)
    mu = ilp.power_factor_ratio(case, op, case.dr.buses)
    assert np.allclose(moved.q_d[pos], moved.p_d[pos] / mu)


@pytest.mark.slow
def test_load_shift_invariants():
    case = load_case('ieee14')
    nominal = nominal_operating_point(case, 'avr-pss')
    msg = "The nominal point should respect every limit"
    assert ilp.check_feasibility(case, nominal, TABLE2['case1']) == [], msg
    config = IlpConfig(max_iter=4)
    _, trace = ilp.run_ilp(case, 'avr-pss', TABLE2['case1'], config,
                           nominal)
    assert trace.status in ('converged', 'max_iter')
    pos = case.dr_positions()
    total = nominal.p_d[pos].sum()
    for rec in trace.records:
        op = rec.op
        msg = "Demand-response total should be conserved"
        assert abs(op.p_d[pos].sum() - total) <= 1e-8, msg
        f, g = residuals(case, 'avr-pss', op.x, op.y, op.params, op.layout)
        msg = "Every accepted point should be an equilibrium"
        assert max(np.abs(f).max(), np.abs(g).max()) <= 1e-8, msg
        msg = "Every accepted point should respect the nonlinear limits"
        assert ilp.check_feasibility(case, op, TABLE2['case1']) == [], msg
    for rec in trace.records[1:]:
        if rec.band_checked:
            msg = "Accepted steps at the step bound stay in the band"
            assert abs(rec.predicted - rec.realized) <= \
                config.band * abs(rec.predicted), msg
    msg = "Smallest damping should not decrease across accepted steps"
    assert np.all(np.diff(trace.sdr_history) >= -1e-6), msg
    assert trace.final.sdr >= trace.records[0].sdr
    table = trace.table()
    assert list(table['iteration']) == list(range(len(trace.records)))


def test_shedding_at_current_damping_is_zero():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    _, _, met = spectrum_of(case, 'avr-pss', op)
    _, shed = ilp.min_load_shedding(case, 'avr-pss', met.sdr, op=op)
    msg = "No load needs to be shed to keep the current damping"
    assert abs(shed) <= 1e-9, msg


def test_generation_without_ramp_converges_at_once():
    case = toys.toy3()
    scenario = Scenario.gen_only(ramp_cap=0.0)
    final, trace = ilp.run_ilp(case, 'classical', scenario)
    assert trace.status == 'converged'
    assert trace.iterations == 0
    assert np.allclose(final.y, trace.records[0].op.y)


def test_load_shift_needs_dr_buses():
    with pytest.raises(ScenarioError):
        ilp.run_ilp(toys.smib(), 'classical', Scenario.coupled())


def test_apply_pattern():
    case = toys.toy3()
    op = ilp.apply_pattern(case, 'classical', {3: 50.0})
    i = case.bus_position[3]
    assert np.isclose(op.p_d[i] * case.base_mva, 50.0)
    msg = "Coupled patterns keep the nominal power factor"
    assert np.isclose(op.q_d[i] * case.base_mva, 20.0 * 50.0 / 60.0), msg
    op = ilp.apply_pattern(case, 'classical', {3: 50.0}, q_pattern={3: 5.0})
    assert np.isclose(op.q_d[i] * case.base_mva, 5.0)
    with pytest.raises(ScenarioError):
        ilp.apply_pattern(case, 'classical', {7: 1.0})


def test_check_feasibility():
    case = toys.toy3()
    op = nominal_operating_point(case, 'classical')
    assert ilp.check_feasibility(case, op) == []
    tight = parse_case(toys.TOY3.replace('1 2 0.01 0.10 0.02 200',
                                        '1 2 0.01 0.10 0.02 0.001'))
    op = nominal_operating_point(tight, 'classical')
    violations = ilp.check_feasibility(tight, op)
    assert any(v.startswith('flow') for v in violations)


def test_gain_tuning():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    k_w, sdr, tuned = ilp.tune_pss_gain(case, 'avr-pss', op)
    pss = case.psss[0]
    assert pss.k_min <= k_w <= pss.k_max
    _, _, met = spectrum_of(case, 'avr-pss', tuned)
    assert np.isclose(met.sdr, sdr)
    msg = "Gain changes should not move the equilibrium"
    assert np.array_equal(tuned.y, op.y), msg
    with pytest.raises(ScenarioError):
        ilp.tune_pss_gain(toys.toy3(), 'classical')


def test_box_reports_violated_limit(caplog):
    with caplog.at_level(logging.WARNING, logger='dampshift.ilp'):
        box = ilp._box(0.02, 0.05, what="reactive output at bus 6")
    msg = "A violated limit only allows moves back toward it"
    assert box == (0.0, 0.05), msg
    assert "reactive output at bus 6" in caplog.text
    assert ilp._box(-0.1, 0.1, cap=0.05) == (-0.05, 0.05)
    assert ilp._box(-0.1, 0.1, backoff=0.01) == pytest.approx((-0.09, 0.09))
    assert ilp._box(-0.1, 0.005, backoff=0.01) == pytest.approx((-0.09, 0.0))


def test_move_penalty_is_left_out_of_the_gain():
    case, op, problem, result = ieee14_lp(TABLE2['case1'])
    w = problem.index['w']
    pos = case.dr_positions()
    msg = "Every responsive bus gets a movement column"
    assert w.stop - w.start == len(pos), msg
    dp = result.x[problem.index['p']][op.layout.par_p_d[pos]]
    msg = "Movement columns should carry the absolute demand steps"
    assert np.allclose(result.x[w], np.abs(dp), atol=1e-9), msg
    gain = problem.gain(result.x)
    assert gain >= result.objective
    assert np.isclose(gain, result.x[problem.index['t']])


def equal_loading_op(case, p_mw=15.0, q_mvar=5.0):
    buses = case.dr.buses
    return ilp.apply_pattern(case, 'avr-pss', {b: p_mw for b in buses},
                             coupled=False,
                             q_pattern={b: q_mvar for b in buses})


def test_pairwise_bounds_follow_start_point():
    case = load_case('ieee14')
    op = equal_loading_op(case)
    lin, spec, _ = spectrum_of(case, 'avr-pss', op)
    scenario = Scenario.pairwise(2, 12)
    config = IlpConfig()
    criticals = ilp.select_criticals(spec, config)
    problem = ilp.build_lp(lin, spec, criticals, op, scenario, config)
    off = problem.index['p'].start
    for bus in scenario.pair:
        i = case.bus_position[bus]
        lo, hi = problem.bounds[off + op.layout.par_p_d[i]]
        msg = "Pair bounds should come from the loads at the start point"
        assert np.isclose(lo, -0.15) and np.isclose(hi, 0.15), msg
    result = ilp.lp_solve(problem)
    step = ilp.extract_step(problem, result, op.layout)
    pos = [case.bus_position[b] for b in scenario.pair]
    msg = "Equal loading leaves room to shift within the pair"
    assert np.abs(step.dp_d[pos]).max() > 1e-6, msg
    assert abs(step.dp_d[pos].sum()) <= 1e-8


@pytest.mark.slow
def test_pairwise_run_from_equal_loading():
    case = load_case('ieee14')
    op = equal_loading_op(case)
    scenario = Scenario.pairwise(2, 12)
    final, trace = ilp.run_ilp(case, 'avr-pss', scenario,
                               IlpConfig(max_iter=3), op)
    pos = [case.bus_position[b] for b in scenario.pair]
    assert trace.iterations >= 1
    msg = "Pairwise shifting keeps the pair total"
    assert np.isclose(final.p_d[pos].sum(), 0.3, atol=1e-8), msg
    assert np.abs(final.p_d[pos] - 0.15).max() > 1e-6
    assert trace.final.sdr >= trace.records[0].sdr


def test_restore_resolves_setpoints():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    pos = case.dr_positions()
    zero = LpStep.zero(case, op.layout)
    dp = np.zeros(case.n_bus)
    dp[pos[0]], dp[pos[1]] = 0.05, -0.05
    step = LpStep(dp_d=dp, dq_d=np.zeros(case.n_bus),
                  dp_sched=zero.dp_sched, dk_w=zero.dk_w)
    moved = ilp.restore(case, 'avr-pss', op, step, TABLE2['case1'])
    f, g = residuals(case, 'avr-pss', moved.x, moved.y, moved.params,
                     moved.layout)
    msg = "The restored point should be an equilibrium"
    assert max(np.abs(f).max(), np.abs(g).max()) <= 1e-8, msg
    msg = "Torques follow the new electrical output"
    assert np.abs(moved.params.tau_m - op.params.tau_m).max() > 1e-5, msg


def test_toy_load_shift_converges_and_is_idempotent():
    case = toys.toy3()
    config = IlpConfig().with_eps(0.02)
    final, trace = ilp.run_ilp(case, 'classical', TABLE2['case1'], config)
    assert trace.status == 'converged'
    assert trace.final.sdr >= trace.records[0].sdr
    again, rerun = ilp.run_ilp(case, 'classical', TABLE2['case1'], config,
                               final)
    msg = "Starting from the optimum should stop without a step"
    assert rerun.status == 'converged', msg
    assert rerun.iterations == 0, msg
    assert np.allclose(again.p_d, final.p_d)


def test_unreachable_shedding_target():
    case = toys.toy3()
    with pytest.raises(LpError) as err:
        ilp.min_load_shedding(case, 'classical', 0.5, IlpConfig(max_iter=2))
    assert err.value.status == 'infeasible'


@pytest.mark.slow
def test_ieee14_load_shift_converges():
    case = load_case('ieee14')
    final, trace = ilp.run_ilp(case, 'avr-pss', TABLE2['case1'])
    msg = "Coupled load shifting should converge within the iteration cap"
    assert trace.status == 'converged', msg
    assert trace.final.sdr > trace.records[0].sdr
    assert ilp.check_feasibility(case, final, TABLE2['case1']) == []
