from dataclasses import replace

from dampshift import smallsignal as ss
from dampshift.dae import initialize_equilibrium, nominal_operating_point
from dampshift.netcase import load_case
from dampshift.powerflow import PowerFlowOptions, solve_power_flow
from tests import toys

import numpy as np
import pytest


def smib_system():
    case = toys.smib()
    op = nominal_operating_point(case, 'classical')
    lin, spec, met = ss.spectrum_of(case, 'classical', op)
    return case, op, lin, spec, met


def synchronizing(case, op):
    lay = op.layout
    e = op.y[lay.v_f[0]]
    delta = op.x[lay.delta[0]]
    m = case.machines[0]
    return e * np.cos(delta) / (m.x_d + case.branches[0].x)


def test_smib_reduced_matrix():
    case, op, lin, _, _ = smib_system()
    m = case.machines[0]
    k = synchronizing(case, op)
    expected = np.array([[0.0, 1.0],
                         [-k / (2 * m.h), -m.d / (2 * m.h)]])
    msg = "Reduced matrix should match the hand linearization"
    assert np.allclose(ss.reduced_matrix(lin), expected, atol=1e-10), msg


def test_smib_analytic_roots():
    case, op, _, spec, met = smib_system()
    m = case.machines[0]
    k = synchronizing(case, op)
    real = -m.d / (4 * m.h)
    imag = np.sqrt(k / (2 * m.h) - real ** 2)
    msg = "Eigenvalues should match the characteristic polynomial roots"
    assert np.isclose(spec.eigenvalues[0], complex(real, imag),
                      atol=1e-10), msg
    assert np.isclose(spec.eigenvalues[1], complex(real, -imag),
                      atol=1e-10), msg
    assert np.isclose(met.sdr, -real / np.hypot(real, imag))
    assert met.sdr_mode == 0


def test_eigenpair_residuals():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    lin, spec, _ = ss.spectrum_of(case, 'avr-pss', op)
    a, b = lin.A, lin.B
    scale = np.linalg.norm(a)
    for m in range(len(spec)):
        lam, r, l = spec.eigenvalues[m], spec.right[:, m], spec.left[:, m]
        res_r = np.linalg.norm(a.dot(r) - lam * b.dot(r))
        res_l = np.linalg.norm(l.dot(a) - lam * l.dot(b))
        msg = "Mode %i should satisfy A r = lambda B r" % m
        assert res_r <= 1e-9 * scale * np.linalg.norm(r), msg
        msg = "Mode %i should satisfy l A = lambda l B" % m
        assert res_l <= 1e-9 * scale * np.linalg.norm(l), msg
        msg = "Left and right vectors should be normalized"
        assert np.isclose(l[:spec.n_x].dot(r[:spec.n_x]), 1.0), msg
        assert np.isclose(np.max(np.abs(r[:spec.n_x])), 1.0), msg


def test_conjugate_closure():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    _, spec, met = ss.spectrum_of(case, 'avr-pss', op)
    assert len(spec) == op.layout.n_x
    for m in range(len(spec)):
        c = spec.conjugate(m)
        assert np.isclose(spec.eigenvalues[c], np.conj(spec.eigenvalues[m]),
                          atol=1e-8)
    msg = "The least damped mode should be an oscillatory representative"
    assert spec.imag[met.sdr_mode] > 0, msg
    damping = spec.damping[spec.representatives()]
    assert np.isclose(met.sdr, damping.min())


def test_sorted_least_damped_first():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'classical')
    _, spec, _ = ss.spectrum_of(case, 'classical', op)
    live = ~spec.degenerate
    assert np.all(np.diff(spec.damping[live]) >= -1e-12)
    msg = "Degenerate modes should be sorted last"
    assert spec.degenerate.sum() == 1, msg
    assert spec.degenerate[-1], msg


def test_metrics_examples():
    eye = np.eye(3, dtype=complex)
    spec = ss.Spectrum(np.array([5j, -5j, -1.0]), eye, eye, n_x=3)
    met = ss.metrics(spec)
    msg = "An undamped pair has zero damping"
    assert met.sdr == 0.0, msg
    assert met.alpha1 == 0.0
    with pytest.raises(ss.MetricError):
        ss.metrics(spec, ss.MetricConfig(weights={'interarea': 1.0}))
    met = ss.metrics(spec, interarea_mode=2)
    assert met.interarea == 1.0


def test_damping_change_matches_difference():
    lam = complex(-0.1, 6.0)
    dlam = complex(-1e-6, 2e-6)
    exact = 100 * (-(lam + dlam).real / abs(lam + dlam) - (-lam.real /
                                                          abs(lam)))
    assert np.isclose(ss.damping_change(lam, dlam), exact, rtol=1e-4)


def resolved_derivative(lin, spec, mode, name, h=1e-6):
    lay = lin.layout
    lam = spec.eigenvalues[mode]
    out = []
    for sign in (1, -1):
        x, y, params = lin.x.copy(), lin.y.copy(), lin.params
        if name in lay.z_names:
            pos = lay.z_names.index(name)
            if pos < lin.n_x:
                x[pos] += sign * h
            else:
                y[pos - lin.n_x] += sign * h
        else:
            vec = params.vector()
            vec[lay.p_names.index(name)] += sign * h
            params = params.with_vector(vec, lay)
        moved = ss.finite_spectrum(lin.at(x, y, params))
        out.append(moved.eigenvalues[np.argmin(np.abs(moved.eigenvalues -
                                                      lam))])
    return (out[0] - out[1]) / (2 * h)


@pytest.mark.parametrize('name', ['delta_2', 'v_2', 'i_q_2'])
def test_sensitivity_against_resolve_smib(name):
    _, _, lin, spec, _ = smib_system()
    row = ss.generalized_sensitivity(lin, spec, 0, [name])
    expected = resolved_derivative(lin, spec, 0, name)
    msg = "Sensitivity to %s should match re-solving the spectrum" % name
    assert abs(row[name] - expected) <= 1e-3 * abs(expected), msg


@pytest.mark.parametrize('name', ['k_w_1', 'v_1', 'omega_1', 'p_d_9',
                                  'q_d_14'])
def test_sensitivity_against_resolve_ieee14(name):
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    lin, spec, met = ss.spectrum_of(case, 'avr-pss', op)
    row = ss.generalized_sensitivity(lin, spec, met.sdr_mode, [name])
    expected = resolved_derivative(lin, spec, met.sdr_mode, name)
    if abs(expected) < 1e-9:
        assert abs(row[name]) < 1e-6
    else:
        assert abs(row[name] - expected) <= 1e-3 * abs(expected)


def test_conjugate_sensitivity():
    _, _, lin, spec, _ = smib_system()
    names = ['delta_2', 'v_2', 'theta_2']
    top = ss.generalized_sensitivity(lin, spec, 0, names)
    bottom = ss.generalized_sensitivity(lin, spec, spec.conjugate(0), names)
    msg = "Conjugate modes should have conjugate sensitivities"
    assert np.allclose(bottom.values, np.conj(top.values)), msg


def test_rate_target_is_zero():
    _, _, lin, spec, _ = smib_system()
    row = ss.generalized_sensitivity(lin, spec, 0, ['rate_1_2', 'delta_2'])
    assert row['rate_1_2'] == 0
    assert row['delta_2'] != 0
    with pytest.raises(ss.DampshiftError):
        ss.generalized_sensitivity(lin, spec, 0, ['no_such_state'])


def test_sensitivity_scale_invariance():
    _, _, lin, spec, _ = smib_system()
    scaled = replace(spec, right=spec.right * (2.0 - 1.0j),
                     left=spec.left * 0.25j)
    names = ['delta_2', 'v_2']
    a = ss.generalized_sensitivity(lin, spec, 0, names).values
    b = ss.generalized_sensitivity(lin, scaled, 0, names).values
    msg = "Sensitivities should not depend on eigenvector scaling"
    assert np.allclose(a, b), msg


def test_participation_factors():
    _, _, _, spec, _ = smib_system()
    part = ss.participation_factors(spec, 0)
    msg = "A lone oscillating machine splits participation evenly"
    assert np.allclose(part.values, [0.5, 0.5]), msg
    assert list(part.index) == ['delta_2', 'omega_2']

    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    _, spec, met = ss.spectrum_of(case, 'avr-pss', op)
    part = ss.participation_factors(spec, met.sdr_mode)
    assert np.isclose(part.sum(), 1.0)
    assert (part >= 0).all()


def synthetic(eigenvalues, vectors):
    vectors = np.asarray(vectors, dtype=complex)
    return ss.Spectrum(np.asarray(eigenvalues, dtype=complex), vectors,
                       np.conj(vectors), n_x=vectors.shape[0])


def test_track_mode():
    r1 = np.array([1.0, 1j, 0.0, 0.0])
    r2 = np.array([0.0, 0.0, 1.0, 1j])
    vecs = np.array([r1, np.conj(r1), r2, np.conj(r2)]).T
    old = synthetic([-0.1 + 2j, -0.1 - 2j, -0.5 + 5j, -0.5 - 5j], vecs)
    new = synthetic([-0.12 + 2.1j, -0.12 - 2.1j, -0.5 + 5j, -0.5 - 5j],
                    vecs)
    k, corr = ss.track_mode(old, 0, new)
    assert k == 0 and np.isclose(corr, 1.0)
    k, _ = ss.track_mode(old, 1, new)
    msg = "A lower-half mode should map to the new representative"
    assert k == 0, msg


def test_track_mode_near_tie():
    r1 = np.array([1.0, 1j, 0.0, 0.0])
    vecs = np.array([r1, r1, np.conj(r1), np.conj(r1)]).T
    old = synthetic([-0.1 + 2j, -0.3 + 4j, -0.1 - 2j, -0.3 - 4j], vecs)
    new = synthetic([-0.3 + 4.1j, -0.1 + 2.1j, -0.3 - 4.1j, -0.1 - 2.1j],
                    vecs)
    k, _ = ss.track_mode(old, 0, new)
    msg = "Equal correlations should go to the closest eigenvalue"
    assert k == 1, msg


def test_track_mode_lost():
    r1 = np.array([1.0, 1j, 0.0, 0.0])
    r2 = np.array([0.0, 0.0, 1.0, 1j])
    old = synthetic([-0.1 + 2j, -0.1 - 2j],
                    np.array([r1, np.conj(r1)]).T)
    new = synthetic([-0.1 + 2j, -0.1 - 2j],
                    np.array([r2, np.conj(r2)]).T)
    with pytest.raises(ss.ModeTrackingError) as err:
        ss.track_mode(old, 0, new)
    assert err.value.correlation < ss.TRACKING_THRESHOLD


def test_zero_generation_step():
    case = toys.toy3()
    op = nominal_operating_point(case, 'classical')
    with pytest.raises(ss.MetricError):
        ss.numeric_gen_sensitivity(case, 'classical', op, 2, 0.0)
    with pytest.raises(ss.MetricError):
        ss.numeric_gen_sensitivity(case, 'classical', op, 3, 1.0)


def test_chained_matches_numeric_sensitivity():
    case = toys.toy3()
    op = nominal_operating_point(case, 'classical')
    lin, spec, met = ss.spectrum_of(case, 'classical', op)
    mode = met.sdr_mode
    step = np.array([0.0, 1.0 / case.base_mva])
    dlam = ss.chained_sensitivity(lin, spec, [mode], {'p_sched': step}, op)
    chained = ss.damping_change(spec.eigenvalues[mode], dlam[0])
    numeric = ss.numeric_gen_sensitivity(case, 'classical', op, 2, 0.5)
    msg = "Chained and re-solved sensitivities should agree within 10%"
    assert abs(chained - numeric) <= 0.1 * abs(numeric), msg


def test_mode_table():
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    _, spec, met = ss.spectrum_of(case, 'avr-pss', op)
    table = ss.mode_table(spec)
    assert list(table.columns) == ['mode', 'real', 'imag', 'freq_hz',
                                   'damping_pct', 'dominant', 'degenerate']
    first = table[~table['degenerate']].iloc[0]
    assert np.isclose(first['damping_pct'], met.sdr_pct)
    assert (table['imag'] >= 0).all()


def test_singular_algebraic_block():
    _, _, lin, _, _ = smib_system()
    broken = replace(lin, gy=np.zeros_like(lin.gy))
    with pytest.raises(ss.SpectrumError):
        ss.finite_spectrum(broken)


def resolved_load_derivative(case, fidelity, op, spec, mode, key, bus,
                             h=1e-3):
    """ Central difference of one eigenvalue with respect to a bus demand,
    re-solving the power flow and the equilibrium on both sides.
    """
    options = PowerFlowOptions(tolerance=1e-11)
    i = case.bus_position[bus]
    out = []
    for sign in (1, -1):
        p_d, q_d = op.p_d.copy(), op.q_d.copy()
        (p_d if key == 'p_d' else q_d)[i] += sign * h
        pf = solve_power_flow(case, demand=(p_d, q_d),
                              generation=op.pf.p_sched, initial=op.pf,
                              options=options)
        moved = initialize_equilibrium(case, fidelity, pf, k_w=op.params.k_w,
                                       layout=op.layout)
        _, new_spec, _ = ss.spectrum_of(case, fidelity, moved)
        k, _ = ss.track_mode(spec, mode, new_spec)
        out.append(new_spec.eigenvalues[k])
    return (out[0] - out[1]) / (2 * h)


@pytest.mark.parametrize('key, bus', [('p_d', 3), ('p_d', 9), ('q_d', 9),
                                      ('q_d', 14)])
def test_load_sensitivity_along_equilibrium(key, bus):
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'avr-pss')
    lin, spec, met = ss.spectrum_of(case, 'avr-pss', op)
    direction = np.zeros(case.n_bus)
    direction[case.bus_position[bus]] = 1.0
    chained = ss.chained_sensitivity(lin, spec, [met.sdr_mode],
                                     {key: direction}, op)[0]
    numeric = resolved_load_derivative(case, 'avr-pss', op, spec,
                                       met.sdr_mode, key, bus)
    msg = "Demand sensitivity of %s at bus %i should match re-solving" % (
        key, bus)
    assert abs(chained - numeric) <= 1e-2 * abs(numeric) + 1e-7, msg


def test_classical_swing_damping_follows_inertia():
    # uniform D = 2 puts every swing mode near -D / (4 H)
    case = load_case('ieee14')
    op = nominal_operating_point(case, 'classical')
    _, spec, _ = ss.spectrum_of(case, 'classical', op)
    swing = (spec.imag > 1.0) & ~spec.degenerate
    assert swing.sum() >= 3
    alpha = -np.array([case.machines[k].d / (4 * case.machines[k].h)
                       for k in range(len(case.machines))])
    msg = "Swing-mode real parts should sit between the machine ratios"
    assert np.all(spec.real[swing] >= 1.2 * alpha.min()), msg
    assert np.all(spec.real[swing] <= 0.8 * alpha.max()), msg
