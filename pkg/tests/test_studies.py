import os

from dampshift import studies
from dampshift.dae import nominal_operating_point
from dampshift.ilp import IlpConfig, TABLE2, run_ilp
from dampshift.netcase import load_case, write_case
from dampshift.smallsignal import spectrum_of
from tests import toys

import numpy as np
import pandas as pd
import pytest


def sample_report():
    report = studies.StudyReport('table2', buses=(2, 3))
    report.add_row(wall_time=1.5, scenario='case1', fidelity='avr-pss',
                   status='converged', nominal_sdr_pct=0.5,
                   optimal_sdr_pct=0.6, iterations=3, p_2_mw=20.0,
                   p_3_mw=95.9)
    report.add_row(wall_time=2.5, scenario='case2', fidelity='avr-pss',
                   status='max_iter', nominal_sdr_pct=0.5,
                   optimal_sdr_pct=0.55, iterations=100)
    return report


def test_report_improvement_is_consistent():
    frame = sample_report().frame
    assert list(frame.columns[:3]) == ['scenario', 'fidelity', 'status']
    assert frame.columns[-1] == 'p_3_mw'
    expected = 100 * (frame['optimal_sdr_pct'] - frame['nominal_sdr_pct']) \
        / frame['nominal_sdr_pct']
    assert np.allclose(frame['improvement_pct'], expected)
    assert np.isclose(frame['improvement_pct'].iloc[0], 20.0)


def test_csv_is_deterministic(tmpdir):
    first = str(tmpdir.join('a.csv'))
    second = str(tmpdir.join('b.csv'))
    sample_report().to_csv(first)
    report = sample_report()
    report.wall_times = [9.0, 9.0]
    report.to_csv(second)
    with open(first) as fa, open(second) as fb:
        msg = "Wall time must not leak into the machine-readable output"
        assert fa.read() == fb.read(), msg
    assert 'wall_time_s' in report.to_text()


def test_write_outputs(tmpdir):
    report = sample_report()
    report.traces['case1'] = pd.DataFrame({'iteration': [0, 1],
                                           'sdr_pct': [0.5, 0.6]})
    report.write(str(tmpdir))
    names = sorted(os.listdir(str(tmpdir)))
    assert names == ['case1_trace.csv', 'table2.csv', 'table2.txt']
    again = pd.read_csv(str(tmpdir.join('table2.csv')))
    assert list(again['scenario']) == ['case1', 'case2']


def test_participation_table():
    case = load_case('ieee14')
    frame = studies.participation_table(case, 'avr-pss').frame
    assert list(frame['bus']) == [m.bus for m in case.machines]
    msg = "Machine participations should cover every dynamic state"
    assert np.isclose(frame['participation'].sum(), 1.0), msg


def test_cross_evaluate_nominal_pattern():
    case = toys.toy3()
    pattern = {b: case.buses[case.bus_position[b]].p_d0
               for b in case.dr.buses}
    met = studies.cross_evaluate(case, pattern, 'classical')
    op = nominal_operating_point(case, 'classical')
    _, _, nominal = spectrum_of(case, 'classical', op)
    assert np.isclose(met.sdr, nominal.sdr, atol=1e-10)


def test_cli_exit_codes(tmpdir):
    assert studies.cli_main(['pf', '--case', 'ieee14', '-q']) == 0
    msg = "Unknown commands are usage errors"
    assert studies.cli_main(['bogus']) == 2, msg
    assert studies.cli_main(['--help']) == 0
    path = str(tmpdir.join('missing.case'))
    msg = "Unreadable cases are reported as failures"
    assert studies.cli_main(['spectrum', '--case', path, '-q']) == 1, msg


def test_cli_spectrum_output(tmpdir):
    case_path = str(tmpdir.join('toy3.case'))
    write_case(toys.toy3(), case_path)
    out = str(tmpdir.join('out'))
    code = studies.cli_main(['spectrum', '--case', case_path, '--fidelity',
                             'classical', '--out', out, '-q'])
    assert code == 0
    table = pd.read_csv(os.path.join(out, 'spectrum.csv'))
    assert {'real', 'imag', 'damping_pct'} <= set(table.columns)


def test_cli_rejects_missing_controllers(tmpdir):
    case_path = str(tmpdir.join('toy3.case'))
    write_case(toys.toy3(), case_path)
    msg = "A fidelity the case cannot support is a reported failure"
    assert studies.cli_main(['spectrum', '--case', case_path, '-q']) == 1, msg


def test_redispatch_benchmark_picks_pv_machine():
    case = toys.toy3()
    op = nominal_operating_point(case, 'classical')
    _, _, met = spectrum_of(case, 'classical', op)
    report = studies.benchmark_redispatch(case, 'classical',
                                          target_sdr=met.sdr + 1e-5)
    frame = report.frame
    assert list(frame['bus']) == [2]
    row = frame.iloc[0]
    assert bool(row['selected'])
    assert np.isclose(row['predicted_sdr_pct'], 100 * (met.sdr + 1e-5))
    msg = "A small redispatch should land close to its linear prediction"
    assert abs(row['realized_sdr_pct'] - row['predicted_sdr_pct']) < 5e-4, msg


@pytest.mark.slow
def test_pairwise_on_toy_case():
    case = toys.toy3()
    result = studies.study_pairwise(case, 'classical')
    assert result.best_pair == (2, 3)
    assert result.matrix.shape == (2, 2)
    assert np.isclose(result.matrix.loc[3, 2], result.best_sdr)
    assert np.isnan(result.matrix.loc[2, 3])
    assert len(result.report.rows) == 1


@pytest.mark.slow
def test_load_shift_improves_both_fidelities():
    case = load_case('ieee14')
    config = IlpConfig(max_iter=5)
    for fidelity in ('classical', 'avr-pss'):
        _, trace = run_ilp(case, fidelity, TABLE2['case1'], config)
        msg = "Load shifting should raise the smallest damping (%s)" % fidelity
        assert trace.final.sdr > trace.records[0].sdr, msg


@pytest.mark.slow
def test_ramp_limited_redispatch_trails_load_shift():
    case = load_case('ieee14')
    frame = studies.benchmark_ramp(case, 'avr-pss').frame.set_index('scenario')
    shift = frame.loc['case1', 'optimal_sdr_pct']
    ramped = frame.loc['ramp1', 'optimal_sdr_pct']
    msg = "A 1 MW ramp should reach less than coupled load shifting"
    assert ramped < shift, msg
