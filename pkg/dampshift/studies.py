""" Study harness and command-line front end.

Every study returns a `StudyReport`; the machine-readable CSV has a fixed
column order and carries no wall time, so identical inputs give identical
files. Human-readable tables are rendered from the same frame.
"""
from dataclasses import dataclass, replace
import argparse
import itertools
import logging
import multiprocessing
import os
import sys
import time

import numpy as np
import pandas as pd

from .dae import (ModelFidelity, initialize_equilibrium,
                  nominal_operating_point)
from .ilp import (IlpConfig, LpError, Scenario, ScenarioError, TABLE2,
                  apply_pattern, min_load_shedding, run_ilp,
                  scenario_from_name, total_dr_mw, tune_pss_gain)
from .netcase import DampshiftError, load_case
from .powerflow import (branch_flows, solve_power_flow, total_losses)
from .smallsignal import (mode_table, numeric_gen_sensitivity,
                          participation_factors, spectrum_of)

_log = logging.getLogger(__name__)

COLUMNS = ['scenario', 'fidelity', 'status', 'nominal_sdr_pct',
           'optimal_sdr_pct', 'improvement_pct', 'iterations', 'sdr_slope',
           'k_w', 'shed_mw']


class StudyReport(object):
    def __init__(self, study, columns=None, buses=()):
        """ Rows of one study plus the convergence traces of its runs.

        Parameters
        ----------
        study : str
            Study id, used as the output file stem.
        columns : list of str, optional
            Fixed leading columns; defaults to the optimization-row layout.
        buses : sequence of int
            Demand-responsive buses; each adds a ``p_<bus>_mw`` column.
        """
        self.study = study
        self.columns = list(columns or COLUMNS)
        self.columns += ['p_%i_mw' % b for b in buses]
        self.rows = []
        self.wall_times = []
        self.traces = {}

    def add_row(self, wall_time=0.0, trace=None, **fields):
        unknown = set(fields) - set(self.columns)
        msg = "Unknown report fields %s" % sorted(unknown)
        assert not unknown, msg
        self.rows.append(fields)
        self.wall_times.append(wall_time)
        if trace is not None:
            self.traces[fields.get('scenario', len(self.rows))] = trace

    @property
    def frame(self):
        frame = pd.DataFrame(self.rows, columns=self.columns)
        if 'improvement_pct' in frame:
            nom = frame['nominal_sdr_pct'].astype(float)
            opt = frame['optimal_sdr_pct'].astype(float)
            frame['improvement_pct'] = 100.0 * (opt - nom) / nom
        return frame

    def to_csv(self, path):
        self.frame.to_csv(path, index=False, float_format='%.10g')

    def to_text(self):
        frame = self.frame.copy()
        frame['wall_time_s'] = self.wall_times
        return "%s\n%s" % (self.study, frame.to_string(
            index=False, float_format=lambda v: '%.4f' % v))

    def write(self, out_dir):
        """ Write ``<study>.csv``, ``<study>.txt`` and one
        ``<scenario>_trace.csv`` per traced run into ``out_dir``.
        """
        os.makedirs(out_dir, exist_ok=True)
        self.to_csv(os.path.join(out_dir, '%s.csv' % self.study))
        with open(os.path.join(out_dir, '%s.txt' % self.study), 'w') as fh:
            fh.write(self.to_text() + '\n')
        for name, trace in self.traces.items():
            path = os.path.join(out_dir, '%s_trace.csv' % name)
            trace.to_csv(path, index=False, float_format='%.10g')


def _pattern_fields(case, op, buses=None):
    buses = case.dr.buses if buses is None else buses
    return {'p_%i_mw' % b: op.p_d[case.bus_position[b]] * case.base_mva
            for b in buses}


def _run_task(task):
    """ One ILP run; module level so that worker processes can import it.
    """
    case, fidelity, scenario, config, start = task
    tic = time.perf_counter()
    fields = dict(scenario=scenario.name, fidelity=fidelity)
    try:
        op = None
        if start is not None:
            p_pattern, q_pattern = start
            op = apply_pattern(case, fidelity, p_pattern, coupled=False,
                               q_pattern=q_pattern,
                               options=config.pf_options)
        final, trace = run_ilp(case, fidelity, scenario, config, op)
    except DampshiftError as err:
        _log.warning("%s failed: %s", scenario.name, err)
        fields.update(status='error: %s' % err)
        return fields, None, None, time.perf_counter() - tic
    _, _, slope = trace.stats('sdr_pct')
    fields.update(status=trace.status,
                  nominal_sdr_pct=100 * trace.records[0].sdr,
                  optimal_sdr_pct=100 * trace.final.sdr,
                  iterations=trace.iterations, sdr_slope=slope)
    if final.params.k_w.size:
        fields['k_w'] = final.params.k_w[0]
    pattern = _pattern_fields(case, final)
    return fields, pattern, trace.table(), time.perf_counter() - tic


def _map(tasks, jobs=1):
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    pool = multiprocessing.Pool(jobs)
    results = pool.map(_run_task, tasks)
    pool.close()
    pool.terminate()
    return results


def _collect(report, results):
    for fields, pattern, trace, wall in results:
        row = dict(fields)
        if pattern:
            row.update(pattern)
        report.add_row(wall_time=wall, trace=trace, **row)
    return report


def study_table2(case, fidelity='avr-pss', config=None, jobs=1,
                 scenarios=None):
    """ The seven comparison cases: load shifting variants, generation
    redispatch and both combined.
    """
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity).value
    if not case.dr.records:
        raise ScenarioError("the scenario sweep needs demand-responsive buses")
    names = list(scenarios or TABLE2)
    tasks = [(case, fidelity, TABLE2[n], config, None) for n in names]
    report = StudyReport('table2', buses=case.dr.buses)
    return _collect(report, _map(tasks, jobs))


def study_table1(case, config=None, target_sdr=None):
    """ Demand patterns per responsive bus: nominal, optimal without and
    with controllers, minimum load shedding and co-optimized stabilizer
    tuning.
    """
    config = config or IlpConfig()
    report = StudyReport('table1', buses=case.dr.buses)
    nominal = nominal_operating_point(case, 'avr-pss', config.pf_options)
    _, _, met = spectrum_of(case, 'avr-pss', nominal)
    row = dict(scenario='nominal', fidelity='avr-pss', status='converged',
               nominal_sdr_pct=met.sdr_pct, optimal_sdr_pct=met.sdr_pct,
               iterations=0, k_w=nominal.params.k_w[0])
    row.update(_pattern_fields(case, nominal))
    report.add_row(**row)

    optimum = {}
    for fidelity in ('classical', 'avr-pss'):
        scenario = Scenario(TABLE2['case1'].kind, label='optimal_%s' % (
            fidelity.replace('-', '_')))
        fields, pattern, trace, wall = _run_task(
            (case, fidelity, scenario, config, None))
        if pattern:
            fields.update(pattern)
        optimum[fidelity] = fields
        report.add_row(wall_time=wall, trace=trace, **fields)

    target = target_sdr
    if target is None:
        target = optimum['avr-pss'].get('optimal_sdr_pct', np.nan) / 100.0
    tic = time.perf_counter()
    row = dict(scenario='min_load_shedding', fidelity='avr-pss',
               nominal_sdr_pct=met.sdr_pct)
    try:
        if not np.isfinite(target):
            raise ScenarioError("no shedding target available")
        shed_op, shed = min_load_shedding(case, 'avr-pss', target, config,
                                          nominal)
        _, _, shed_met = spectrum_of(case, 'avr-pss', shed_op)
        row.update(status='converged', optimal_sdr_pct=shed_met.sdr_pct,
                   shed_mw=shed)
        row.update(_pattern_fields(case, shed_op))
    except DampshiftError as err:
        row.update(status='error: %s' % err)
    report.add_row(wall_time=time.perf_counter() - tic, **row)

    tic = time.perf_counter()
    row = dict(scenario='pss_co_optimized', fidelity='avr-pss',
               nominal_sdr_pct=met.sdr_pct)
    try:
        k_w, sdr, tuned = tune_pss_gain(case, 'avr-pss', nominal,
                                        co_optimize=True, config=config)
        row.update(status='converged', optimal_sdr_pct=100 * sdr, k_w=k_w)
        row.update(_pattern_fields(case, tuned))
    except DampshiftError as err:
        row.update(status='error: %s' % err)
    report.add_row(wall_time=time.perf_counter() - tic, **row)
    return report


def study_pss(case, config=None):
    """ Stabilizer gain alone, jointly with load shifting, and alone after
    the optimal load shift.
    """
    config = config or IlpConfig()
    report = StudyReport('pss', buses=case.dr.buses)
    nominal = nominal_operating_point(case, 'avr-pss', config.pf_options)
    _, _, met = spectrum_of(case, 'avr-pss', nominal)

    def add(name, run):
        tic = time.perf_counter()
        row = dict(scenario=name, fidelity='avr-pss',
                   nominal_sdr_pct=met.sdr_pct)
        try:
            k_w, sdr, op = run()
            row.update(status='converged', optimal_sdr_pct=100 * sdr, k_w=k_w)
            row.update(_pattern_fields(case, op))
        except DampshiftError as err:
            row.update(status='error: %s' % err)
        report.add_row(wall_time=time.perf_counter() - tic, **row)

    def after_shift():
        shifted, _ = run_ilp(case, 'avr-pss', TABLE2['case1'], config,
                             nominal)
        return tune_pss_gain(case, 'avr-pss', shifted, config=config)

    add('gain_only', lambda: tune_pss_gain(case, 'avr-pss', nominal,
                                           config=config))
    add('co_optimized', lambda: tune_pss_gain(case, 'avr-pss', nominal,
                                              co_optimize=True,
                                              config=config))
    add('gain_after_shift', after_shift)
    return report


@dataclass(frozen=True, eq=False)
class PairwiseResult:
    matrix: pd.DataFrame
    best_pair: tuple
    best_sdr: float
    report: StudyReport


def study_pairwise(case, fidelity='avr-pss', equal_loading=None, config=None,
                   jobs=1):
    """ Largest smallest damping ratio reachable by shifting load between
    each pair of responsive buses.

    Parameters
    ----------
    equal_loading : tuple of float, optional
        ``(p MW, q MVar)`` applied to every responsive bus before shifting.

    Returns
    -------
    result : PairwiseResult
        ``matrix`` is lower triangular in percent, indexed by bus id.
    """
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity).value
    buses = list(case.dr.buses)
    if len(buses) < 2:
        raise ScenarioError("pairwise study needs two responsive buses")
    start = None
    if equal_loading is not None:
        p_mw, q_mvar = equal_loading
        start = ({b: p_mw for b in buses}, {b: q_mvar for b in buses})
    pairs = list(itertools.combinations(buses, 2))
    tasks = []
    for a, b in pairs:
        scenario = Scenario.pairwise(a, b)
        scenario = Scenario(scenario.kind, pair=scenario.pair,
                            label='pair_%i_%i' % (a, b))
        tasks.append((case, fidelity, scenario, config, start))
    report = StudyReport('pairwise' if start is None else 'pairwise_equal',
                         buses=buses)
    results = _map(tasks, jobs)
    _collect(report, results)

    matrix = pd.DataFrame(np.nan, index=buses, columns=buses)
    for (a, b), (fields, _, _, _) in zip(pairs, results):
        matrix.loc[b, a] = fields.get('optimal_sdr_pct', np.nan)
    stacked = matrix.stack().dropna()
    if stacked.empty:
        raise LpError("no pairwise run succeeded")
    row, col = stacked.idxmax()
    best = (int(min(row, col)), int(max(row, col)))
    return PairwiseResult(matrix=matrix, best_pair=best,
                          best_sdr=float(stacked.max()), report=report)


def cross_evaluate(case, pattern, fidelity, k_w=None, config=None):
    """ Stability metrics of a demand pattern under a model fidelity. """
    config = config or IlpConfig()
    op = apply_pattern(case, fidelity, pattern, k_w=k_w,
                       options=config.pf_options)
    _, _, met = spectrum_of(case, fidelity, op)
    return met


def optimal_pattern(case, fidelity, scenario=None, config=None):
    """ Demand pattern (MW per responsive bus) at the ILP optimum. """
    scenario = scenario or TABLE2['case1']
    op, _ = run_ilp(case, fidelity, scenario, config)
    return {b: op.p_d[case.bus_position[b]] * case.base_mva
            for b in case.dr.buses}


def benchmark_redispatch(case, fidelity='avr-pss', target_sdr=None,
                         delta_p=1.0, config=None):
    """ One-shot redispatch of the most sensitive machine, sized from its
    numeric damping sensitivity.

    The target defaults to the generation-only ILP optimum. The report holds
    one row per PV machine; the selected one carries the predicted step and
    the predicted and realized damping ratios.
    """
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity)
    op = nominal_operating_point(case, fidelity, config.pf_options)
    _, _, met = spectrum_of(case, fidelity, op)
    if target_sdr is None:
        _, trace = run_ilp(case, fidelity, TABLE2['case6'], config, op)
        target_sdr = trace.final.sdr
    pv = [m.bus for m in case.machines
          if case.buses[case.bus_position[m.bus]].kind == 'pv']
    sens = {bus: numeric_gen_sensitivity(case, fidelity, op, bus, delta_p,
                                         config.pf_options) for bus in pv}
    bus = max(sens, key=sens.get)
    step_mw = (100 * (target_sdr - met.sdr)) / sens[bus]
    generation = op.pf.p_sched.copy()
    generation[case.machine_position[bus]] += step_mw / case.base_mva
    pf = solve_power_flow(case, demand=(op.p_d, op.q_d),
                          generation=generation, initial=op.pf,
                          options=config.pf_options)
    moved = initialize_equilibrium(case, fidelity, pf, k_w=op.params.k_w)
    _, _, realized = spectrum_of(case, fidelity, moved)
    _log.info("redispatch %.2f MW at bus %i: SDR %.4f%% (target %.4f%%)",
              step_mw, bus, realized.sdr_pct, 100 * target_sdr)

    report = StudyReport('redispatch', columns=[
        'bus', 'ss_pp_per_mw', 'selected', 'delta_p_mw', 'nominal_sdr_pct',
        'predicted_sdr_pct', 'realized_sdr_pct'])
    for b in pv:
        row = dict(bus=b, ss_pp_per_mw=sens[b], selected=b == bus,
                   nominal_sdr_pct=met.sdr_pct)
        if b == bus:
            row.update(delta_p_mw=step_mw, predicted_sdr_pct=100 * target_sdr,
                       realized_sdr_pct=realized.sdr_pct)
        report.add_row(**row)
    return report


def benchmark_ramp(case, fidelity='avr-pss', config=None, jobs=1):
    """ Generation redispatch limited to a 1 MW ramp against coupled load
    shifting.
    """
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity).value
    tasks = [(case, fidelity, TABLE2['case1'], config, None),
             (case, fidelity, scenario_from_name('ramp1'), config, None)]
    report = StudyReport('ramp', buses=case.dr.buses)
    return _collect(report, _map(tasks, jobs))


def participation_table(case, fidelity='avr-pss', op=None, config=None):
    """ Participation of every machine (rotor, exciter and stabilizer states)
    in the least damped mode.
    """
    config = config or IlpConfig()
    if op is None:
        op = nominal_operating_point(case, fidelity, config.pf_options)
    _, spec, met = spectrum_of(case, fidelity, op)
    part = participation_factors(spec, met.sdr_mode)
    lay = op.layout
    report = StudyReport('participation', columns=[
        'bus', 'participation', 'dominant_state'])
    names = list(part.index)
    for k, m in enumerate(case.machines):
        states = lay.machine_states(k)
        values = part.values[states]
        report.add_row(bus=m.bus, participation=float(values.sum()),
                       dominant_state=names[states[int(np.argmax(values))]])
    return report


def _pattern_arg(text):
    pattern = {}
    for item in text.split(','):
        bus, _, mw = item.partition('=')
        try:
            pattern[int(bus)] = float(mw)
        except ValueError:
            raise argparse.ArgumentTypeError("bad pattern entry %r" % item)
    return pattern


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--case', default='ieee14',
                        help="case file or bundled case name")
    common.add_argument('--fidelity', default='avr-pss',
                        choices=[f.value for f in ModelFidelity])
    common.add_argument('--out', default=None,
                        help="directory for CSV and text reports")
    common.add_argument('--eps', type=float, default=None,
                        help="symmetric eigenvalue step bound")
    common.add_argument('--threshold', type=float, default=None)
    common.add_argument('--max-iter', type=int, default=None)
    common.add_argument('--jobs', type=int, default=1)
    common.add_argument('--seedless', action='store_true',
                        help="deterministic mode (the pipeline has no "
                             "randomness)")
    common.add_argument('-v', '--verbose', action='store_true')
    common.add_argument('-q', '--quiet', action='store_true')

    parser = argparse.ArgumentParser(prog='dampshift', description=(
        "Small-signal stability and demand-response load shifting"))
    sub = parser.add_subparsers(dest='command')
    sub.required = True
    sub.add_parser('pf', parents=[common], help="AC power flow")
    sub.add_parser('spectrum', parents=[common], help="mode table")
    opt = sub.add_parser('optimize', parents=[common], help="one ILP run")
    opt.add_argument('--scenario', default='case1')
    opt.add_argument('--target', type=float, default=None,
                     help="SDR target in percent for load shedding")
    opt.add_argument('--pair', type=int, nargs=2, default=None)
    study = sub.add_parser('study', parents=[common], help="run a named study")
    study.add_argument('name', choices=['table1', 'table2', 'pairwise',
                                        'pss'])
    study.add_argument('--equal-loading', type=float, nargs=2, default=None,
                       metavar=('P_MW', 'Q_MVAR'))
    cross = sub.add_parser('cross-eval', parents=[common],
                           help="evaluate a demand pattern")
    cross.add_argument('--pattern', type=_pattern_arg, default=None,
                       help="bus=MW,... (default: classical optimum)")
    cross.add_argument('--from-fidelity', default='classical',
                       choices=[f.value for f in ModelFidelity])
    bench = sub.add_parser('benchmark', parents=[common])
    bench.add_argument('name', choices=['redispatch', 'ramp'])
    sub.add_parser('participation', parents=[common])
    return parser


def _config(args):
    config = IlpConfig()
    if args.eps is not None:
        config = config.with_eps(args.eps)
    changes = {}
    if args.threshold is not None:
        changes['threshold'] = args.threshold
    if args.max_iter is not None:
        changes['max_iter'] = args.max_iter
    if changes:
        config = replace(config, **changes)
    return config


def _emit(report, args):
    print(report.to_text())
    if args.out:
        report.write(args.out)


def _command(args):
    case = load_case(args.case)
    config = _config(args)
    fidelity = args.fidelity
    if args.command == 'pf':
        pf = solve_power_flow(case)
        buses = pd.DataFrame(dict(
            bus=[b.id for b in case.buses], kind=[b.kind for b in case.buses],
            v_pu=pf.v, theta_deg=np.degrees(pf.theta),
            p_d_mw=pf.p_d * case.base_mva, q_d_mvar=pf.q_d * case.base_mva))
        print(buses.to_string(index=False))
        print(branch_flows(case, pf).to_string(index=False))
        print("losses %.4f MW after %i iterations" % (
            total_losses(case, pf), pf.iterations))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            buses.to_csv(os.path.join(args.out, 'pf_buses.csv'), index=False,
                         float_format='%.10g')
        return 0
    if args.command == 'spectrum':
        op = nominal_operating_point(case, fidelity, config.pf_options)
        _, spec, met = spectrum_of(case, fidelity, op)
        table = mode_table(spec)
        print(table.to_string(index=False))
        print("SDR %.4f%%  alpha1 %.5f" % (met.sdr_pct, met.alpha1))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            table.to_csv(os.path.join(args.out, 'spectrum.csv'), index=False,
                         float_format='%.10g')
        return 0
    if args.command == 'optimize':
        if args.pair is not None:
            scenario = Scenario.pairwise(*args.pair)
        elif args.target is not None:
            scenario = Scenario.min_load_shedding(args.target / 100.0)
        else:
            scenario = scenario_from_name(args.scenario)
        report = _collect(StudyReport('optimize', buses=case.dr.buses),
                          [_run_task((case, fidelity, scenario, config,
                                      None))])
        _emit(report, args)
        return 0 if report.rows[0]['status'] == 'converged' else 1
    if args.command == 'study':
        if args.name == 'table1':
            report = study_table1(case, config)
        elif args.name == 'table2':
            report = study_table2(case, fidelity, config, args.jobs)
        elif args.name == 'pss':
            report = study_pss(case, config)
        else:
            result = study_pairwise(case, fidelity, args.equal_loading,
                                    config, args.jobs)
            report = result.report
            print(result.matrix.to_string(float_format=lambda v: '%.4f' % v))
            print("best pair %s: %.4f%%" % (result.best_pair,
                                            result.best_sdr))
        _emit(report, args)
        return 0
    if args.command == 'cross-eval':
        pattern = args.pattern
        if pattern is None:
            pattern = optimal_pattern(case, args.from_fidelity, config=config)
        met = cross_evaluate(case, pattern, fidelity, config=config)
        print("SDR %.4f%%  alpha1 %.5f under %s" % (met.sdr_pct, met.alpha1,
                                                   fidelity))
        return 0
    if args.command == 'benchmark':
        if args.name == 'redispatch':
            report = benchmark_redispatch(case, fidelity, config=config)
        else:
            report = benchmark_ramp(case, fidelity, config, args.jobs)
        _emit(report, args)
        return 0
    if args.command == 'participation':
        _emit(participation_table(case, fidelity, config=config), args)
        return 0
    raise ScenarioError("unknown command %r" % args.command)


def cli_main(argv=None):
    """ Entry point of the ``dampshift`` command.

    Returns 0 on success, 1 when a solver or data error stops the command
    and 2 on a usage error.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s "
                               "%(message)s")
    try:
        return _command(args)
    except DampshiftError as err:
        _log.error("%s", err)
        return 1
