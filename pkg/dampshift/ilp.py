""" Iterative linear programming over demand-response load shifting and the
comparison strategies (generation redispatch, load shedding, stabilizer
gain tuning).

Every iteration linearizes the model at the current operating point,
selects the critical modes, builds an LP in the state and input increments
whose eigenvalue rows come from the generalized eigenvalue sensitivities,
solves it and restores a new operating point with a full AC power flow.
"""
from dataclasses import dataclass, field, replace
import enum
import logging

import numpy as np
from scipy import optimize

from .dae import (InitializationError, ModelFidelity, initialize_equilibrium,
                  nominal_operating_point, parameter_jacobian)
from .netcase import DampshiftError
from .powerflow import (PowerFlowError, branch_flow, flow_gradient,
                        solve_power_flow)
from .smallsignal import (MetricConfig, ModeTrackingError, SpectrumError,
                          metrics, sensitivity_matrix, spectrum_of,
                          track_mode)
from .tracking import Tracking

_log = logging.getLogger(__name__)


class LpError(DampshiftError):
    def __init__(self, msg, status='failed'):
        self.status = status
        super(LpError, self).__init__(msg)


class ScenarioError(DampshiftError, ValueError):
    pass


class ScenarioKind(enum.Enum):
    LOAD_SHIFT_COUPLED = 'coupled'
    LOAD_SHIFT_P_ONLY = 'p-only'
    LOAD_SHIFT_Q_ONLY = 'q-only'
    LOAD_SHIFT_INDEPENDENT = 'independent'
    GEN_ONLY = 'gen-only'
    GEN_AND_LOAD = 'gen-and-load'
    MIN_LOAD_SHEDDING = 'min-load-shedding'
    PSS_GAIN_TUNE = 'pss-gain'
    PAIRWISE_SHIFT = 'pairwise'


K = ScenarioKind


@dataclass(frozen=True)
class Scenario:
    """ One optimization scenario with its payload.

    Caps are in MVar (``q_dev_cap``) and MW (``ramp_cap``), ``target_sdr`` is
    a damping ratio (fraction, not percent).
    """
    kind: ScenarioKind
    q_dev_cap: float = None
    ramp_cap: float = None
    target_sdr: float = None
    co_optimize: bool = False
    pair: tuple = None
    gain_bounds: tuple = None
    label: str = ''

    def __post_init__(self):
        for cap in (self.q_dev_cap, self.ramp_cap):
            if cap is not None and cap < 0:
                raise ScenarioError("caps must be non-negative")
        if self.kind is K.PAIRWISE_SHIFT:
            if self.pair is None or len(self.pair) != 2:
                raise ScenarioError("pairwise shifting needs two bus ids")
            if self.pair[0] == self.pair[1]:
                raise ScenarioError("pair %r repeats a bus" % (self.pair,))
        if self.kind is K.MIN_LOAD_SHEDDING and self.target_sdr is None:
            raise ScenarioError("load shedding needs a target damping ratio")

    @classmethod
    def coupled(cls):
        return cls(K.LOAD_SHIFT_COUPLED)

    @classmethod
    def p_only(cls):
        return cls(K.LOAD_SHIFT_P_ONLY)

    @classmethod
    def q_only(cls, q_dev_cap=100.0):
        return cls(K.LOAD_SHIFT_Q_ONLY, q_dev_cap=q_dev_cap)

    @classmethod
    def independent(cls, q_dev_cap=100.0):
        return cls(K.LOAD_SHIFT_INDEPENDENT, q_dev_cap=q_dev_cap)

    @classmethod
    def gen_only(cls, ramp_cap=None):
        return cls(K.GEN_ONLY, ramp_cap=ramp_cap)

    @classmethod
    def gen_and_load(cls, q_dev_cap=20.0):
        return cls(K.GEN_AND_LOAD, q_dev_cap=q_dev_cap)

    @classmethod
    def min_load_shedding(cls, target_sdr):
        return cls(K.MIN_LOAD_SHEDDING, target_sdr=target_sdr)

    @classmethod
    def pss_gain_tune(cls, co_optimize=True, gain_bounds=None):
        return cls(K.PSS_GAIN_TUNE, co_optimize=co_optimize,
                   gain_bounds=gain_bounds)

    @classmethod
    def pairwise(cls, bus_a, bus_b):
        return cls(K.PAIRWISE_SHIFT, pair=(bus_a, bus_b))

    @property
    def name(self):
        return self.label or self.kind.value

    @property
    def shifts_p(self):
        return self.kind in (K.LOAD_SHIFT_COUPLED, K.LOAD_SHIFT_P_ONLY,
                             K.LOAD_SHIFT_INDEPENDENT, K.GEN_AND_LOAD,
                             K.PAIRWISE_SHIFT, K.MIN_LOAD_SHEDDING) or \
            (self.kind is K.PSS_GAIN_TUNE and self.co_optimize)

    @property
    def conserves_p(self):
        return self.shifts_p and self.kind is not K.MIN_LOAD_SHEDDING

    @property
    def conserves_q(self):
        return self.kind is K.LOAD_SHIFT_Q_ONLY

    @property
    def coupled_q(self):
        return self.kind in (K.LOAD_SHIFT_COUPLED, K.PAIRWISE_SHIFT,
                             K.MIN_LOAD_SHEDDING) or \
            (self.kind is K.PSS_GAIN_TUNE and self.co_optimize)

    @property
    def free_q(self):
        return self.kind in (K.LOAD_SHIFT_Q_ONLY, K.LOAD_SHIFT_INDEPENDENT,
                             K.GEN_AND_LOAD)

    @property
    def moves_generation(self):
        return self.kind in (K.GEN_ONLY, K.GEN_AND_LOAD)

    @property
    def tunes_gain(self):
        return self.kind is K.PSS_GAIN_TUNE

    @property
    def monotone(self):
        return self.kind is not K.MIN_LOAD_SHEDDING

    def dr_buses(self, case):
        if self.kind is K.PAIRWISE_SHIFT:
            return tuple(self.pair)
        return case.dr.buses


# the comparison cases, keyed as in the reports
TABLE2 = {
    'case1': Scenario(K.LOAD_SHIFT_COUPLED, label='case1'),
    'case2': Scenario(K.LOAD_SHIFT_P_ONLY, label='case2'),
    'case3': Scenario(K.LOAD_SHIFT_Q_ONLY, q_dev_cap=100.0, label='case3'),
    'case4': Scenario(K.LOAD_SHIFT_INDEPENDENT, q_dev_cap=100.0,
                      label='case4'),
    'case5': Scenario(K.LOAD_SHIFT_INDEPENDENT, q_dev_cap=20.0, label='case5'),
    'case6': Scenario(K.GEN_ONLY, label='case6'),
    'case7': Scenario(K.GEN_AND_LOAD, q_dev_cap=20.0, label='case7'),
}


def scenario_from_name(name):
    """
    >>> scenario_from_name('case3').q_dev_cap
    100.0
    >>> scenario_from_name('ramp1').ramp_cap
    1.0
    """
    if name in TABLE2:
        return TABLE2[name]
    if name == 'ramp1':
        return Scenario(K.GEN_ONLY, ramp_cap=1.0, label='ramp1')
    try:
        kind = ScenarioKind(name)
    except ValueError:
        raise ScenarioError("unknown scenario %r" % name)
    if kind in (K.LOAD_SHIFT_Q_ONLY, K.LOAD_SHIFT_INDEPENDENT):
        return Scenario(kind, q_dev_cap=100.0)
    if kind is K.GEN_AND_LOAD:
        return Scenario(kind, q_dev_cap=20.0)
    if kind in (K.MIN_LOAD_SHEDDING, K.PAIRWISE_SHIFT):
        raise ScenarioError("scenario %r needs a payload" % name)
    return Scenario(kind)


@dataclass(frozen=True)
class IlpConfig:
    """ Settings of an ILP run.

    The objective is expressed with damping ratios in percentage points and
    real parts in 1/s, so ``threshold`` (the bound on the absolute LP
    objective that ends a run) is read in those units. ``eps_lower`` and
    ``eps_upper`` bound the real and imaginary eigenvalue steps in 1/s.
    ``move_penalty`` charges every per-unit of moved demand or generation in
    objective units, which makes the LP pick the smallest move among equally
    good ones. ``limit_backoff`` (per unit) keeps the linearized voltage,
    generator and flow limits that far inside the nonlinear ones.
    """
    eps_lower: float = -0.001
    eps_upper: float = 0.001
    threshold: float = 1e-4
    max_iter: int = 100
    margin: float = 0.005
    max_criticals: int = 5
    trust_fraction: float = 0.1
    max_halvings: int = 6
    band: float = 0.3
    monotone_slack: float = 1e-6
    alpha_margin: float = 0.05
    weights: dict = field(default_factory=lambda: {'sdr': 1.0})
    interarea_mode: int = None
    elastic_weight: float = 1e3
    move_penalty: float = 1e-6
    limit_backoff: float = 1e-4
    pf_options: object = None

    def __post_init__(self):
        msg = "step bounds must bracket zero"
        assert self.eps_lower <= 0 <= self.eps_upper, msg
        msg = "termination threshold must be positive"
        assert self.threshold > 0, msg
        msg = "move penalty and limit back-off must be non-negative"
        assert self.move_penalty >= 0 and self.limit_backoff >= 0, msg

    def with_eps(self, eps):
        return replace(self, eps_lower=-abs(eps), eps_upper=abs(eps))

    @property
    def metric_config(self):
        return MetricConfig(weights=dict(self.weights),
                            interarea_mode=self.interarea_mode)


@dataclass(frozen=True, eq=False)
class LpProblem:
    """ ``max c.x + offset`` s.t. ``a_ub x <= b_ub``, ``a_eq x = b_eq`` and
    box bounds. ``index`` maps variable groups to column positions;
    ``penalty`` is the objective charge per unit of the movement columns
    ``index['w']``.
    """
    c: np.ndarray
    a_ub: np.ndarray
    b_ub: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    bounds: list
    index: dict = field(default_factory=dict)
    offset: float = 0.0
    modes: tuple = ()
    maximize: bool = True
    penalty: float = 0.0

    @property
    def n_var(self):
        return len(self.c)

    def gain(self, x):
        """ Objective at ``x`` without the movement penalty. """
        total = float(np.dot(self.c, x)) + self.offset
        if 'w' in self.index:
            total += self.penalty * float(np.sum(x[self.index['w']]))
        return total


@dataclass(frozen=True, eq=False)
class LpResult:
    x: np.ndarray
    objective: float
    status: str
    message: str = ''


@dataclass(frozen=True, eq=False)
class LpStep:
    """ Input increments of one accepted or candidate LP solution, per unit.
    """
    dp_d: np.ndarray
    dq_d: np.ndarray
    dp_sched: np.ndarray
    dk_w: np.ndarray
    objective: float = 0.0
    bounds_active: bool = False
    slack: float = 0.0

    @classmethod
    def zero(cls, case, layout):
        return cls(dp_d=np.zeros(case.n_bus), dq_d=np.zeros(case.n_bus),
                   dp_sched=np.zeros(len(case.machines)),
                   dk_w=np.zeros(layout.n_pss))


def lp_solve(p):
    """ Solve an `LpProblem` with the HiGHS solver.

    >>> prob = LpProblem(c=np.array([1.0]), a_ub=np.array([[1.0]]),
    ...                  b_ub=np.array([3.0]), a_eq=np.zeros((0, 1)),
    ...                  b_eq=np.zeros(0), bounds=[(0, None)])
    >>> float(round(lp_solve(prob).objective, 9))
    3.0
    """
    for lo, hi in p.bounds:
        if lo is not None and hi is not None and lo > hi:
            raise LpError("contradictory variable bounds", status='infeasible')
    if p.a_eq.shape[0]:
        rank = np.linalg.matrix_rank(p.a_eq)
        if rank < p.a_eq.shape[0]:
            _log.warning("equality block has rank %i of %i rows", rank,
                         p.a_eq.shape[0])
    sign = -1.0 if p.maximize else 1.0
    kw = dict(c=sign * p.c, bounds=p.bounds, method='highs',
              options=dict(primal_feasibility_tolerance=1e-9,
                           dual_feasibility_tolerance=1e-9))
    if p.a_ub.shape[0]:
        kw.update(A_ub=p.a_ub, b_ub=p.b_ub)
    if p.a_eq.shape[0]:
        kw.update(A_eq=p.a_eq, b_eq=p.b_eq)
    _log.debug("LP with %i variables, %i equalities, %i inequalities",
               p.n_var, p.a_eq.shape[0], p.a_ub.shape[0])
    res = optimize.linprog(**kw)
    if res.status == 2:
        raise LpError("LP is infeasible: %s" % res.message,
                      status='infeasible')
    if res.status == 3:
        raise LpError("LP is unbounded: %s" % res.message, status='unbounded')
    if res.status != 0:
        raise LpError("LP solver failed: %s" % res.message, status='failed')
    objective = sign * res.fun + p.offset
    return LpResult(x=res.x, objective=objective, status='optimal',
                    message=res.message)


def select_criticals(spec, config=None):
    """ Conjugate representatives whose damping ratio lies within the margin
    of the smallest one, least damped first, at most ``max_criticals``.
    """
    config = config or IlpConfig()
    reps = spec.representatives()
    damping = spec.damping[reps]
    sdr = damping.min()
    chosen = reps[damping <= sdr + config.margin]
    chosen = chosen[np.argsort(spec.damping[chosen], kind='stable')]
    return [int(m) for m in chosen[:config.max_criticals]]


def _alpha_criticals(spec, config):
    if 'alpha1' not in config.weights:
        return []
    reps = spec.representatives()
    real = spec.real[reps]
    chosen = reps[real >= real.max() - config.alpha_margin]
    chosen = chosen[np.argsort(-spec.real[chosen], kind='stable')]
    return [int(m) for m in chosen[:config.max_criticals]]


def lp_modes(spec, criticals, config, interarea_mode=None):
    """ Every mode that needs sensitivity rows: the damping-ratio critical
    set, the modes near the largest real part and the inter-area mode.
    """
    modes = list(criticals)
    for m in _alpha_criticals(spec, config):
        if m not in modes:
            modes.append(m)
    if interarea_mode is not None and interarea_mode not in modes:
        modes.append(int(interarea_mode))
    return modes


def sensitivity_targets(layout):
    names = list(layout.z_names)
    names += [n for n in layout.p_names if n.startswith('k_w_')]
    return names


def power_factor_ratio(case, op, buses):
    """ ``p_d/q_d`` of each listed bus at ``op`` unless the case overrides it.
    """
    override = {r.bus: r.mu for r in case.dr.records}
    out = []
    for bus in buses:
        i = case.bus_position[bus]
        if override.get(bus) is not None:
            out.append(override[bus])
        elif op.q_d[i] != 0:
            out.append(op.p_d[i] / op.q_d[i])
        else:
            out.append(np.nan)
    return np.array(out)


def _box(lo, hi, cap=None, what=None, backoff=0.0):
    """ Increment box from the distances ``lo``/``hi`` of the current value
    to its limits. A value already outside its limits is reported and may
    only move back toward them.
    """
    if lo > 1e-9 or hi < -1e-9:
        _log.warning("%s violates its limits by %.4g pu", what or "a variable",
                     max(lo, -hi))
    lo, hi = lo + backoff, hi - backoff
    if cap is not None:
        lo, hi = max(lo, -cap), min(hi, cap)
    return min(lo, 0.0), max(hi, 0.0)


def _check_scenario(case, layout, scenario):
    if scenario.shifts_p or scenario.free_q:
        if not scenario.dr_buses(case):
            raise ScenarioError("scenario %s needs demand-responsive buses"
                                % scenario.name)
        for bus in scenario.dr_buses(case):
            if bus not in case.bus_position:
                raise ScenarioError("bus %i is not in the case" % bus)
    if scenario.tunes_gain and layout.n_pss == 0:
        raise ScenarioError("gain tuning needs a stabilizer in the model")


def build_lp(lin, spec, criticals, op, scenario, config=None, scale=1.0,
             sens=None, mu=None, interarea_mode=None):
    """ Assemble the LP of one iteration.

    Columns are ordered as ``dz = (dx, dy)``, the parameter increments of
    `DaeLayout.p_names`, then per mode ``(d_alpha, d_beta, d_eta)`` and
    the scalars ``t`` (smallest damping ratio gain), ``u`` (largest real
    part gain) and ``s`` (elastic slack of the shedding target), and finally
    one movement column ``w >= |increment|`` per moved demand or PV schedule
    entry.

    Parameters
    ----------
    lin, spec : LinearizedSystem, Spectrum at ``op``
    criticals : list of int
        Damping-ratio critical modes.
    scenario : Scenario
    config : IlpConfig
    scale : float
        Trust-region scale; step bounds and per-bus caps are multiplied by it.
    sens : pandas.DataFrame, optional
        Precomputed sensitivities indexed by mode.
    mu : float array, optional
        Power-factor ratio of the scenario buses.

    Returns
    -------
    problem : LpProblem
    """
    config = config or IlpConfig()
    case, lay = lin.case, lin.layout
    _check_scenario(case, lay, scenario)
    criticals = list(criticals)
    if not criticals:
        raise ScenarioError("critical set is empty")
    modes = lp_modes(spec, criticals, config, interarea_mode)
    if sens is None or not set(modes) <= set(sens.index):
        sens = sensitivity_matrix(lin, spec, modes, sensitivity_targets(lay))
    sens = sens.loc[modes].to_numpy()
    base = case.base_mva
    buses = scenario.dr_buses(case)
    if mu is None:
        mu = power_factor_ratio(case, op, buses)

    n_z, n_p, n_m = lay.n_z, lay.n_p, len(modes)
    off_p = n_z
    off_a = off_p + n_p
    off_b = off_a + n_m
    off_e = off_b + n_m
    i_t, i_u, i_s = off_e + n_m, off_e + n_m + 1, off_e + n_m + 2

    def col_y(idx):
        return lay.n_x + idx

    def col_p(idx):
        return off_p + idx

    pos = np.array([case.bus_position[b] for b in buses], dtype=int)
    moved = []
    if config.move_penalty > 0 and scenario.monotone:
        if scenario.shifts_p:
            moved += [col_p(lay.par_p_d[i]) for i in pos]
        if scenario.free_q:
            moved += [col_p(lay.par_q_d[i]) for i in pos]
        if scenario.moves_generation:
            moved += [col_y(lay.p_g[k]) for k in range(lay.n_gen)
                      if lay.gen_bus[k] != lay.slack]
    i_w = i_s + 1
    n = i_w + len(moved)

    bounds = [(None, None)] * n

    # linearized equilibrium
    fp, gp = parameter_jacobian(case, lin.fidelity, op, lay)
    eq_rows = [np.hstack([lin.A, np.vstack([fp, gp]),
                          np.zeros((n_z, n - off_a))])]
    eq_rhs = [np.zeros(n_z)]

    # eigenvalue rows
    lam = spec.eigenvalues[modes]
    n_kw = lay.n_pss
    for j, m in enumerate(modes):
        for part, off in ((np.real, off_a), (np.imag, off_b)):
            row = np.zeros(n)
            row[off + j] = 1.0
            row[:n_z] = -part(sens[j, :n_z])
            if n_kw:
                row[col_p(lay.par_k_w)] = -part(sens[j, n_z:n_z + n_kw])
            eq_rows.append(row[None, :])
            eq_rhs.append(np.zeros(1))
        a, b = lam[j].real, lam[j].imag
        mag3 = abs(lam[j]) ** 3
        row = np.zeros(n)
        row[off_e + j] = 1.0
        row[off_a + j] = 100.0 * b * b / mag3
        row[off_b + j] = -100.0 * a * b / mag3
        eq_rows.append(row[None, :])
        eq_rhs.append(np.zeros(1))

    # demand
    rec = {r.bus: r for r in case.dr.records}
    cap = config.trust_fraction * case.total_load_mw / base * scale
    for k, (bus, i) in enumerate(zip(buses, pos)):
        bus_rec = case.buses[i]
        p_cur, q_cur = op.p_d[i], op.q_d[i]
        dr = rec.get(bus)
        if scenario.kind is K.PAIRWISE_SHIFT:
            pair_pos = [case.bus_position[x] for x in scenario.pair]
            p_lo, p_hi = 0.0, op.p_d[pair_pos].sum()
        elif dr is None:
            p_lo, p_hi = p_cur, p_cur
        else:
            p_lo, p_hi = dr.p_min / base, dr.p_max / base
        if scenario.kind is K.MIN_LOAD_SHEDDING:
            p_hi = min(p_hi, bus_rec.p_d0 / base)
        if scenario.shifts_p:
            bounds[col_p(lay.par_p_d[i])] = _box(
                p_lo - p_cur, p_hi - p_cur, cap, "demand at bus %i" % bus)
        else:
            bounds[col_p(lay.par_p_d[i])] = (0.0, 0.0)

        if scenario.free_q:
            q_lo = (bus_rec.q_d0 - scenario.q_dev_cap) / base
            q_hi = (bus_rec.q_d0 + scenario.q_dev_cap) / base
            bounds[col_p(lay.par_q_d[i])] = _box(
                q_lo - q_cur, q_hi - q_cur, cap,
                "reactive demand at bus %i" % bus)
        elif scenario.coupled_q and np.isfinite(mu[k]):
            if dr is not None and scenario.kind is not K.PAIRWISE_SHIFT:
                q_box = _box(dr.q_min / base - q_cur, dr.q_max / base - q_cur,
                             what="reactive demand at bus %i" % bus)
            else:
                q_box = (None, None)
            bounds[col_p(lay.par_q_d[i])] = q_box
            row = np.zeros(n)
            row[col_p(lay.par_p_d[i])] = 1.0
            row[col_p(lay.par_q_d[i])] = -mu[k]
            eq_rows.append(row[None, :])
            eq_rhs.append(np.zeros(1))
        else:
            bounds[col_p(lay.par_q_d[i])] = (0.0, 0.0)
    for i in range(case.n_bus):
        if i not in pos:
            bounds[col_p(lay.par_p_d[i])] = (0.0, 0.0)
            bounds[col_p(lay.par_q_d[i])] = (0.0, 0.0)
    if scenario.conserves_p:
        row = np.zeros(n)
        row[col_p(lay.par_p_d[pos])] = 1.0
        eq_rows.append(row[None, :])
        eq_rhs.append(np.zeros(1))
    if scenario.conserves_q:
        row = np.zeros(n)
        row[col_p(lay.par_q_d[pos])] = 1.0
        eq_rows.append(row[None, :])
        eq_rhs.append(np.zeros(1))

    # network and machine limits, cumulative against the case data
    backoff = config.limit_backoff
    for i, bus in enumerate(case.buses):
        v = op.y[lay.v[i]]
        if bus.kind == 'pq':
            bounds[col_y(lay.v[i])] = _box(
                bus.v_min - v, bus.v_max - v,
                what="voltage at bus %i" % bus.id, backoff=backoff)
    for k, m in enumerate(case.machines):
        b = lay.gen_bus[k]
        bounds[col_y(lay.v[b])] = (0.0, 0.0)
        p_g, q_g = op.y[lay.p_g[k]], op.y[lay.q_g[k]]
        bounds[col_y(lay.q_g[k])] = _box(
            m.q_min / base - q_g, m.q_max / base - q_g,
            what="reactive output at bus %i" % m.bus, backoff=backoff)
        if b == lay.slack:
            bounds[col_y(lay.p_g[k])] = _box(
                m.p_min / base - p_g, m.p_max / base - p_g,
                what="real output at bus %i" % m.bus, backoff=backoff)
        elif scenario.moves_generation:
            lo, hi = m.p_min, m.p_max
            if scenario.ramp_cap is not None:
                lo = max(lo, m.p_g0 - scenario.ramp_cap)
                hi = min(hi, m.p_g0 + scenario.ramp_cap)
            bounds[col_y(lay.p_g[k])] = _box(
                lo / base - p_g, hi / base - p_g, cap,
                "real output at bus %i" % m.bus)
        else:
            bounds[col_y(lay.p_g[k])] = (0.0, 0.0)
        if lay.gen_avr[k] >= 0:
            bounds[col_p(lay.par_v_f0[k])] = (0.0, 0.0)
    if not lay.infinite_bus:
        bounds[col_y(lay.theta[lay.slack])] = (0.0, 0.0)
    for s, pss in enumerate(lay.psss):
        col = col_p(lay.par_k_w[s])
        if scenario.tunes_gain and scenario.co_optimize:
            lo, hi = _gain_bounds(pss, scenario)
            k_w = op.params.k_w[s]
            bounds[col] = _box(lo - k_w, hi - k_w,
                               what="stabilizer gain at bus %i" % pss.bus)
        else:
            bounds[col] = (0.0, 0.0)

    # eigenvalue steps
    step = (config.eps_lower * scale, config.eps_upper * scale)
    for j in range(n_m):
        bounds[off_a + j] = step
        bounds[off_b + j] = step

    # inequalities
    ub_rows, ub_rhs = [], []
    damping = spec.damping
    sdr = damping[criticals].min()
    c = np.zeros(n)
    offset = 0.0
    if scenario.kind is K.MIN_LOAD_SHEDDING:
        target = 100.0 * scenario.target_sdr
        for j, m in enumerate(criticals):
            row = np.zeros(n)
            row[off_e + j] = -1.0
            row[i_s] = -1.0
            ub_rows.append(row)
            ub_rhs.append(100.0 * damping[m] - target)
        bounds[i_s] = (0.0, None)
        bounds[i_t] = (0.0, 0.0)
        bounds[i_u] = (0.0, 0.0)
        c[col_p(lay.par_p_d[pos])] = 1.0
        c[i_s] = -config.elastic_weight
        offset = config.elastic_weight * max(0.0, target - 100.0 * sdr)
    else:
        weights = config.weights
        bounds[i_s] = (0.0, 0.0)
        if weights.get('sdr'):
            for j, m in enumerate(criticals):
                row = np.zeros(n)
                row[i_t] = 1.0
                row[off_e + j] = -1.0
                ub_rows.append(row)
                ub_rhs.append(100.0 * (damping[m] - sdr))
            c[i_t] = weights['sdr']
        else:
            bounds[i_t] = (0.0, 0.0)
        if weights.get('alpha1'):
            alpha1 = -spec.real[~spec.degenerate].max()
            for m in _alpha_criticals(spec, config):
                j = modes.index(m)
                row = np.zeros(n)
                row[i_u] = 1.0
                row[off_a + j] = 1.0
                ub_rows.append(row)
                ub_rhs.append(-spec.real[m] - alpha1)
            c[i_u] = weights['alpha1']
        else:
            bounds[i_u] = (0.0, 0.0)
        if weights.get('interarea'):
            if interarea_mode is None:
                raise ScenarioError("inter-area weight needs a designated mode")
            c[off_e + modes.index(interarea_mode)] = weights['interarea']

    for br_pos, br in enumerate(case.branches):
        if br.rate <= 0:
            continue
        for direction in (1, -1):
            (i, j), grad = flow_gradient(case, op.pf, br_pos, direction)
            flow = branch_flow(case, op.pf, br_pos, direction) / base
            row = np.zeros(n)
            cols = np.array([lay.v[i], lay.v[j], lay.theta[i], lay.theta[j]])
            row[col_y(cols)] = grad
            ub_rows.append(row)
            ub_rhs.append(max(br.rate / base - flow - backoff, 0.0))

    # movement penalty, w >= |increment|
    for r, col in enumerate(moved):
        for sign in (1.0, -1.0):
            row = np.zeros(n)
            row[col] = sign
            row[i_w + r] = -1.0
            ub_rows.append(row)
            ub_rhs.append(0.0)
        bounds[i_w + r] = (0.0, None)
        c[i_w + r] = -config.move_penalty

    index = dict(z=slice(0, n_z), p=slice(off_p, off_a),
                 alpha=slice(off_a, off_b), beta=slice(off_b, off_e),
                 eta=slice(off_e, i_t), t=i_t, u=i_u, s=i_s,
                 w=slice(i_w, n), step=step)
    a_ub = np.array(ub_rows) if ub_rows else np.zeros((0, n))
    return LpProblem(c=c, a_ub=a_ub, b_ub=np.array(ub_rhs, dtype=float),
                     a_eq=np.vstack(eq_rows), b_eq=np.concatenate(eq_rhs),
                     bounds=bounds, index=index, offset=offset,
                     modes=tuple(modes), penalty=config.move_penalty)


def _gain_bounds(pss, scenario=None):
    if scenario is not None and scenario.gain_bounds is not None:
        return tuple(scenario.gain_bounds)
    lo = pss.k_min if pss.k_min is not None else 0.0
    hi = pss.k_max if pss.k_max is not None else 10.0 * pss.k_w
    return lo, hi


def extract_step(problem, result, layout):
    """ Input increments of an LP solution. """
    x = result.x
    dp = x[problem.index['p']]
    dy = x[problem.index['z']][layout.n_x:]
    case = layout.case
    dp_sched = np.zeros(layout.n_gen)
    for k in range(layout.n_gen):
        if layout.gen_bus[k] != layout.slack:
            dp_sched[k] = dy[layout.p_g[k]]
    lo, hi = problem.index['step']
    moves = np.r_[x[problem.index['alpha']], x[problem.index['beta']]]
    active = False
    for lim in (lo, hi):
        if lim != 0:
            active |= bool(np.any(np.abs(moves - lim) <= 1e-6 * abs(lim)))
    msg = "step must have one entry per bus"
    assert len(dp[layout.par_p_d]) == case.n_bus, msg
    return LpStep(dp_d=dp[layout.par_p_d], dq_d=dp[layout.par_q_d],
                  dp_sched=dp_sched, dk_w=dp[layout.par_k_w],
                  objective=problem.gain(x), bounds_active=active,
                  slack=float(x[problem.index['s']]))


def _spread(values, delta, target):
    """ Move ``values`` so that they sum to ``target``, in proportion to the
    size of ``delta``.
    """
    residual = target - values.sum()
    weights = np.abs(delta)
    if weights.sum() == 0:
        weights = np.ones(len(values))
    return values + residual * weights / weights.sum()


def restore(case, fidelity, op, step, scenario=None, mu=None, options=None):
    """ Apply LP increments and recompute the operating point with an AC
    power flow warm-started from ``op``.

    Load-shift totals are re-imposed exactly, and reactive demand follows
    the power-factor ratio when the scenario couples it.

    The mechanical torques, field voltages and voltage references are
    solved again from the new power flow rather than carried over from
    ``op``. The power flow fixes every machine's real output and terminal
    voltage, so at the restored equilibrium each torque equals the new
    electrical torque and each exciter setpoint holds the new voltage; the
    LP columns of these setpoints are tied to the flow by the linearized
    equilibrium in the same way.
    """
    fidelity = ModelFidelity.parse(fidelity)
    p_d = op.p_d + step.dp_d
    q_d = op.q_d + step.dq_d
    if scenario is not None:
        buses = scenario.dr_buses(case)
        pos = np.array([case.bus_position[b] for b in buses], dtype=int)
        if len(pos) and scenario.conserves_p:
            p_d[pos] = _spread(p_d[pos], step.dp_d[pos], op.p_d[pos].sum())
        if len(pos) and scenario.conserves_q:
            q_d[pos] = _spread(q_d[pos], step.dq_d[pos], op.q_d[pos].sum())
        if len(pos) and scenario.coupled_q:
            if mu is None:
                mu = power_factor_ratio(case, op, buses)
            ok = np.isfinite(mu)
            q_d[pos[ok]] = p_d[pos[ok]] / mu[ok]
    generation = op.pf.p_sched + step.dp_sched
    k_w = op.params.k_w + step.dk_w
    pf = solve_power_flow(case, demand=(p_d, q_d), generation=generation,
                          initial=op.pf, options=options)
    return initialize_equilibrium(case, fidelity, pf, k_w=k_w,
                                  layout=op.layout)


@dataclass(frozen=True, eq=False)
class IterationRecord:
    iteration: int
    op: object
    sdr: float
    alpha1: float
    objective: float
    criticals: tuple
    scale: float
    predicted: float = np.nan
    realized: float = np.nan
    band_checked: bool = False


class IlpTrace(Tracking):
    def __init__(self, scenario, n=5000):
        """ Per-iteration history of an ILP run.

        Iteration 0 is the starting point; every later record is an
        accepted step. Scalar series (``sdr_pct``, ``alpha1``, ``objective``,
        ``scale``, ``dr_mw``) are also kept in the tracking cache.
        """
        super(IlpTrace, self).__init__(n=n)
        self.scenario = scenario
        self.records = []
        self.status = None

    def record(self, iteration, op, met, objective=None, criticals=(),
               scale=1.0, dr_mw=np.nan, predicted=np.nan, realized=np.nan,
               band_checked=False):
        objective = np.nan if objective is None else objective
        self.records.append(IterationRecord(
            iteration=iteration, op=op, sdr=met.sdr, alpha1=met.alpha1,
            objective=objective, criticals=tuple(criticals), scale=scale,
            predicted=predicted, realized=realized,
            band_checked=band_checked))
        self.add('sdr_pct', 100.0 * met.sdr)
        self.add('alpha1', met.alpha1)
        self.add('objective', objective)
        self.add('scale', scale)
        self.add('dr_mw', dr_mw)

    @property
    def final(self):
        return self.records[-1]

    @property
    def iterations(self):
        return len(self.records) - 1

    @property
    def sdr_history(self):
        return np.array([r.sdr for r in self.records])

    def table(self):
        frame = self.frame(['sdr_pct', 'alpha1', 'objective', 'scale',
                            'dr_mw'])
        frame.insert(0, 'iteration', [r.iteration for r in self.records])
        return frame


def _merit(met, weights):
    total = 0.0
    for key, gamma in weights.items():
        if key == 'alpha1':
            total += gamma * met.alpha1
        else:
            total += gamma * 100.0 * getattr(met, key)
    return total


def _shedding_merit(case, op, met, scenario, config):
    pos = case.dr_positions()
    target = 100.0 * scenario.target_sdr
    violation = max(0.0, target - 100.0 * met.sdr)
    return op.p_d[pos].sum() - config.elastic_weight * violation


def total_dr_mw(case, op, buses=None):
    buses = case.dr.buses if buses is None else buses
    pos = [case.bus_position[b] for b in buses]
    return float(op.p_d[pos].sum() * case.base_mva)


def run_ilp(case, fidelity, scenario, config=None, op=None):
    """ Iterate linearize, LP and restoration until the LP objective drops
    below the threshold.

    Parameters
    ----------
    case : SystemCase
    fidelity : ModelFidelity or str
    scenario : Scenario
    config : IlpConfig, optional
    op : OperatingPoint, optional
        Starting point; the nominal equilibrium by default.

    Returns
    -------
    op : OperatingPoint
        Last accepted point.
    trace : IlpTrace
        ``trace.status`` is one of ``converged``, ``max_iter``,
        ``lp_infeasible``, ``pf_diverged`` or ``stalled``.
    """
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity)
    if op is None:
        op = nominal_operating_point(case, fidelity, config.pf_options)
    _check_scenario(case, op.layout, scenario)
    buses = scenario.dr_buses(case)
    mu = power_factor_ratio(case, op, buses)
    trace = IlpTrace(scenario)
    mconf = config.metric_config
    ia_mode = config.interarea_mode

    lin, spec, _ = spectrum_of(case, fidelity, op)
    met = metrics(spec, mconf, ia_mode)
    trace.record(0, op, met, dr_mw=total_dr_mw(case, op, buses))
    _log.info("%s: starting SDR %.4f%%", scenario.name, met.sdr_pct)
    violations = check_feasibility(case, op, scenario)
    guard = not violations
    if violations:
        _log.warning("%s: starting point violates %s; later points are not "
                     "checked against the limits", scenario.name,
                     ", ".join(violations))

    status = 'max_iter'
    for it in range(1, config.max_iter + 1):
        criticals = select_criticals(spec, config)
        modes = lp_modes(spec, criticals, config, ia_mode)
        sens = sensitivity_matrix(lin, spec, modes, sensitivity_targets(
            op.layout))
        scale = 1.0
        accepted = None
        failure = None
        for halving in range(config.max_halvings + 1):
            try:
                problem = build_lp(lin, spec, criticals, op, scenario, config,
                                   scale=scale, sens=sens, mu=mu,
                                   interarea_mode=ia_mode)
                result = lp_solve(problem)
            except LpError as err:
                _log.warning("%s: LP failed at iteration %i: %s",
                             scenario.name, it, err)
                failure = 'lp_infeasible'
                break
            predicted = problem.gain(result.x)
            if abs(predicted) < config.threshold:
                failure = 'converged'
                break
            step = extract_step(problem, result, op.layout)
            try:
                new_op = restore(case, fidelity, op, step, scenario, mu,
                                 config.pf_options)
                new_lin, new_spec, _ = spectrum_of(case, fidelity, new_op)
                new_ia = ia_mode
                if ia_mode is not None:
                    new_ia, _ = track_mode(spec, ia_mode, new_spec)
                new_met = metrics(new_spec, mconf, new_ia)
            except (PowerFlowError, InitializationError, SpectrumError,
                    ModeTrackingError) as err:
                _log.debug("restoration failed at scale %.4g: %s", scale, err)
                failure = 'pf_diverged'
                scale /= 2.0
                continue
            if scenario.monotone:
                realized = _merit(new_met, config.weights) - \
                    _merit(met, config.weights)
                ok = new_met.sdr - met.sdr >= -config.monotone_slack \
                    if config.weights.get('sdr') else \
                    realized >= -100.0 * config.monotone_slack
            else:
                realized = _shedding_merit(case, new_op, new_met, scenario,
                                           config) - \
                    _shedding_merit(case, op, met, scenario, config)
                ok = True
            if ok and step.bounds_active:
                ok = abs(predicted - realized) <= config.band * abs(predicted)
            if ok and guard:
                broken = check_feasibility(case, new_op, scenario)
                if broken:
                    _log.debug("step at scale %.4g breaks %s", scale,
                               ", ".join(broken))
                    ok = False
            if ok:
                accepted = (new_op, new_lin, new_spec, new_met, new_ia,
                            predicted, realized, step.bounds_active)
                break
            _log.debug("step rejected at scale %.4g: predicted %.3e, "
                       "realized %.3e", scale, predicted, realized)
            failure = 'stalled'
            scale /= 2.0
        if accepted is None:
            status = failure
            break
        op, lin, spec, met, ia_mode, predicted, realized, checked = accepted
        trace.record(it, op, met, objective=predicted, criticals=criticals,
                     scale=scale, dr_mw=total_dr_mw(case, op, buses),
                     predicted=predicted, realized=realized,
                     band_checked=checked)
        _log.info("%s: iteration %i objective %.3e SDR %.4f%%", scenario.name,
                  it, predicted, met.sdr_pct)
    trace.status = status
    if status != 'converged':
        _log.warning("%s: stopped with status %s", scenario.name, status)
    return op, trace


def min_load_shedding(case, fidelity, target_sdr, config=None, op=None):
    """ Smallest demand reduction that lifts the smallest damping ratio to
    ``target_sdr`` (a fraction).

    Returns
    -------
    op : OperatingPoint
    shed_mw : float
    """
    scenario = Scenario.min_load_shedding(target_sdr)
    config = config or IlpConfig()
    fidelity = ModelFidelity.parse(fidelity)
    if op is None:
        op = nominal_operating_point(case, fidelity, config.pf_options)
    start_mw = total_dr_mw(case, op)
    final, trace = run_ilp(case, fidelity, scenario, config, op)
    reached = trace.final.sdr >= target_sdr - 1e-7
    if trace.status == 'lp_infeasible' or not reached:
        msg = "target SDR %.4f%% is not reachable (status %s, SDR %.4f%%)" % (
            100 * target_sdr, trace.status, 100 * trace.final.sdr)
        raise LpError(msg, status='infeasible')
    return final, start_mw - total_dr_mw(case, final)


def apply_pattern(case, fidelity, pattern, coupled=True, k_w=None, op=None,
                  options=None, q_pattern=None):
    """ Operating point for a fixed demand pattern.

    Parameters
    ----------
    pattern : dict
        Bus id mapped to real demand in MW; unlisted buses keep their nominal
        demand.
    coupled : bool
        Move reactive demand with the nominal power-factor ratio.
    q_pattern : dict, optional
        Explicit reactive demand in MVar; takes precedence over coupling.
    """
    fidelity = ModelFidelity.parse(fidelity)
    p_d, q_d = case.nominal_demand()
    q_pattern = q_pattern or {}
    for bus in set(pattern) | set(q_pattern):
        if bus not in case.bus_position:
            raise ScenarioError("bus %i is not in the case" % bus)
    for bus, mw in pattern.items():
        i = case.bus_position[bus]
        rec = case.buses[i]
        p_d[i] = mw / case.base_mva
        if coupled and rec.p_d0 != 0:
            q_d[i] = rec.q_d0 * mw / rec.p_d0 / case.base_mva
    for bus, mvar in q_pattern.items():
        q_d[case.bus_position[bus]] = mvar / case.base_mva
    initial = op.pf if op is not None else None
    pf = solve_power_flow(case, demand=(p_d, q_d), initial=initial,
                          options=options)
    return initialize_equilibrium(case, fidelity, pf, k_w=k_w)


def _sdr_with_gain(case, fidelity, op, s, k):
    gains = op.params.k_w.copy()
    gains[s] = k
    try:
        _, _, met = spectrum_of(case, fidelity, op.with_gains(gains))
    except SpectrumError:
        return 0.0
    return met.sdr


def tune_pss_gain(case, fidelity='avr-pss', op=None, co_optimize=False,
                  gain_bounds=None, config=None, bus=None):
    """ Best stabilizer gain, alone or jointly with coupled load shifting.

    Without co-optimization the equilibrium is fixed and the gain of one
    stabilizer is found by a bounded scalar search; otherwise the gain
    becomes an LP column of a load-shift ILP run.

    Returns
    -------
    k_w : float
    sdr : float
    op : OperatingPoint
    """
    fidelity = ModelFidelity.parse(fidelity)
    if not fidelity.has_pss or not case.psss:
        raise ScenarioError("gain tuning needs a stabilizer in the model")
    config = config or IlpConfig()
    if op is None:
        op = nominal_operating_point(case, fidelity, config.pf_options)
    s = 0
    if bus is not None:
        s = [p.bus for p in case.psss].index(bus)
    bounds = gain_bounds or _gain_bounds(case.psss[s])
    if co_optimize:
        scenario = Scenario.pss_gain_tune(True, tuple(bounds))
        final, trace = run_ilp(case, fidelity, scenario, config, op)
        return float(final.params.k_w[s]), trace.final.sdr, final
    res = optimize.minimize_scalar(
        lambda k: -_sdr_with_gain(case, fidelity, op, s, k),
        bounds=tuple(bounds), method='bounded', options=dict(xatol=1e-4))
    gains = op.params.k_w.copy()
    gains[s] = res.x
    tuned = op.with_gains(gains)
    _log.info("tuned gain %.4f gives SDR %.4f%%", res.x, -100 * res.fun)
    return float(res.x), float(-res.fun), tuned


def check_feasibility(case, op, scenario=None, tol=1e-6):
    """ Nonlinear limit checks at an operating point.

    Returns
    -------
    violations : list of str
        Empty when every voltage, generator, branch and demand limit holds
        within ``tol`` per unit.
    """
    base = case.base_mva
    lay = op.layout
    out = []
    for i, bus in enumerate(case.buses):
        v = op.pf.v[i]
        if bus.kind == 'pq' and not (bus.v_min - tol <= v <= bus.v_max + tol):
            out.append("voltage %.5f at bus %i" % (v, bus.id))
    for k, m in enumerate(case.machines):
        q = op.y[lay.q_g[k]]
        if not (m.q_min / base - tol <= q <= m.q_max / base + tol):
            out.append("reactive output %.2f MVar at bus %i" % (q * base,
                                                                 m.bus))
        p = op.y[lay.p_g[k]]
        if not (m.p_min / base - tol <= p <= m.p_max / base + tol):
            out.append("real output %.2f MW at bus %i" % (p * base, m.bus))
    for k, br in enumerate(case.branches):
        if br.rate <= 0:
            continue
        for direction in (1, -1):
            flow = branch_flow(case, op.pf, k, direction)
            if flow / base > br.rate / base + tol:
                out.append("flow %.2f MW on branch %i-%i" % (
                    flow, br.from_bus, br.to_bus))
    if scenario is not None and scenario.kind is not K.PAIRWISE_SHIFT:
        for rec in case.dr.records:
            i = case.bus_position[rec.bus]
            p, q = op.p_d[i] * base, op.q_d[i] * base
            if not (rec.p_min - tol * base <= p <= rec.p_max + tol * base):
                out.append("demand %.2f MW at bus %i" % (p, rec.bus))
            if scenario.free_q:
                q0 = case.buses[i].q_d0
                q_lo, q_hi = q0 - scenario.q_dev_cap, q0 + scenario.q_dev_cap
            else:
                q_lo, q_hi = rec.q_min, rec.q_max
            if not (q_lo - tol * base <= q <= q_hi + tol * base):
                out.append("reactive demand %.2f MVar at bus %i" % (q,
                                                                    rec.bus))
    return out
