""" Newton-Raphson solution of the AC power-flow equations and branch-flow
evaluation.

Bus injections are written as

    p_g,i - p_d,i = V_i sum_j V_j (G_ij cos(th_ij) + B_ij sin(th_ij))
    q_g,i - q_d,i = V_i sum_j V_j (G_ij sin(th_ij) - B_ij cos(th_ij))

with the slack angle held at zero and the voltage magnitudes of slack and PV
buses held at their setpoints. Reactive limits of PV machines are not
enforced here; they are constraints of the optimizer.
"""
from dataclasses import dataclass
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from .netcase import DampshiftError, admittance

_log = logging.getLogger(__name__)


class PowerFlowError(DampshiftError):
    def __init__(self, msg, iterations=None, mismatch=None):
        self.iterations = iterations
        self.mismatch = mismatch
        super(PowerFlowError, self).__init__(msg)


class BranchIndexError(DampshiftError, IndexError):
    pass


@dataclass(frozen=True)
class PowerFlowOptions:
    tolerance: float = 1e-8
    max_iter: int = 30


@dataclass(frozen=True, eq=False)
class PowerFlowState:
    """ Converged power flow.

    ``v``/``theta`` are per bus, ``p_g``/``q_g`` per machine (per unit).
    ``s_bus`` holds the complex net injection of every bus, ``p_d``/``q_d``
    and ``p_sched`` the demand and PV schedule that produced the state.
    """
    v: np.ndarray
    theta: np.ndarray
    p_g: np.ndarray
    q_g: np.ndarray
    s_bus: np.ndarray
    p_d: np.ndarray
    q_d: np.ndarray
    p_sched: np.ndarray
    iterations: int
    mismatch: float


def dsbus_dv(ybus, vc):
    """ Partial derivatives of the complex bus injections with respect to
    voltage magnitude and angle (polar coordinates).

    Returns
    -------
    ds_dvm, ds_dva : complex arrays of shape (n_bus, n_bus)
    """
    ibus = ybus.dot(vc)
    vnorm = vc / np.abs(vc)
    ds_dvm = (vc[:, None] * np.conj(ybus * vnorm[None, :])
              + np.diag(np.conj(ibus) * vnorm))
    ds_dva = 1j * vc[:, None] * np.conj(np.diag(ibus) - ybus * vc[None, :])
    return ds_dvm, ds_dva


def _bus_sets(case):
    kinds = np.array([b.kind for b in case.buses])
    slack = np.flatnonzero(kinds == 'slack')
    pv = np.flatnonzero(kinds == 'pv')
    pq = np.flatnonzero(kinds == 'pq')
    return slack, pv, pq


def solve_power_flow(case, demand=None, generation=None, initial=None,
                     options=None):
    """ Solve the AC power flow with a full Newton method.

    Parameters
    ----------
    case : SystemCase
    demand : tuple of float arrays, optional
        Per-unit ``(p_d, q_d)`` in bus order. Defaults to the nominal demand.
    generation : float array, optional
        Per-unit scheduled real generation per machine; only the entries of
        PV machines are used. Defaults to the nominal schedule.
    initial : PowerFlowState, optional
        Warm start. The default is a flat start with generator voltages at
        their setpoints.
    options : PowerFlowOptions, optional

    Returns
    -------
    state : PowerFlowState

    Examples
    --------
    >>> from dampshift.netcase import load_case
    >>> state = solve_power_flow(load_case('ieee14'))
    >>> state.iterations <= 10
    True
    """
    options = options or PowerFlowOptions()
    if demand is None:
        demand = case.nominal_demand()
    if generation is None:
        generation = case.nominal_generation()
    p_d, q_d = (np.asarray(d, dtype=float) for d in demand)
    p_sched = np.asarray(generation, dtype=float)
    n = case.n_bus
    msg = "Demand vectors must have one entry per bus"
    assert p_d.shape == (n,) and q_d.shape == (n,), msg
    msg = "Generation must have one entry per machine"
    assert p_sched.shape == (len(case.machines),), msg

    ybus = admittance(case)
    slack, pv, pq = _bus_sets(case)
    pvpq = np.r_[pv, pq]
    gen_bus = np.array([case.bus_position[m.bus] for m in case.machines],
                       dtype=int)

    v = np.array([b.v0 for b in case.buses], dtype=float)
    theta = np.zeros(n)
    if initial is not None:
        v[pq] = initial.v[pq]
        theta[pvpq] = initial.theta[pvpq]

    p_spec = -p_d.copy()
    q_spec = -q_d.copy()
    for k, m in enumerate(case.machines):
        if case.buses[gen_bus[k]].kind == 'pv':
            p_spec[gen_bus[k]] += p_sched[k]

    n_a = len(pvpq)
    iterations = 0
    while True:
        vc = v * np.exp(1j * theta)
        s_bus = vc * np.conj(ybus.dot(vc))
        mis = s_bus - (p_spec + 1j * q_spec)
        residual = np.r_[mis.real[pvpq], mis.imag[pq]]
        norm = np.max(np.abs(residual)) if residual.size else 0.0
        _log.debug("power flow iteration %i: mismatch %.3e", iterations, norm)
        if norm <= options.tolerance:
            break
        if iterations >= options.max_iter or not np.isfinite(norm):
            msg = "power flow did not converge after %i iterations " \
                  "(mismatch %.3e)" % (iterations, norm)
            raise PowerFlowError(msg, iterations=iterations, mismatch=norm)
        ds_dvm, ds_dva = dsbus_dv(ybus, vc)
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]]])
        try:
            dx = linalg.solve(jac, -residual)
        except (linalg.LinAlgError, ValueError) as err:
            msg = "singular power-flow Jacobian: %s" % err
            raise PowerFlowError(msg, iterations=iterations, mismatch=norm)
        theta[pvpq] += dx[:n_a]
        v[pq] += dx[n_a:]
        iterations += 1

    p_g = p_sched.copy()
    q_g = np.zeros(len(case.machines))
    for k in range(len(case.machines)):
        b = gen_bus[k]
        if case.buses[b].kind == 'slack':
            p_g[k] = s_bus[b].real + p_d[b]
        q_g[k] = s_bus[b].imag + q_d[b]
    _log.debug("power flow converged in %i iterations", iterations)
    return PowerFlowState(v=v, theta=theta, p_g=p_g, q_g=q_g, s_bus=s_bus,
                          p_d=p_d, q_d=q_d, p_sched=p_sched,
                          iterations=iterations, mismatch=norm)


def _branch_terms(case, branch, direction):
    """ Sending/receiving bus positions, series conductance and susceptance.
    """
    n_branch = len(case.branches)
    if isinstance(branch, (bool, np.bool_)) or \
            not isinstance(branch, (int, np.integer)):
        msg = "branch index must be an integer, got %r" % (branch,)
        raise BranchIndexError(msg)
    if not 0 <= branch < n_branch:
        msg = "branch index %i outside [0, %i)" % (branch, n_branch)
        raise BranchIndexError(msg)
    br = case.branches[branch]
    i, j = case.bus_position[br.from_bus], case.bus_position[br.to_bus]
    if direction < 0:
        i, j = j, i
    y = 1.0 / complex(br.r, br.x)
    return i, j, y.real, y.imag


def branch_flow(case, state, branch, direction=1):
    """ Sending-end real power flow of a branch in MW.

    Parameters
    ----------
    branch : int
        Position of the branch in ``case.branches``; anything outside
        ``[0, len(case.branches))`` raises `BranchIndexError`.
    direction : int
        ``+1`` for the from-bus end, ``-1`` for the to-bus end.
    """
    i, j, g, b = _branch_terms(case, branch, direction)
    vi, vj = state.v[i], state.v[j]
    th = state.theta[i] - state.theta[j]
    p = g * vi ** 2 - vi * vj * (g * np.cos(th) + b * np.sin(th))
    return p * case.base_mva


def flow_gradient(case, state, branch, direction=1):
    """ Gradient of the per-unit sending-end flow with respect to
    ``(V_i, V_j, theta_i, theta_j)`` where ``i`` is the sending bus.

    Returns
    -------
    (i, j) : bus positions
    grad : float array of length 4
    """
    i, j, g, b = _branch_terms(case, branch, direction)
    vi, vj = state.v[i], state.v[j]
    th = state.theta[i] - state.theta[j]
    c, s = np.cos(th), np.sin(th)
    d_th = vi * vj * (g * s - b * c)
    grad = np.array([2 * g * vi - vj * (g * c + b * s),
                     -vi * (g * c + b * s), d_th, -d_th])
    return (i, j), grad


def branch_flows(case, state):
    """ Table of every branch flow in both directions, in MW. """
    rows = []
    for k, br in enumerate(case.branches):
        fwd = branch_flow(case, state, k, 1)
        rev = branch_flow(case, state, k, -1)
        rows.append(dict(from_bus=br.from_bus, to_bus=br.to_bus,
                         p_from_mw=fwd, p_to_mw=rev, loss_mw=fwd + rev,
                         rate_mw=br.rate))
    return pd.DataFrame(rows, columns=['from_bus', 'to_bus', 'p_from_mw',
                                       'p_to_mw', 'loss_mw', 'rate_mw'])


def total_losses(case, state):
    """ Real losses in MW: branch losses plus shunt conductance draw. """
    loss = sum(branch_flow(case, state, k, 1) + branch_flow(case, state, k, -1)
               for k in range(len(case.branches)))
    loss += sum(b.g_sh * state.v[i] ** 2 for i, b in enumerate(case.buses))
    return loss
