""" Differential-algebraic model of machines, exciters and stabilizers.

The model is ``xdot = f(x, y)``, ``0 = g(x, y)``. Variable ordering is
canonical so that Jacobian rows and eigenvector components are comparable
between runs:

x
    per machine ``(delta, omega)``; then per AVR ``(v_m, v_r1, v_f_tilde,
    v_r2)``; then per PSS ``(x_w, x_p, x_q)``.
y
    ``V`` of every bus, ``theta`` of every bus; then per machine ``(i_d, i_q,
    v_d, v_q, p_g, q_g, psi_d, psi_q, v_f)``; then ``v_ref`` per AVR; then
    per PSS ``(v_si, v_so, v_w, v_p)``.
g rows
    real then reactive bus balance; the eight stator/flux rows of every
    machine; one field-voltage row per machine (fixed setpoint, or tied to
    the exciter output when the machine has an AVR); one reference row per
    AVR; four rows per PSS.

A slack bus without a machine is an infinite bus: its balance rows are
replaced by ``V - V0 = 0`` and ``theta = 0``.
"""
from dataclasses import dataclass, replace
import enum
import logging

import numpy as np

from .netcase import DampshiftError, admittance
from .powerflow import dsbus_dv, solve_power_flow

_log = logging.getLogger(__name__)

MACHINE_Y = ('i_d', 'i_q', 'v_d', 'v_q', 'p_g', 'q_g', 'psi_d', 'psi_q', 'v_f')
AVR_X = ('v_m', 'v_r1', 'v_f_tilde', 'v_r2')
PSS_X = ('x_w', 'x_p', 'x_q')
PSS_Y = ('v_si', 'v_so', 'v_w', 'v_p')
SETPOINT_LIMIT = 10.0


class InitializationError(DampshiftError):
    pass


class ModelFidelity(enum.Enum):
    CLASSICAL = 'classical'
    WITH_AVR = 'avr'
    WITH_AVR_PSS = 'avr-pss'

    @property
    def has_avr(self):
        return self is not ModelFidelity.CLASSICAL

    @property
    def has_pss(self):
        return self is ModelFidelity.WITH_AVR_PSS

    @classmethod
    def parse(cls, value):
        """
        >>> ModelFidelity.parse('avr-pss')
        <ModelFidelity.WITH_AVR_PSS: 'avr-pss'>
        """
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class DaeLayout(object):
    def __init__(self, case, fidelity):
        """ Index map of the DAE for one case and model fidelity.

        Every attribute named after a variable (``delta``, ``v``, ``i_d``,
        ``v_r1``, ...) is an integer array of positions inside ``x`` or ``y``;
        ``row_*`` attributes are row positions inside ``g``; ``par_*``
        attributes are positions inside the parameter vector used by
        `parameter_jacobian`.
        """
        fidelity = ModelFidelity.parse(fidelity)
        self.case = case
        self.fidelity = fidelity
        if fidelity.has_avr and not case.avrs:
            raise DampshiftError("fidelity %s needs at least one AVR"
                                 % fidelity.value)
        if fidelity.has_pss and not case.psss:
            raise DampshiftError("fidelity %s needs at least one PSS"
                                 % fidelity.value)
        self.ybus = admittance(case)
        n_bus = self.n_bus = case.n_bus
        n_gen = self.n_gen = len(case.machines)
        self.avrs = case.avrs if fidelity.has_avr else ()
        self.psss = case.psss if fidelity.has_pss else ()
        n_avr = self.n_avr = len(self.avrs)
        n_pss = self.n_pss = len(self.psss)
        mpos = case.machine_position
        self.gen_bus = np.array([case.bus_position[m.bus]
                                 for m in case.machines], dtype=int)
        self.avr_gen = np.array([mpos[a.bus] for a in self.avrs], dtype=int)
        avr_of_bus = {a.bus: i for i, a in enumerate(self.avrs)}
        self.pss_avr = np.array([avr_of_bus[s.bus] for s in self.psss],
                                dtype=int)
        self.pss_gen = self.avr_gen[self.pss_avr] if n_pss else \
            np.zeros(0, dtype=int)
        self.gen_avr = -np.ones(n_gen, dtype=int)
        self.gen_avr[self.avr_gen] = np.arange(n_avr)
        self.avr_pss = -np.ones(n_avr, dtype=int)
        self.avr_pss[self.pss_avr] = np.arange(n_pss)
        self.slack = case.slack_position
        self.infinite_bus = case.slack_machine is None

        # dynamic states
        k = np.arange(n_gen)
        self.delta, self.omega = 2 * k, 2 * k + 1
        off = 2 * n_gen
        a = np.arange(n_avr)
        for j, name in enumerate(AVR_X):
            setattr(self, name, off + len(AVR_X) * a + j)
        off += len(AVR_X) * n_avr
        s = np.arange(n_pss)
        for j, name in enumerate(PSS_X):
            setattr(self, name, off + len(PSS_X) * s + j)
        self.n_x = off + len(PSS_X) * n_pss

        # algebraic states
        self.v = np.arange(n_bus)
        self.theta = n_bus + np.arange(n_bus)
        off = 2 * n_bus
        for j, name in enumerate(MACHINE_Y):
            setattr(self, name, off + len(MACHINE_Y) * k + j)
        off += len(MACHINE_Y) * n_gen
        self.v_ref = off + a
        off += n_avr
        for j, name in enumerate(PSS_Y):
            setattr(self, name, off + len(PSS_Y) * s + j)
        self.n_y = off + len(PSS_Y) * n_pss

        # algebraic rows
        self.row_p = np.arange(n_bus)
        self.row_q = n_bus + np.arange(n_bus)
        off = 2 * n_bus
        self.row_machine = off + 8 * k[:, None] + np.arange(8)[None, :]
        off += 8 * n_gen
        self.row_vf = off + k
        off += n_gen
        self.row_vref = off + a
        off += n_avr
        self.row_pss = off + 4 * s[:, None] + np.arange(4)[None, :]
        n_g = off + 4 * n_pss
        msg = "Equation count must match the algebraic state count"
        assert n_g == self.n_y, msg

        # parameters
        self.par_p_d = np.arange(n_bus)
        self.par_q_d = n_bus + np.arange(n_bus)
        self.par_tau_m = 2 * n_bus + k
        self.par_v_f0 = 2 * n_bus + n_gen + k
        self.par_v_ref0 = 2 * n_bus + 2 * n_gen + a
        self.par_k_w = 2 * n_bus + 2 * n_gen + n_avr + s
        self.n_p = 2 * n_bus + 2 * n_gen + n_avr + n_pss

    @property
    def n_z(self):
        return self.n_x + self.n_y

    def _names(self, size, groups, labels):
        names = [None] * size
        for group, label in zip(groups, labels):
            for name in group:
                for pos, lab in zip(getattr(self, name), label):
                    names[pos] = "%s_%s" % (name, lab)
        return names

    @property
    def x_names(self):
        gens = [m.bus for m in self.case.machines]
        avrs = [a.bus for a in self.avrs]
        psss = [s.bus for s in self.psss]
        return self._names(self.n_x, [('delta', 'omega'), AVR_X, PSS_X],
                           [gens, avrs, psss])

    @property
    def y_names(self):
        ids = [b.id for b in self.case.buses]
        gens = [m.bus for m in self.case.machines]
        avrs = [a.bus for a in self.avrs]
        psss = [s.bus for s in self.psss]
        names = self._names(self.n_y, [('v', 'theta'), MACHINE_Y, ('v_ref',),
                                       PSS_Y], [ids, gens, avrs, psss])
        return names

    @property
    def z_names(self):
        return self.x_names + self.y_names

    @property
    def p_names(self):
        ids = [b.id for b in self.case.buses]
        gens = [m.bus for m in self.case.machines]
        out = ['p_d_%i' % i for i in ids] + ['q_d_%i' % i for i in ids]
        out += ['tau_m_%i' % i for i in gens] + ['v_f0_%i' % i for i in gens]
        out += ['v_ref0_%i' % a.bus for a in self.avrs]
        out += ['k_w_%i' % s.bus for s in self.psss]
        return out

    def machine_states(self, k):
        """ Positions in ``x`` of every dynamic state owned by machine ``k``
        (its rotor, its exciter and its stabilizer).
        """
        out = [self.delta[k], self.omega[k]]
        a = self.gen_avr[k]
        if a >= 0:
            out += [getattr(self, name)[a] for name in AVR_X]
            s = self.avr_pss[a]
            if s >= 0:
                out += [getattr(self, name)[s] for name in PSS_X]
        return out


@dataclass(frozen=True, eq=False)
class DaeParameters:
    """ Inputs of the DAE that are not states: per-unit demand, the PV
    generation schedule, the machine setpoints and the stabilizer gains.
    """
    p_d: np.ndarray
    q_d: np.ndarray
    p_sched: np.ndarray
    tau_m: np.ndarray
    v_f0: np.ndarray
    v_ref0: np.ndarray
    k_w: np.ndarray

    def replace(self, **changes):
        return replace(self, **changes)

    def vector(self):
        return np.r_[self.p_d, self.q_d, self.tau_m, self.v_f0, self.v_ref0,
                     self.k_w]

    def with_vector(self, vec, layout):
        """ Inverse of `vector` for a given layout. """
        msg = "Parameter vector has the wrong length"
        assert len(vec) == layout.n_p, msg
        cuts = np.cumsum([layout.n_bus, layout.n_bus, layout.n_gen,
                          layout.n_gen, layout.n_avr])
        p_d, q_d, tau_m, v_f0, v_ref0, k_w = np.split(np.asarray(vec,
                                                                 dtype=float),
                                                      cuts)
        return self.replace(p_d=p_d, q_d=q_d, tau_m=tau_m, v_f0=v_f0,
                            v_ref0=v_ref0, k_w=k_w)


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """ Power flow plus DAE equilibrium ``(x*, y*)``. """
    fidelity: ModelFidelity
    x: np.ndarray
    y: np.ndarray
    params: DaeParameters
    pf: object
    layout: DaeLayout

    @property
    def p_d(self):
        return self.params.p_d

    @property
    def q_d(self):
        return self.params.q_d

    def with_gains(self, k_w):
        """ Same equilibrium with other stabilizer gains. The PSS input is
        the speed deviation, which is zero at equilibrium, so no state moves.
        """
        params = self.params.replace(k_w=np.asarray(k_w, dtype=float))
        return replace(self, params=params)


def default_gains(case, fidelity):
    fidelity = ModelFidelity.parse(fidelity)
    if not fidelity.has_pss:
        return np.zeros(0)
    return np.array([s.k_w for s in case.psss], dtype=float)


def _layout(case, fidelity, layout):
    if layout is None:
        return DaeLayout(case, fidelity)
    return layout


def _saturation(avr, v_f):
    se = avr.a_e * np.exp(avr.b_e * abs(v_f))
    sign = 1.0 if v_f >= 0 else -1.0
    return se, avr.b_e * se * sign


def residuals(case, fidelity, x, y, params, layout=None):
    """ Evaluate ``f(x, y)`` and ``g(x, y)``.

    Parameters
    ----------
    case : SystemCase
    fidelity : ModelFidelity or str
    x, y : float arrays
        Dynamic and algebraic states in canonical order.
    params : DaeParameters
    layout : DaeLayout, optional
        Reused index map; built from ``case`` and ``fidelity`` when omitted.

    Returns
    -------
    f, g : float arrays
    """
    lay = _layout(case, fidelity, layout)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (lay.n_x,) or y.shape != (lay.n_y,):
        msg = "state sizes (%i, %i) do not match the model (%i, %i)" % (
            x.size, y.size, lay.n_x, lay.n_y)
        raise DampshiftError(msg)
    f = np.zeros(lay.n_x)
    g = np.zeros(lay.n_y)
    machines = case.machines

    v, th = y[lay.v], y[lay.theta]
    vc = v * np.exp(1j * th)
    s_bus = vc * np.conj(lay.ybus.dot(vc))
    p_gen = np.zeros(lay.n_bus)
    q_gen = np.zeros(lay.n_bus)
    np.add.at(p_gen, lay.gen_bus, y[lay.p_g])
    np.add.at(q_gen, lay.gen_bus, y[lay.q_g])
    g[lay.row_p] = s_bus.real - p_gen + params.p_d
    g[lay.row_q] = s_bus.imag - q_gen + params.q_d
    if lay.infinite_bus:
        s = lay.slack
        g[lay.row_p[s]] = v[s] - case.buses[s].v0
        g[lay.row_q[s]] = th[s]

    delta, omega = x[lay.delta], x[lay.omega]
    i_d, i_q = y[lay.i_d], y[lay.i_q]
    v_d, v_q = y[lay.v_d], y[lay.v_q]
    psi_d, psi_q, v_f = y[lay.psi_d], y[lay.psi_q], y[lay.v_f]
    vb, phi = v[lay.gen_bus], delta - th[lay.gen_bus]
    r_a = np.array([m.r_a for m in machines])
    x_d = np.array([m.x_d for m in machines])
    x_q = np.array([m.x_q for m in machines])
    rows = lay.row_machine
    g[rows[:, 0]] = vb * np.sin(phi) - v_d
    g[rows[:, 1]] = vb * np.cos(phi) - v_q
    g[rows[:, 2]] = v_d * i_d + v_q * i_q - y[lay.p_g]
    g[rows[:, 3]] = v_q * i_d - v_d * i_q - y[lay.q_g]
    g[rows[:, 4]] = psi_d + x_d * i_d - v_f
    g[rows[:, 5]] = psi_q + x_q * i_q
    g[rows[:, 6]] = -psi_d + v_q + r_a * i_q
    g[rows[:, 7]] = psi_q + v_d + r_a * i_d
    g[lay.row_vf] = v_f - params.v_f0
    if lay.n_avr:
        g[lay.row_vf[lay.avr_gen]] = x[lay.v_f_tilde] - v_f[lay.avr_gen]

    h = np.array([m.h for m in machines])
    d = np.array([m.d for m in machines])
    f[lay.delta] = case.omega_b * omega
    f[lay.omega] = (params.tau_m - psi_d * i_q + psi_q * i_d - d * omega) \
        / (2.0 * h)

    for a, avr in enumerate(lay.avrs):
        k = lay.avr_gen[a]
        v_m, v_r1 = x[lay.v_m[a]], x[lay.v_r1[a]]
        v_ft, v_r2 = x[lay.v_f_tilde[a]], x[lay.v_r2[a]]
        v_ref = y[lay.v_ref[a]]
        se, _ = _saturation(avr, v_ft)
        field = (v_r1 - avr.k_e * v_ft - se) / avr.t_e
        f[lay.v_m[a]] = (vb[k] - v_m) / avr.t_r
        f[lay.v_r1[a]] = (avr.k_a * (v_ref - v_m - v_r2) - v_r1) / avr.t_a
        f[lay.v_f_tilde[a]] = field
        f[lay.v_r2[a]] = (avr.k_f * field - v_r2) / avr.t_f
        s = lay.avr_pss[a]
        v_so = y[lay.v_so[s]] if s >= 0 else 0.0
        g[lay.row_vref[a]] = v_ref - params.v_ref0[a] - v_so

    for s, pss in enumerate(lay.psss):
        k = lay.pss_gen[s]
        v_si, v_so = y[lay.v_si[s]], y[lay.v_so[s]]
        v_w, v_p = y[lay.v_w[s]], y[lay.v_p[s]]
        rows = lay.row_pss[s]
        g[rows[0]] = v_si - params.k_w[s] * omega[k]
        g[rows[1]] = v_si - v_w - x[lay.x_w[s]]
        g[rows[2]] = v_p * pss.t_2 - v_w * pss.t_1 - x[lay.x_p[s]]
        g[rows[3]] = v_so * pss.t_4 - v_p * pss.t_3 - x[lay.x_q[s]]
        f[lay.x_w[s]] = v_w / pss.t_w
        f[lay.x_p[s]] = v_w - v_p
        f[lay.x_q[s]] = v_p - v_so
    return f, g


def jacobian(case, fidelity, x, y, params, layout=None):
    """ Analytic Jacobian blocks ``(f_x, f_y, g_x, g_y)`` at ``(x, y)``. """
    lay = _layout(case, fidelity, layout)
    fx = np.zeros((lay.n_x, lay.n_x))
    fy = np.zeros((lay.n_x, lay.n_y))
    gx = np.zeros((lay.n_y, lay.n_x))
    gy = np.zeros((lay.n_y, lay.n_y))

    v, th = y[lay.v], y[lay.theta]
    vc = v * np.exp(1j * th)
    ds_dvm, ds_dva = dsbus_dv(lay.ybus, vc)
    gy[np.ix_(lay.row_p, lay.v)] = ds_dvm.real
    gy[np.ix_(lay.row_p, lay.theta)] = ds_dva.real
    gy[np.ix_(lay.row_q, lay.v)] = ds_dvm.imag
    gy[np.ix_(lay.row_q, lay.theta)] = ds_dva.imag
    gy[lay.row_p[lay.gen_bus], lay.p_g] = -1.0
    gy[lay.row_q[lay.gen_bus], lay.q_g] = -1.0
    if lay.infinite_bus:
        s = lay.slack
        gy[lay.row_p[s], :] = 0.0
        gy[lay.row_q[s], :] = 0.0
        gy[lay.row_p[s], lay.v[s]] = 1.0
        gy[lay.row_q[s], lay.theta[s]] = 1.0

    for k, m in enumerate(case.machines):
        b = lay.gen_bus[k]
        r = lay.row_machine[k]
        dl, vb, tb = lay.delta[k], lay.v[b], lay.theta[b]
        phi = x[dl] - y[tb]
        sn, cs = np.sin(phi), np.cos(phi)
        i_d, i_q = y[lay.i_d[k]], y[lay.i_q[k]]
        v_d, v_q = y[lay.v_d[k]], y[lay.v_q[k]]
        psi_d, psi_q = y[lay.psi_d[k]], y[lay.psi_q[k]]
        c_id, c_iq = lay.i_d[k], lay.i_q[k]
        c_vd, c_vq = lay.v_d[k], lay.v_q[k]
        c_pd, c_pq = lay.psi_d[k], lay.psi_q[k]
        # stator voltage projection
        gx[r[0], dl] = y[vb] * cs
        gy[r[0], vb] = sn
        gy[r[0], tb] = -y[vb] * cs
        gy[r[0], c_vd] = -1.0
        gx[r[1], dl] = -y[vb] * sn
        gy[r[1], vb] = cs
        gy[r[1], tb] = y[vb] * sn
        gy[r[1], c_vq] = -1.0
        # terminal power
        gy[r[2], c_vd] = i_d
        gy[r[2], c_id] = v_d
        gy[r[2], c_vq] = i_q
        gy[r[2], c_iq] = v_q
        gy[r[2], lay.p_g[k]] = -1.0
        gy[r[3], c_vq] = i_d
        gy[r[3], c_id] = v_q
        gy[r[3], c_vd] = -i_q
        gy[r[3], c_iq] = -v_d
        gy[r[3], lay.q_g[k]] = -1.0
        # fluxes
        gy[r[4], c_pd] = 1.0
        gy[r[4], c_id] = m.x_d
        gy[r[4], lay.v_f[k]] = -1.0
        gy[r[5], c_pq] = 1.0
        gy[r[5], c_iq] = m.x_q
        gy[r[6], c_pd] = -1.0
        gy[r[6], c_vq] = 1.0
        gy[r[6], c_iq] = m.r_a
        gy[r[7], c_pq] = 1.0
        gy[r[7], c_vd] = 1.0
        gy[r[7], c_id] = m.r_a
        # swing
        two_h = 2.0 * m.h
        fx[dl, lay.omega[k]] = case.omega_b
        om = lay.omega[k]
        fx[om, om] = -m.d / two_h
        fy[om, c_pd] = -i_q / two_h
        fy[om, c_iq] = -psi_d / two_h
        fy[om, c_pq] = i_d / two_h
        fy[om, c_id] = psi_q / two_h
        # field voltage
        a = lay.gen_avr[k]
        gy[lay.row_vf[k], lay.v_f[k]] = -1.0 if a >= 0 else 1.0
        if a >= 0:
            gx[lay.row_vf[k], lay.v_f_tilde[a]] = 1.0

    for a, avr in enumerate(lay.avrs):
        k = lay.avr_gen[a]
        c_vm, c_r1 = lay.v_m[a], lay.v_r1[a]
        c_ft, c_r2 = lay.v_f_tilde[a], lay.v_r2[a]
        _, dse = _saturation(avr, x[c_ft])
        fy[c_vm, lay.v[lay.gen_bus[k]]] = 1.0 / avr.t_r
        fx[c_vm, c_vm] = -1.0 / avr.t_r
        fy[c_r1, lay.v_ref[a]] = avr.k_a / avr.t_a
        fx[c_r1, c_vm] = -avr.k_a / avr.t_a
        fx[c_r1, c_r2] = -avr.k_a / avr.t_a
        fx[c_r1, c_r1] = -1.0 / avr.t_a
        fx[c_ft, c_r1] = 1.0 / avr.t_e
        fx[c_ft, c_ft] = -(avr.k_e + dse) / avr.t_e
        fx[c_r2, c_r1] = avr.k_f / (avr.t_e * avr.t_f)
        fx[c_r2, c_ft] = -avr.k_f * (avr.k_e + dse) / (avr.t_e * avr.t_f)
        fx[c_r2, c_r2] = -1.0 / avr.t_f
        gy[lay.row_vref[a], lay.v_ref[a]] = 1.0
        s = lay.avr_pss[a]
        if s >= 0:
            gy[lay.row_vref[a], lay.v_so[s]] = -1.0

    for s, pss in enumerate(lay.psss):
        k = lay.pss_gen[s]
        r = lay.row_pss[s]
        c_si, c_so = lay.v_si[s], lay.v_so[s]
        c_w, c_p = lay.v_w[s], lay.v_p[s]
        gy[r[0], c_si] = 1.0
        gx[r[0], lay.omega[k]] = -params.k_w[s]
        gy[r[1], c_si] = 1.0
        gy[r[1], c_w] = -1.0
        gx[r[1], lay.x_w[s]] = -1.0
        gy[r[2], c_p] = pss.t_2
        gy[r[2], c_w] = -pss.t_1
        gx[r[2], lay.x_p[s]] = -1.0
        gy[r[3], c_so] = pss.t_4
        gy[r[3], c_p] = -pss.t_3
        gx[r[3], lay.x_q[s]] = -1.0
        fy[lay.x_w[s], c_w] = 1.0 / pss.t_w
        fy[lay.x_p[s], c_w] = 1.0
        fy[lay.x_p[s], c_p] = -1.0
        fy[lay.x_q[s], c_p] = 1.0
        fy[lay.x_q[s], c_so] = -1.0
    return fx, fy, gx, gy


def parameter_jacobian(case, fidelity, op, layout=None):
    """ Derivatives of ``(f, g)`` with respect to the parameter vector
    ``(p_d, q_d, tau_m, v_f0, v_ref0, k_w)`` (see `DaeLayout.p_names`).

    Returns
    -------
    fp, gp : float arrays of shapes (n_x, n_p) and (n_y, n_p)
    """
    lay = _layout(case, fidelity, layout or op.layout)
    fp = np.zeros((lay.n_x, lay.n_p))
    gp = np.zeros((lay.n_y, lay.n_p))
    gp[lay.row_p, lay.par_p_d] = 1.0
    gp[lay.row_q, lay.par_q_d] = 1.0
    if lay.infinite_bus:
        gp[lay.row_p[lay.slack], :] = 0.0
        gp[lay.row_q[lay.slack], :] = 0.0
    for k, m in enumerate(case.machines):
        fp[lay.omega[k], lay.par_tau_m[k]] = 1.0 / (2.0 * m.h)
        if lay.gen_avr[k] < 0:
            gp[lay.row_vf[k], lay.par_v_f0[k]] = -1.0
    gp[lay.row_vref, lay.par_v_ref0] = -1.0
    for s in range(lay.n_pss):
        gp[lay.row_pss[s, 0], lay.par_k_w[s]] = -op.x[lay.omega[lay.pss_gen[s]]]
    return fp, gp


def initialize_equilibrium(case, fidelity, pf, k_w=None, layout=None):
    """ Build the DAE equilibrium consistent with a converged power flow.

    Each rotor angle comes from the internal voltage ``V + (r_a + j x'_q) I``;
    speeds are zero; mechanical torques, field-voltage setpoints and AVR
    references are back-solved so that every derivative vanishes.

    Parameters
    ----------
    pf : PowerFlowState
    k_w : float array, optional
        Stabilizer gains; the case values by default.

    Returns
    -------
    op : OperatingPoint
    """
    fidelity = ModelFidelity.parse(fidelity)
    lay = _layout(case, fidelity, layout)
    x = np.zeros(lay.n_x)
    y = np.zeros(lay.n_y)
    y[lay.v] = pf.v
    y[lay.theta] = pf.theta
    n_gen = lay.n_gen
    tau_m = np.zeros(n_gen)
    v_f0 = np.zeros(n_gen)
    for k, m in enumerate(case.machines):
        b = lay.gen_bus[k]
        vc = pf.v[b] * np.exp(1j * pf.theta[b])
        cur = np.conj(complex(pf.p_g[k], pf.q_g[k]) / vc)
        delta = np.angle(vc + complex(m.r_a, m.x_q) * cur)
        rot = np.exp(1j * (np.pi / 2 - delta))
        vdq, idq = vc * rot, cur * rot
        psi_d = vdq.imag + m.r_a * idq.imag
        psi_q = -vdq.real - m.r_a * idq.real
        v_f = psi_d + m.x_d * idq.real
        if abs(v_f) > SETPOINT_LIMIT:
            msg = "field voltage %.3f pu at bus %i is implausible" % (v_f,
                                                                      m.bus)
            raise InitializationError(msg)
        x[lay.delta[k]] = delta
        y[lay.i_d[k]], y[lay.i_q[k]] = idq.real, idq.imag
        y[lay.v_d[k]], y[lay.v_q[k]] = vdq.real, vdq.imag
        y[lay.p_g[k]], y[lay.q_g[k]] = pf.p_g[k], pf.q_g[k]
        y[lay.psi_d[k]], y[lay.psi_q[k]] = psi_d, psi_q
        y[lay.v_f[k]] = v_f
        tau_m[k] = psi_d * idq.imag - psi_q * idq.real
        v_f0[k] = v_f

    v_ref0 = np.zeros(lay.n_avr)
    for a, avr in enumerate(lay.avrs):
        k = lay.avr_gen[a]
        v_f = y[lay.v_f[k]]
        se, _ = _saturation(avr, v_f)
        v_r1 = avr.k_e * v_f + se
        v_m = pf.v[lay.gen_bus[k]]
        v_ref = v_m + v_r1 / avr.k_a
        if abs(v_ref) > SETPOINT_LIMIT:
            msg = "AVR reference %.3f pu at bus %i is implausible" % (v_ref,
                                                                      avr.bus)
            raise InitializationError(msg)
        x[lay.v_m[a]] = v_m
        x[lay.v_r1[a]] = v_r1
        x[lay.v_f_tilde[a]] = v_f
        x[lay.v_r2[a]] = 0.0
        y[lay.v_ref[a]] = v_ref
        # stabilizer output is zero at rest
        v_ref0[a] = v_ref

    if k_w is None:
        k_w = default_gains(case, fidelity)
    params = DaeParameters(p_d=pf.p_d, q_d=pf.q_d, p_sched=pf.p_sched,
                           tau_m=tau_m, v_f0=v_f0, v_ref0=v_ref0,
                           k_w=np.asarray(k_w, dtype=float))
    return OperatingPoint(fidelity=fidelity, x=x, y=y, params=params, pf=pf,
                          layout=lay)


def nominal_operating_point(case, fidelity, options=None):
    """ Equilibrium at the nominal demand and generation schedule. """
    fidelity = ModelFidelity.parse(fidelity)
    pf = solve_power_flow(case, options=options)
    _log.info("nominal power flow of %s converged in %i iterations",
              case.name or 'case', pf.iterations)
    return initialize_equilibrium(case, fidelity, pf)


def equilibrium_tangent(case, fidelity, op, direction, lin=None):
    """ First-order change of ``(x, y)`` along the equilibrium manifold.

    Generator voltages, the slack angle and the real output of every PV
    machine are held (their schedule moves only through ``direction``);
    torques, field setpoints and AVR references follow the operating point.

    Parameters
    ----------
    direction : dict
        Any of ``'p_d'``, ``'q_d'`` (per bus), ``'p_sched'`` (per machine) and
        ``'k_w'`` (per PSS) mapped to per-unit perturbation arrays.
    lin : LinearizedSystem, optional
        Jacobians at ``op``, recomputed when omitted.

    Returns
    -------
    dz : float array of length n_x + n_y
    """
    lay = op.layout
    if lin is None:
        fx, fy, gx, gy = jacobian(case, fidelity, op.x, op.y, op.params, lay)
    else:
        fx, fy, gx, gy = lin.fx, lin.fy, lin.gx, lin.gy
    fp, gp = parameter_jacobian(case, fidelity, op, lay)
    jz = np.block([[fx, fy], [gx, gy]])
    jp = np.vstack([fp, gp])

    dp = np.zeros(lay.n_p)
    for key, sl in (('p_d', lay.par_p_d), ('q_d', lay.par_q_d),
                    ('k_w', lay.par_k_w)):
        if key in direction:
            dp[sl] = direction[key]
    p_step = np.zeros(lay.n_gen)
    if 'p_sched' in direction:
        p_step[:] = direction['p_sched']

    free = list(lay.par_tau_m) + list(lay.par_v_ref0)
    free += [lay.par_v_f0[k] for k in range(lay.n_gen) if lay.gen_avr[k] < 0]
    n_z = lay.n_z
    fixed = []
    for k in range(lay.n_gen):
        fixed.append((lay.n_x + lay.v[lay.gen_bus[k]], 0.0))
        if lay.gen_bus[k] != lay.slack:
            fixed.append((lay.n_x + lay.p_g[k], p_step[k]))
    if not lay.infinite_bus:
        fixed.append((lay.n_x + lay.theta[lay.slack], 0.0))

    n_u = n_z + len(free)
    mat = np.zeros((n_z + len(fixed), n_u))
    rhs = np.zeros(n_z + len(fixed))
    mat[:n_z, :n_z] = jz
    mat[:n_z, n_z:] = jp[:, free]
    rhs[:n_z] = -jp.dot(dp)
    for r, (col, value) in enumerate(fixed):
        mat[n_z + r, col] = 1.0
        rhs[n_z + r] = value
    msg = "tangent system must be square"
    assert mat.shape[0] == mat.shape[1], msg
    sol = np.linalg.solve(mat, rhs)
    return sol[:n_z]
