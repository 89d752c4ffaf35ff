""" Linearization, finite spectrum, stability metrics and eigenvalue
sensitivities of the DAE model.

The linearized descriptor system is ``B dz/dt = A dz`` with
``A = [[f_x, f_y], [g_x, g_y]]`` and ``B = diag(I, 0)``. Its finite
eigenvalues are the eigenvalues of the reduced matrix
``A* = f_x - f_y g_y^-1 g_x``; eigenvectors are lifted back to the full
``(x, y)`` space so that sensitivities can be taken with respect to any state.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
import pandas as pd
from scipy import linalg

from .dae import (DaeLayout, ModelFidelity, equilibrium_tangent,
                  initialize_equilibrium, jacobian)
from .netcase import DampshiftError
from .powerflow import solve_power_flow

_log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
FD_STEP = 1e-7
TRACKING_THRESHOLD = 0.7


class SpectrumError(DampshiftError):
    pass


class ModeTrackingError(DampshiftError):
    def __init__(self, msg, correlation=None):
        self.correlation = correlation
        super(ModeTrackingError, self).__init__(msg)


class MetricError(DampshiftError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinearizedSystem:
    """ Jacobian blocks of the DAE at ``(x, y)``. """
    fx: np.ndarray
    fy: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    case: object
    fidelity: ModelFidelity
    x: np.ndarray
    y: np.ndarray
    params: object
    layout: object

    @property
    def n_x(self):
        return self.fx.shape[0]

    @property
    def n_y(self):
        return self.gy.shape[0]

    @property
    def A(self):
        return np.block([[self.fx, self.fy], [self.gx, self.gy]])

    @property
    def B(self):
        b = np.zeros((self.n_x + self.n_y, self.n_x + self.n_y))
        b[:self.n_x, :self.n_x] = np.eye(self.n_x)
        return b

    def at(self, x, y, params=None):
        """ Linearization of the same model at another point. """
        params = self.params if params is None else params
        return linearize_at(self.case, self.fidelity, x, y, params,
                            self.layout)


def linearize_at(case, fidelity, x, y, params, layout=None):
    fidelity = ModelFidelity.parse(fidelity)
    if layout is None:
        layout = DaeLayout(case, fidelity)
    fx, fy, gx, gy = jacobian(case, fidelity, x, y, params, layout)
    return LinearizedSystem(fx=fx, fy=fy, gx=gx, gy=gy, case=case,
                            fidelity=fidelity, x=np.asarray(x, dtype=float),
                            y=np.asarray(y, dtype=float), params=params,
                            layout=layout)


def linearize(case, fidelity, op):
    """ Analytic linearization at an operating point. """
    return linearize_at(case, fidelity, op.x, op.y, op.params, op.layout)


@dataclass(frozen=True, eq=False)
class Spectrum:
    """ Finite eigenvalues with left and right eigenvectors in the full
    ``(x, y)`` space.

    Columns of ``right`` and ``left`` are normalized so that the largest
    dynamic component of ``r`` is one and ``l_x^T r_x = 1``. Modes whose
    magnitude is below ``tol`` are degenerate (the rotor-angle reference of a
    system without an infinite bus) and take no part in the metrics.
    """
    eigenvalues: np.ndarray
    right: np.ndarray
    left: np.ndarray
    n_x: int
    names: tuple = ()
    tol: float = 1e-6

    def __len__(self):
        return len(self.eigenvalues)

    @property
    def real(self):
        return self.eigenvalues.real

    @property
    def imag(self):
        return self.eigenvalues.imag

    @property
    def degenerate(self):
        return np.abs(self.eigenvalues) <= self.tol

    @property
    def damping(self):
        mag = np.abs(self.eigenvalues)
        out = np.zeros(len(self))
        nz = mag > 0
        out[nz] = -self.real[nz] / mag[nz]
        return out

    def representatives(self, include_degenerate=False):
        """ Positions of the modes with non-negative imaginary part. """
        keep = self.imag >= 0
        if not include_degenerate:
            keep &= ~self.degenerate
        return np.flatnonzero(keep)

    def conjugate(self, mode):
        target = np.conj(self.eigenvalues[mode])
        return int(np.argmin(np.abs(self.eigenvalues - target)))


def reduced_matrix(lin):
    """ ``A* = f_x - f_y g_y^-1 g_x``. """
    if lin.n_y == 0:
        return lin.fx.copy()
    cond = np.linalg.cond(lin.gy)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        msg = "g_y is ill-conditioned (condition number %.3e)" % cond
        raise SpectrumError(msg)
    lu = linalg.lu_factor(lin.gy)
    return lin.fx - lin.fy.dot(linalg.lu_solve(lu, lin.gx))


def finite_spectrum(lin, tol=1e-6):
    """ Finite eigenvalues of ``(A, B)`` with eigenvectors lifted to the full
    state space.

    Modes are sorted by increasing damping ratio, then by decreasing
    imaginary part, so the least damped representative comes first.

    Parameters
    ----------
    lin : LinearizedSystem
    tol : float
        Magnitude below which a mode is flagged degenerate.

    Returns
    -------
    spec : Spectrum
    """
    astar = reduced_matrix(lin)
    w, vl, vr = linalg.eig(astar, left=True, right=True)
    l_x = np.conj(vl)
    r_x = vr
    if lin.n_y:
        lu = linalg.lu_factor(lin.gy)
        r_y = -linalg.lu_solve(lu, lin.gx.dot(r_x))
        l_y = -linalg.lu_solve(lu, lin.fy.T.dot(l_x), trans=1)
    else:
        r_y = np.zeros((0, len(w)), dtype=complex)
        l_y = np.zeros((0, len(w)), dtype=complex)
    right = np.vstack([r_x, r_y])
    left = np.vstack([l_x, l_y])
    for m in range(len(w)):
        pivot = right[np.argmax(np.abs(right[:lin.n_x, m])), m]
        right[:, m] /= pivot
        scale = left[:lin.n_x, m].dot(right[:lin.n_x, m])
        if abs(scale) > 1e-12:
            left[:, m] /= scale

    mag = np.abs(w)
    damping = np.where(mag > 0, -w.real / np.where(mag > 0, mag, 1.0), 0.0)
    order = np.lexsort((-w.imag, damping, mag <= tol))
    names = tuple(lin.layout.x_names) if lin.layout is not None else ()
    spec = Spectrum(eigenvalues=w[order], right=right[:, order],
                    left=left[:, order], n_x=lin.n_x, names=names, tol=tol)
    _log.debug("spectrum: %i finite modes, %i degenerate", len(w),
               int(spec.degenerate.sum()))
    return spec


@dataclass(frozen=True)
class MetricConfig:
    """ Weights of the combined stability objective over ``'sdr'``,
    ``'alpha1'`` and ``'interarea'``, and the designated inter-area mode.
    """
    weights: dict = field(default_factory=lambda: {'sdr': 1.0})
    interarea_mode: int = None


@dataclass(frozen=True)
class StabilityMetrics:
    sdr: float
    alpha1: float
    sdr_mode: int
    interarea: float = None
    weights: dict = field(default_factory=lambda: {'sdr': 1.0})

    @property
    def sdr_pct(self):
        return 100.0 * self.sdr

    def combined(self):
        """ Weighted sum of the selected metrics. """
        total = 0.0
        for key, gamma in self.weights.items():
            value = getattr(self, key)
            if value is None:
                raise MetricError("metric %r was not evaluated" % key)
            total += gamma * value
        return total


def metrics(spec, config=None, interarea_mode=None):
    """ Smallest damping ratio, negated largest real part and, optionally,
    the damping ratio of a designated inter-area mode.

    >>> lam = np.array([-1.0 + 0j, -1.0 - 0j])
    >>> spec = Spectrum(lam, np.eye(2, dtype=complex), np.eye(2, dtype=complex),
    ...                 n_x=2)
    >>> float(metrics(spec).sdr)
    1.0
    """
    config = config or MetricConfig()
    if interarea_mode is None:
        interarea_mode = config.interarea_mode
    reps = spec.representatives()
    if len(reps) == 0:
        raise SpectrumError("no finite non-degenerate modes")
    damping = spec.damping
    sdr_mode = reps[np.argmin(damping[reps])]
    alpha1 = -np.max(spec.real[~spec.degenerate])
    interarea = None
    if interarea_mode is not None:
        interarea = damping[interarea_mode]
    elif 'interarea' in config.weights:
        raise MetricError("inter-area damping needs a designated mode")
    return StabilityMetrics(sdr=damping[sdr_mode], alpha1=alpha1,
                            sdr_mode=int(sdr_mode), interarea=interarea,
                            weights=dict(config.weights))


def damping_change(eigenvalue, dlambda):
    """ First-order change of the damping ratio, in percentage points, for an
    eigenvalue change ``dlambda``.
    """
    a, b = eigenvalue.real, eigenvalue.imag
    mag3 = abs(eigenvalue) ** 3
    return 100.0 * (-b * b * dlambda.real + a * b * dlambda.imag) / mag3


@dataclass(frozen=True, eq=False)
class SensitivityRow:
    mode: int
    eigenvalue: complex
    names: tuple
    values: np.ndarray

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def series(self):
        return pd.Series(self.values, index=list(self.names))


def _resolve_targets(lin, targets):
    lay = lin.layout
    z_pos = {n: i for i, n in enumerate(lay.z_names)}
    p_pos = {n: i for i, n in enumerate(lay.p_names)}
    out = []
    for name in targets:
        if name in z_pos:
            out.append(('z', z_pos[name]))
        elif name in p_pos:
            out.append(('p', p_pos[name]))
        elif name.startswith('rate_'):
            out.append(('none', None))
        else:
            raise DampshiftError("unknown sensitivity target %r" % name)
    return out


def _shifted(lin, kind, pos, h):
    x, y, params = lin.x.copy(), lin.y.copy(), lin.params
    if kind == 'z':
        if pos < lin.n_x:
            x[pos] += h
        else:
            y[pos - lin.n_x] += h
    else:
        vec = params.vector()
        vec[pos] += h
        params = params.with_vector(vec, lin.layout)
    fx, fy, gx, gy = jacobian(lin.case, lin.fidelity, x, y, params,
                              lin.layout)
    return np.block([[fx, fy], [gx, gy]])


def _current_value(lin, kind, pos):
    if kind == 'p':
        return lin.params.vector()[pos]
    if pos < lin.n_x:
        return lin.x[pos]
    return lin.y[pos - lin.n_x]


def _derivative(lin, kind, pos, step):
    n = lin.n_x + lin.n_y
    if kind == 'none':
        return np.zeros((n, n))
    h = step * max(1.0, abs(_current_value(lin, kind, pos)))
    return (_shifted(lin, kind, pos, h) - _shifted(lin, kind, pos, -h)) / \
        (2 * h)


def state_derivative(lin, name, step=FD_STEP):
    """ ``dA/dchi`` by central differences of the analytic Jacobian. """
    (kind, pos), = _resolve_targets(lin, [name])
    return _derivative(lin, kind, pos, step)


def _denominators(spec, modes):
    nx = spec.n_x
    den = np.einsum('im,im->m', spec.left[:nx, modes], spec.right[:nx, modes])
    bad = np.abs(den) <= 1e-12
    if bad.any():
        msg = "degenerate normalization l^T B r for mode(s) %s" % (
            list(np.asarray(modes)[bad]),)
        raise SpectrumError(msg)
    return den


def sensitivity_matrix(lin, spec, modes, targets=None, step=FD_STEP):
    """ Eigenvalue derivatives of several modes with respect to many states
    and parameters, using one Jacobian difference per target.

    Parameters
    ----------
    lin : LinearizedSystem
    spec : Spectrum
    modes : sequence of int
        Positions in ``spec``.
    targets : sequence of str, optional
        State or parameter names (see `DaeLayout.z_names` and
        `DaeLayout.p_names`). Defaults to every state and stabilizer gain.

    Returns
    -------
    frame : pandas.DataFrame
        Complex derivatives, one row per mode and one column per target.
    """
    modes = list(modes)
    if targets is None:
        targets = list(lin.layout.z_names)
        targets += [n for n in lin.layout.p_names if n.startswith('k_w_')]
    resolved = _resolve_targets(lin, targets)
    den = _denominators(spec, modes)
    left = spec.left[:, modes]
    right = spec.right[:, modes]
    out = np.zeros((len(modes), len(targets)), dtype=complex)
    for j, (kind, pos) in enumerate(resolved):
        da = _derivative(lin, kind, pos, step)
        if not da.any():
            continue
        out[:, j] = np.einsum('im,ij,jm->m', left, da, right) / den
    _log.debug("sensitivities of %i modes to %i targets", len(modes),
               len(targets))
    return pd.DataFrame(out, index=modes, columns=list(targets))


def generalized_sensitivity(lin, spec, mode, targets=None):
    """ Derivatives ``dlambda/dchi = l^T (dA/dchi) r / (l^T B r)`` of one
    mode.

    Returns
    -------
    row : SensitivityRow
    """
    frame = sensitivity_matrix(lin, spec, [mode], targets)
    return SensitivityRow(mode=mode, eigenvalue=spec.eigenvalues[mode],
                          names=tuple(frame.columns),
                          values=frame.to_numpy()[0])


def chained_sensitivity(lin, spec, modes, direction, op):
    """ Total eigenvalue change along the equilibrium manifold for a
    per-unit input ``direction`` (see `dae.equilibrium_tangent`).
    """
    modes = list(modes)
    lay = lin.layout
    dz = equilibrium_tangent(lin.case, lin.fidelity, op, direction, lin=lin)
    names = list(lay.z_names)
    steps = list(dz)
    if 'k_w' in direction:
        names += [n for n in lay.p_names if n.startswith('k_w_')]
        steps += list(np.atleast_1d(direction['k_w']))
    sens = sensitivity_matrix(lin, spec, modes, names).to_numpy()
    return sens.dot(np.asarray(steps))


def participation_factors(spec, mode):
    """ Normalized ``|l_k r_k|`` over the dynamic states of one mode.

    Returns
    -------
    weights : pandas.Series
        Indexed by state name, summing to one.
    """
    nx = spec.n_x
    p = np.abs(spec.left[:nx, mode] * spec.right[:nx, mode])
    total = p.sum()
    if total > 0:
        p = p / total
    index = list(spec.names) if spec.names else list(range(nx))
    return pd.Series(p, index=index, name='participation')


def _correlation(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return abs(np.vdot(a, b)) / (na * nb)


def track_mode(old, mode, new, threshold=TRACKING_THRESHOLD):
    """ Find the mode of ``new`` that continues mode ``mode`` of ``old``.

    Candidates are compared by the normalized correlation of their dynamic
    eigenvector parts; near ties go to the closest eigenvalue.

    Returns
    -------
    index : int
    correlation : float
    """
    ref = old.right[:old.n_x, mode]
    lam = old.eigenvalues[mode]
    reps = new.representatives()
    if lam.imag < 0:
        lam, ref = np.conj(lam), np.conj(ref)
    if len(reps) == 0 or new.n_x != old.n_x:
        raise ModeTrackingError("no comparable modes to track against")
    corr = np.array([_correlation(ref, new.right[:new.n_x, k]) for k in reps])
    best = corr.max()
    near = np.flatnonzero(corr >= best - 1e-6)
    dist = np.abs(new.eigenvalues[reps[near]] - lam)
    pick = near[np.argmin(dist)]
    if best < threshold:
        msg = "mode %i could not be tracked (best correlation %.3f)" % (mode,
                                                                        best)
        raise ModeTrackingError(msg, correlation=best)
    return int(reps[pick]), float(corr[pick])


def mode_table(spec, names=None):
    """ One row per conjugate representative: eigenvalue parts, frequency,
    damping ratio in percent and the dominant dynamic state.
    """
    names = list(names) if names is not None else list(spec.names)
    rows = []
    for m in spec.representatives(include_degenerate=True):
        lam = spec.eigenvalues[m]
        part = participation_factors(spec, m)
        dominant = names[int(np.argmax(part.values))] if names else \
            int(np.argmax(part.values))
        rows.append(dict(mode=int(m), real=lam.real, imag=lam.imag,
                         freq_hz=abs(lam.imag) / (2 * np.pi),
                         damping_pct=100.0 * spec.damping[m],
                         dominant=dominant,
                         degenerate=bool(spec.degenerate[m])))
    columns = ['mode', 'real', 'imag', 'freq_hz', 'damping_pct', 'dominant',
               'degenerate']
    return pd.DataFrame(rows, columns=columns)


def spectrum_of(case, fidelity, op):
    """ Linearize ``op`` and return ``(lin, spec, metrics)``. """
    lin = linearize(case, fidelity, op)
    spec = finite_spectrum(lin)
    return lin, spec, metrics(spec)


def numeric_gen_sensitivity(case, fidelity, op, bus, delta_p, options=None):
    """ Damping-ratio sensitivity of the least damped mode to the output of
    one PV machine, by re-solving the perturbed operating point.

    Parameters
    ----------
    bus : int
        Bus id of a PV machine.
    delta_p : float
        Perturbation in MW; must not be zero.

    Returns
    -------
    ss : float
        Change of the damping ratio in percentage points per MW.
    """
    if delta_p == 0:
        raise MetricError("generation perturbation must be nonzero")
    pos = case.machine_position.get(bus)
    if pos is None or case.buses[case.bus_position[bus]].kind != 'pv':
        raise MetricError("bus %i does not carry a PV machine" % bus)
    _, spec, base = spectrum_of(case, fidelity, op)
    lam = spec.eigenvalues[base.sdr_mode]

    generation = op.pf.p_sched.copy()
    generation[pos] += delta_p / case.base_mva
    pf = solve_power_flow(case, demand=(op.p_d, op.q_d),
                          generation=generation, initial=op.pf,
                          options=options)
    moved = initialize_equilibrium(case, fidelity, pf, k_w=op.params.k_w,
                                   layout=op.layout)
    _, new_spec, _ = spectrum_of(case, fidelity, moved)
    k, corr = track_mode(spec, base.sdr_mode, new_spec)
    dlam = new_spec.eigenvalues[k] - lam
    ss = damping_change(lam, dlam) / delta_p
    _log.debug("SS at bus %i: %.5f pp/MW (correlation %.3f)", bus, ss, corr)
    return ss
