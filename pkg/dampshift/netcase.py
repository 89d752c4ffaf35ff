""" Static network description: case records, the sectioned case-file
reader/writer and the bus admittance matrix.

A case file is UTF-8 text split into sections ``[BASE]``, ``[BUS]``,
``[BRANCH]``, ``[MACHINE]``, ``[AVR]``, ``[PSS]`` and ``[DR]``. Each record
is one line of whitespace separated fields in the order of the record
definitions below; ``#`` starts a comment. Powers are MW / MVar in the file
and per unit everywhere else.
"""
from collections import namedtuple
from dataclasses import dataclass, field, fields
import functools
import logging
import math
import os

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

_log = logging.getLogger(__name__)

BUS_KINDS = ('slack', 'pv', 'pq')
DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')


class DampshiftError(Exception):
    """ Base class of every error raised by this package. """


class CaseFormatError(DampshiftError):
    def __init__(self, msg, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append("line %i" % line)
        if field is not None:
            where.append("field %i" % field)
        if where:
            msg = "%s: %s" % (', '.join(where), msg)
        super(CaseFormatError, self).__init__(msg)


class CaseValidationError(DampshiftError, ValueError):
    pass


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    v0: float
    p_d0: float
    q_d0: float
    v_min: float
    v_max: float
    g_sh: float = 0.0
    b_sh: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float
    rate: float = 0.0


@dataclass(frozen=True)
class MachineRecord:
    bus: int
    h: float
    d: float
    r_a: float
    x_d: float
    x_q: float
    tau_m0: float
    v_f0: float
    p_g0: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class AvrRecord:
    bus: int
    k_a: float
    k_e: float
    k_f: float
    t_r: float
    t_a: float
    t_e: float
    t_f: float
    a_e: float
    b_e: float
    v_ref0: float


@dataclass(frozen=True)
class PssRecord:
    bus: int
    k_w: float
    t_w: float
    t_1: float
    t_2: float
    t_3: float
    t_4: float
    k_min: float = None
    k_max: float = None


@dataclass(frozen=True)
class DrBusRecord:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    mu: float = None


@dataclass(frozen=True)
class DrSpec:
    records: tuple = ()

    @property
    def buses(self):
        return tuple(r.bus for r in self.records)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class SystemCase:
    """ Immutable network description.

    The derived lookups (bus positions, per-unit demand vectors) are cached on
    first use; the records themselves never change after construction, so a
    case can be shared between concurrent scenario runs.
    """
    base_mva: float
    buses: tuple
    branches: tuple
    machines: tuple = ()
    avrs: tuple = ()
    psss: tuple = ()
    dr: DrSpec = field(default_factory=DrSpec)
    freq: float = 0.0
    name: str = ''

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def omega_b(self):
        """ Base angular frequency used in the rotor-angle equation. A case
        without a frequency uses the normalized form with unit base.
        """
        if self.freq:
            return 2.0 * math.pi * self.freq
        return 1.0

    @functools.cached_property
    def bus_position(self):
        return {b.id: i for i, b in enumerate(self.buses)}

    @functools.cached_property
    def machine_position(self):
        return {m.bus: k for k, m in enumerate(self.machines)}

    @property
    def slack_position(self):
        return [i for i, b in enumerate(self.buses) if b.kind == 'slack'][0]

    @property
    def slack_machine(self):
        """ Machine index at the slack bus, or None for an infinite bus. """
        return self.machine_position.get(self.buses[self.slack_position].id)

    def nominal_demand(self):
        """ Per-unit (p_d, q_d) vectors in bus order. """
        p_d = np.array([b.p_d0 for b in self.buses]) / self.base_mva
        q_d = np.array([b.q_d0 for b in self.buses]) / self.base_mva
        return p_d, q_d

    def nominal_generation(self):
        """ Per-unit scheduled real generation per machine. """
        return np.array([m.p_g0 for m in self.machines]) / self.base_mva

    def dr_positions(self):
        return np.array([self.bus_position[b] for b in self.dr.buses],
                        dtype=int)

    def mu(self):
        """ Power-factor ratio p_d0/q_d0 of each responsive bus, unless the
        case overrides it. Buses with no reactive demand get ``nan``.
        """
        out = []
        for rec in self.dr.records:
            if rec.mu is not None:
                out.append(rec.mu)
                continue
            bus = self.buses[self.bus_position[rec.bus]]
            out.append(bus.p_d0 / bus.q_d0 if bus.q_d0 != 0 else float('nan'))
        return np.array(out)

    @property
    def total_load_mw(self):
        return sum(b.p_d0 for b in self.buses)


# field layout of every section: (record class, number of required fields)
_Section = namedtuple('_Section', ['cls', 'required'])
SECTIONS = {
    'BUS': _Section(BusRecord, 7),
    'BRANCH': _Section(BranchRecord, 5),
    'MACHINE': _Section(MachineRecord, 13),
    'AVR': _Section(AvrRecord, 11),
    'PSS': _Section(PssRecord, 7),
    'DR': _Section(DrBusRecord, 5),
}


def _convert(value, ftype, lineno, index):
    try:
        if ftype is int:
            return int(value)
        if ftype is str:
            kind = value.lower()
            if kind not in BUS_KINDS:
                raise ValueError(kind)
            return kind
        return float(value)
    except ValueError:
        msg = "could not read %r as %s" % (value, ftype.__name__)
        raise CaseFormatError(msg, line=lineno, field=index)


def _parse_record(section, tokens, lineno):
    spec = SECTIONS[section]
    defs = fields(spec.cls)
    if not spec.required <= len(tokens) <= len(defs):
        msg = "[%s] expects %i to %i fields, got %i" % (
            section, spec.required, len(defs), len(tokens))
        raise CaseFormatError(msg, line=lineno)
    values = [_convert(tok, f.type, lineno, i + 1)
              for i, (tok, f) in enumerate(zip(tokens, defs))]
    return spec.cls(*values)


def parse_case(text, name=''):
    """ Parse the text of a case file into a validated SystemCase.

    >>> text = '''
    ... [BASE]
    ... mva 100
    ... [BUS]
    ... 1 slack 1.0 0 0 0.9 1.1
    ... 2 pq 1.0 10 5 0.9 1.1   # a load
    ... [BRANCH]
    ... 1 2 0.0 0.1 0.0
    ... '''
    >>> case = parse_case(text)
    >>> case.n_bus, case.buses[1].p_d0
    (2, 10.0)
    """
    base = {}
    records = {key: [] for key in SECTIONS}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if line.startswith('['):
            if not line.endswith(']'):
                raise CaseFormatError("malformed section header", line=lineno)
            section = line[1:-1].strip().upper()
            if section != 'BASE' and section not in SECTIONS:
                msg = "unknown section [%s]" % section
                raise CaseFormatError(msg, line=lineno)
            continue
        if section is None:
            raise CaseFormatError("record outside of a section", line=lineno)
        tokens = line.split()
        if section == 'BASE':
            if len(tokens) != 2:
                msg = "[BASE] lines are 'key value' pairs"
                raise CaseFormatError(msg, line=lineno)
            key, value = tokens
            if key == 'name':
                base[key] = value
            elif key in ('mva', 'freq'):
                base[key] = _convert(value, float, lineno, 2)
            else:
                msg = "unknown [BASE] key %r" % key
                raise CaseFormatError(msg, line=lineno, field=1)
            continue
        records[section].append(_parse_record(section, tokens, lineno))
    if 'mva' not in base:
        raise CaseFormatError("missing [BASE] mva")
    case = SystemCase(base_mva=base['mva'],
                      buses=tuple(records['BUS']),
                      branches=tuple(records['BRANCH']),
                      machines=tuple(records['MACHINE']),
                      avrs=tuple(records['AVR']),
                      psss=tuple(records['PSS']),
                      dr=DrSpec(tuple(records['DR'])),
                      freq=base.get('freq', 0.0),
                      name=base.get('name', name))
    validate_case(case)
    return case


def load_case(path):
    """ Read and validate a case file.

    Parameters
    ----------
    path : str
        Path to a case file, or the bare name of a bundled case
        (see `bundled_case_path`).

    Returns
    -------
    case : SystemCase
    """
    if not os.path.exists(path) and os.path.exists(bundled_case_path(path)):
        path = bundled_case_path(path)
    try:
        with open(path, encoding='utf-8') as fh:
            text = fh.read()
    except OSError as err:
        raise CaseFormatError("cannot read case file %s: %s" % (path, err))
    name = os.path.splitext(os.path.basename(path))[0]
    case = parse_case(text, name=name)
    _log.debug("loaded case %s: %i buses, %i branches, %i machines",
               case.name, case.n_bus, len(case.branches), len(case.machines))
    return case


def bundled_case_path(name):
    """ Location of a case shipped with the package, e.g. ``ieee14``. """
    if not name.endswith('.case'):
        name = name + '.case'
    return os.path.join(DATA_DIR, name)


def _format(value):
    if value is None:
        return None
    if isinstance(value, (int, str)):
        return str(value)
    return repr(float(value))


def format_case(case):
    """ Render a case in the sectioned text format. Floats are written with
    `repr` so that reading the text back reproduces every field exactly.
    """
    out = ["# written by dampshift", "[BASE]", "mva %s" % _format(case.base_mva)]
    if case.freq:
        out.append("freq %s" % _format(case.freq))
    if case.name:
        out.append("name %s" % case.name)
    groups = [('BUS', case.buses), ('BRANCH', case.branches),
              ('MACHINE', case.machines), ('AVR', case.avrs),
              ('PSS', case.psss), ('DR', case.dr.records)]
    for section, recs in groups:
        if not recs:
            continue
        out.append("[%s]" % section)
        for rec in recs:
            tokens = [_format(getattr(rec, f.name)) for f in fields(rec)]
            # optional trailing fields are all-or-nothing
            while tokens and tokens[-1] is None:
                tokens.pop()
            msg = "Optional fields must be given together"
            assert None not in tokens, msg
            out.append(' '.join(tokens))
    return '\n'.join(out) + '\n'


def write_case(case, path):
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(format_case(case))


def validate_case(case):
    """ Check every structural invariant of a case, raising
    `CaseValidationError` naming the first violated one.
    """
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    known = set(ids)
    n_slack = sum(b.kind == 'slack' for b in case.buses)
    if n_slack == 0:
        raise CaseValidationError("no slack bus")
    if n_slack > 1:
        raise CaseValidationError("multiple slack buses")
    for b in case.buses:
        if not b.v_min < b.v_max:
            msg = "bus %i has v_min >= v_max" % b.id
            raise CaseValidationError(msg)
    if case.base_mva <= 0:
        raise CaseValidationError("base power must be positive")

    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                msg = "branch %i-%i references unknown bus %i" % (
                    br.from_bus, br.to_bus, end)
                raise CaseValidationError(msg)
        if br.from_bus == br.to_bus:
            msg = "branch %i-%i connects a bus to itself" % (
                br.from_bus, br.to_bus)
            raise CaseValidationError(msg)
        if br.r == 0 and br.x == 0:
            msg = "branch %i-%i has zero impedance" % (br.from_bus, br.to_bus)
            raise CaseValidationError(msg)

    kinds = {b.id: b.kind for b in case.buses}
    machine_buses = set()
    for m in case.machines:
        if m.bus not in known:
            msg = "machine references unknown bus %i" % m.bus
            raise CaseValidationError(msg)
        if m.bus in machine_buses:
            msg = "more than one machine at bus %i" % m.bus
            raise CaseValidationError(msg)
        machine_buses.add(m.bus)
        if kinds[m.bus] == 'pq':
            msg = "machine at bus %i sits on a pq bus" % m.bus
            raise CaseValidationError(msg)
        if not (m.h > 0 and m.x_d > 0 and m.x_q > 0):
            msg = "machine at bus %i needs H, x'_d, x'_q > 0" % m.bus
            raise CaseValidationError(msg)
    for b in case.buses:
        if b.kind == 'pv' and b.id not in machine_buses:
            msg = "pv bus %i carries no machine" % b.id
            raise CaseValidationError(msg)

    avr_buses = set()
    for a in case.avrs:
        if a.bus not in machine_buses:
            msg = "AVR at bus %i has no machine" % a.bus
            raise CaseValidationError(msg)
        if a.bus in avr_buses:
            msg = "more than one AVR at bus %i" % a.bus
            raise CaseValidationError(msg)
        avr_buses.add(a.bus)
        if min(a.t_r, a.t_a, a.t_e, a.t_f) <= 0:
            msg = "AVR at bus %i has a non-positive time constant" % a.bus
            raise CaseValidationError(msg)

    pss_buses = set()
    for s in case.psss:
        if s.bus not in avr_buses:
            msg = "PSS at bus %i needs a machine with an AVR" % s.bus
            raise CaseValidationError(msg)
        if s.bus in pss_buses:
            msg = "more than one PSS at bus %i" % s.bus
            raise CaseValidationError(msg)
        pss_buses.add(s.bus)
        if min(s.t_w, s.t_2, s.t_4) <= 0:
            msg = "PSS at bus %i needs T_w, T_2, T_4 > 0" % s.bus
            raise CaseValidationError(msg)
        if (s.k_min is None) != (s.k_max is None):
            msg = "PSS at bus %i gives only one gain bound" % s.bus
            raise CaseValidationError(msg)

    dr_buses = set()
    for rec in case.dr.records:
        if rec.bus not in known:
            msg = "DR record references unknown bus %i" % rec.bus
            raise CaseValidationError(msg)
        if rec.bus in dr_buses:
            msg = "bus %i listed twice in [DR]" % rec.bus
            raise CaseValidationError(msg)
        dr_buses.add(rec.bus)
        p_d0 = case.buses[ids.index(rec.bus)].p_d0
        if not rec.p_min <= p_d0 <= rec.p_max:
            msg = "DR bus %i violates p_min <= p_d0 <= p_max" % rec.bus
            raise CaseValidationError(msg)

    position = {b: i for i, b in enumerate(ids)}
    rows = [position[br.from_bus] for br in case.branches]
    cols = [position[br.to_bus] for br in case.branches]
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)),
                       shape=(len(ids), len(ids)))
    n_parts, _ = connected_components(graph, directed=False)
    if n_parts != 1:
        raise CaseValidationError("network graph is not connected")
    return case


def branch_admittances(br):
    """ Two-port admittances ``(y_ff, y_ft, y_tf, y_tt)`` of a pi-model branch
    in per unit.

    >>> y = branch_admittances(BranchRecord(1, 2, 0.0, 0.1, 0.2))
    >>> float(y[0].imag), float(y[1].imag)
    (-9.9, 10.0)
    """
    z = complex(br.r, br.x)
    if z == 0:
        msg = "branch %i-%i has zero impedance" % (br.from_bus, br.to_bus)
        raise CaseValidationError(msg)
    y = 1.0 / z
    shunt = 0.5j * br.b
    return y + shunt, -y, -y, y + shunt


def admittance(case):
    """ Bus admittance matrix in per unit.

    Every branch adds its two-port admittances (see `branch_admittances`)
    and the diagonal collects the bus shunts.

    >>> case = SystemCase(100.0, (BusRecord(1, 'slack', 1, 0, 0, .9, 1.1),
    ...                           BusRecord(2, 'pq', 1, 0, 0, .9, 1.1)),
    ...                   (BranchRecord(1, 2, 0.0, 0.1, 0.0),))
    >>> complex(admittance(case)[0, 1])
    10j
    """
    n = case.n_bus
    pos = case.bus_position
    ybus = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        y_ff, y_ft, y_tf, y_tt = branch_admittances(br)
        i, j = pos[br.from_bus], pos[br.to_bus]
        ybus[i, i] += y_ff
        ybus[j, j] += y_tt
        ybus[i, j] += y_ft
        ybus[j, i] += y_tf
    for i, b in enumerate(case.buses):
        ybus[i, i] += complex(b.g_sh, b.b_sh) / case.base_mva
    return ybus
