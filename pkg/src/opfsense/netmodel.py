"""MATPOWER-style case parsing and per-unit network model.

Supports the numeric-matrix subset of the MATPOWER case format (bus, gen,
branch, gencost tables). All quantities are converted to per-unit on the
system MVA base. The admittance matrix uses the standard branch Pi-model
with off-nominal taps and phase shifts.
"""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

SLACK, GENERATOR, LOAD, ZERO_INJECTION = "slack", "generator", "load", "zero-injection"

# column counts we actually consume from each MATPOWER table
_BUS_COLS = 13
_GEN_COLS = 10
_BRANCH_COLS = 13


class CaseParseError(ValueError):
    """Malformed case text; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NetworkValidationError(ValueError):
    pass


@dataclass
class Bus:
    id: int
    kind: str
    pd: float
    qd: float
    vmin: float
    vmax: float
    gsh: float = 0.0
    bsh: float = 0.0


@dataclass
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charge: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    imax: float | None = None  # squared-current limit in pu, None = unlimited


@dataclass
class Generator:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cp: float = 0.0  # $/pu active power
    cq: float = 0.0  # $/pu reactive power
    vg: float = 1.0


@dataclass
class Network:
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    slack_bus: int = 0
    ybus: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._index = {b.id: i for i, b in enumerate(self.buses)}
        if self.ybus is None:
            self.ybus = build_ybus(self)

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_gen(self):
        return len(self.generators)

    def bus_index(self, bus_id):
        return self._index[bus_id]

    @property
    def gen_bus_indices(self):
        return [self.bus_index(g.bus) for g in self.generators]

    @property
    def load_bus_indices(self):
        gen_set = {g.bus for g in self.generators}
        return [i for i, b in enumerate(self.buses) if b.id not in gen_set]

    @property
    def slack_index(self):
        return self.bus_index(self.slack_bus)

    def gen_at(self, bus_id):
        for g in self.generators:
            if g.bus == bus_id:
                return g
        return None


# ---------------------------------------------------------------------------
# case text parsing


def _strip_comments(text):
    lines = []
    for raw in text.splitlines():
        lines.append(raw.split("%")[0])
    return lines


def _extract_tables(lines):
    """Find ``mpc.<name> = [...]`` blocks and scalar assignments."""
    tables = {}
    scalars = {}
    name = None
    rows = []
    start_line = 0
    buf = ""
    for lineno, line in enumerate(lines, start=1):
        if name is None:
            m = re.match(r"\s*mpc\.(\w+)\s*=\s*\[(.*)", line)
            if m:
                name, rest = m.group(1), m.group(2)
                rows, buf, start_line = [], "", lineno
                line = rest
            else:
                m = re.match(r"\s*mpc\.(\w+)\s*=\s*([^;\[]+);", line)
                if m:
                    scalars[m.group(1)] = m.group(2).strip().strip("'\"")
                continue
        # inside a table
        closed = "]" in line
        body = line.split("]")[0]
        buf += " " + body
        while ";" in buf:
            row, buf = buf.split(";", 1)
            if row.strip():
                rows.append((row, lineno))
        if closed:
            if buf.strip():
                rows.append((buf, lineno))
            tables[name] = rows
            name, buf = None, ""
    if name is not None:
        raise CaseParseError(f"table mpc.{name} never closed", line=start_line)
    return tables, scalars


def _table_array(tables, name, min_cols, required=True):
    if name not in tables:
        if required:
            raise CaseParseError(f"missing table mpc.{name}")
        return None
    parsed = []
    width = None
    for row, lineno in tables[name]:
        try:
            vals = [float(tok) for tok in row.replace(",", " ").split()]
        except ValueError as exc:
            raise CaseParseError(f"non-numeric entry in mpc.{name}: {exc}", line=lineno)
        if len(vals) < min_cols:
            raise CaseParseError(
                f"mpc.{name} row has {len(vals)} columns, expected >= {min_cols}", line=lineno
            )
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise CaseParseError(f"ragged row in mpc.{name}", line=lineno)
        parsed.append(vals)
    return np.array(parsed)


def parse_case(text, cost_mode="reject", flow_limit="current", strip_gen_bus_loads=False):
    """Parse MATPOWER case text into a validated per-unit :class:`Network`.

    cost_mode: how to treat quadratic gencost terms, 'reject' or
        'linearize-at-midpoint' (slope of the quadratic at the dispatch
        midpoint (pmin+pmax)/2 is folded into the linear coefficient).
    flow_limit: 'current' converts RATE_A (MVA) into a squared-current
        limit evaluated at the from-bus vmin; 'off' drops flow limits.
    strip_gen_bus_loads: zero out demands at generator buses instead of
        rejecting the case.
    """
    if cost_mode not in ("reject", "linearize-at-midpoint"):
        raise ValueError(f"unknown cost_mode {cost_mode!r}")
    if flow_limit not in ("current", "off"):
        raise ValueError(f"unknown flow_limit {flow_limit!r}")

    lines = _strip_comments(text)
    tables, scalars = _extract_tables(lines)
    if "baseMVA" not in scalars:
        raise CaseParseError("missing mpc.baseMVA")
    base = float(scalars["baseMVA"])
    if base <= 0:
        raise CaseParseError("baseMVA must be positive")

    bus_arr = _table_array(tables, "bus", _BUS_COLS)
    gen_arr = _table_array(tables, "gen", _GEN_COLS)
    branch_arr = _table_array(tables, "branch", _BRANCH_COLS)
    cost_arr = _table_array(tables, "gencost", 4, required=False)

    gen_buses = [int(row[0]) for row in gen_arr]
    if len(set(gen_buses)) != len(gen_buses):
        raise NetworkValidationError("more than one generator at a bus is not supported")

    buses = []
    slack_ids = []
    for row in bus_arr:
        bus_id, bus_type = int(row[0]), int(row[1])
        pd, qd = row[2] / base, row[3] / base
        gs, bs = row[4] / base, row[5] / base
        vmax, vmin = row[11], row[12]
        if vmin >= vmax:
            raise NetworkValidationError(f"bus {bus_id}: vmin {vmin} >= vmax {vmax}")
        if bus_type == 3:
            kind = SLACK
            slack_ids.append(bus_id)
        elif bus_id in gen_buses:
            kind = GENERATOR
        elif pd == 0.0 and qd == 0.0:
            kind = ZERO_INJECTION
        else:
            kind = LOAD
        if kind in (SLACK, GENERATOR) and (pd != 0.0 or qd != 0.0):
            if strip_gen_bus_loads:
                pd = qd = 0.0
            else:
                raise NetworkValidationError(
                    f"bus {bus_id} hosts both a generator and a load; "
                    "pass strip_gen_bus_loads=True to zero the demand"
                )
        buses.append(Bus(bus_id, kind, pd, qd, vmin, vmax, gs, bs))

    if len(slack_ids) != 1:
        raise NetworkValidationError(f"expected exactly one slack bus, found {len(slack_ids)}")
    bus_ids = {b.id for b in buses}
    if slack_ids[0] not in gen_buses:
        warnings.warn("slack bus hosts no generator; OPF assembly will reject this case")

    vmin_of = {b.id: b.vmin for b in buses}
    branches = []
    for row in branch_arr:
        f, t = int(row[0]), int(row[1])
        if f not in bus_ids or t not in bus_ids:
            raise NetworkValidationError(f"branch {f}-{t} references unknown bus")
        if f == t:
            raise NetworkValidationError(f"branch {f}-{t} is a self-loop")
        status = row[10]
        if status == 0:
            continue
        r, x, bc = row[2], row[3], row[4]
        if r == 0.0 and x == 0.0:
            raise NetworkValidationError(f"branch {f}-{t} has zero impedance")
        tap = row[8] if row[8] != 0.0 else 1.0
        shift = math.radians(row[9])
        imax = None
        if flow_limit == "current" and row[5] > 0:
            s_pu = row[5] / base
            imax = (s_pu / vmin_of[f]) ** 2
        branches.append(Branch(f, t, r, x, bc, tap, shift, imax))

    generators = []
    for k, row in enumerate(gen_arr):
        if row[7] <= 0:  # status
            continue
        cp = cq = 0.0
        g = Generator(
            bus=int(row[0]),
            pmin=row[9] / base,
            pmax=row[8] / base,
            qmin=row[4] / base,
            qmax=row[3] / base,
            vg=row[5],
        )
        if g.bus not in bus_ids:
            raise NetworkValidationError(f"generator at unknown bus {g.bus}")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            raise NetworkValidationError(f"generator at bus {g.bus} has inverted limits")
        if cost_arr is not None and k < len(cost_arr):
            cp, _ = _gen_cost(cost_arr[k], g, base, cost_mode)
            # MATPOWER appends reactive-cost rows after the active-cost block
            if len(cost_arr) >= 2 * len(gen_arr):
                cq, _ = _gen_cost(cost_arr[len(gen_arr) + k], g, base, cost_mode)
        g.cp, g.cq = cp, cq
        generators.append(g)
    if not generators:
        raise NetworkValidationError("case has no in-service generators")

    net = Network(base, buses, branches, generators, slack_bus=slack_ids[0])
    validate(net)
    return net


def _gen_cost(row, gen, base, cost_mode):
    model, ncost = int(row[0]), int(row[3])
    if model != 2:
        raise NetworkValidationError("only polynomial (model 2) gencost is supported")
    coeffs = row[4 : 4 + ncost]  # highest order first, $/MWh^k
    cq = 0.0
    if ncost <= 1:
        return 0.0, cq
    if ncost == 2:
        return coeffs[0] * base, cq
    c2, c1 = coeffs[-3], coeffs[-2]
    if c2 != 0.0:
        if cost_mode == "reject":
            raise NetworkValidationError(
                "quadratic gencost not supported (use cost_mode='linearize-at-midpoint')"
            )
        midpoint = 0.5 * (gen.pmin + gen.pmax) * base  # MW
        c1 = c1 + 2.0 * c2 * midpoint
    if any(c != 0.0 for c in coeffs[:-3]):
        raise NetworkValidationError("gencost polynomial degree > 2 is not supported")
    return c1 * base, cq


def validate(net):
    """Connectivity and structural checks; raises NetworkValidationError."""
    n = net.n_bus
    adj = [[] for _ in range(n)]
    for br in net.branches:
        i, j = net.bus_index(br.from_bus), net.bus_index(br.to_bus)
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    if not seen.all():
        missing = [net.buses[i].id for i in np.flatnonzero(~seen)]
        raise NetworkValidationError(f"disconnected network, unreachable buses {missing}")
    for b in net.buses:
        if b.kind == ZERO_INJECTION and (b.pd != 0 or b.qd != 0):
            raise NetworkValidationError(f"zero-injection bus {b.id} has nonzero demand")
    return net


# ---------------------------------------------------------------------------
# admittance matrix


def build_ybus(net):
    """Stamp the bus admittance matrix (Pi-model with taps/shifts and shunts)."""
    n = len(net.buses)
    index = {b.id: i for i, b in enumerate(net.buses)}
    Y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        i, j = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charge / 2.0
        t = br.tap * np.exp(1j * br.shift)
        Y[i, i] += (ys + bc) / (br.tap**2)
        Y[j, j] += ys + bc
        Y[i, j] += -ys / np.conj(t)
        Y[j, i] += -ys / t
    for b in net.buses:
        i = index[b.id]
        Y[i, i] += complex(b.gsh, b.bsh)
    return Y


def branch_admittances(net):
    """Per-branch (yff, yft, ytf, ytt) so that [if; it] = [yff yft; ytf ytt][vf; vt]."""
    out = []
    for br in net.branches:
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charge / 2.0
        t = br.tap * np.exp(1j * br.shift)
        out.append(((ys + bc) / br.tap**2, -ys / np.conj(t), -ys / t, ys + bc))
    return out


# ---------------------------------------------------------------------------
# canonical JSON serialization


def to_json(net):
    payload = {
        "base_mva": net.base_mva,
        "slack_bus": net.slack_bus,
        "buses": [asdict(b) for b in net.buses],
        "branches": [asdict(b) for b in net.branches],
        "generators": [asdict(g) for g in net.generators],
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def from_json(text):
    payload = json.loads(text)
    net = Network(
        payload["base_mva"],
        [Bus(**b) for b in payload["buses"]],
        [Branch(**b) for b in payload["branches"]],
        [Generator(**g) for g in payload["generators"]],
        slack_bus=payload["slack_bus"],
    )
    return validate(net)


def networks_equal(a, b, tol=0.0):
    return to_json(a) == to_json(b) if tol == 0.0 else _close(a, b, tol)


def _close(a, b, tol):
    da, db = json.loads(to_json(a)), json.loads(to_json(b))

    def cmp(x, y):
        if isinstance(x, dict):
            return x.keys() == y.keys() and all(cmp(x[k], y[k]) for k in x)
        if isinstance(x, list):
            return len(x) == len(y) and all(cmp(u, v) for u, v in zip(x, y))
        if isinstance(x, float) or isinstance(y, float):
            if x is None or y is None:
                return x == y
            return abs(x - y) <= tol * max(1.0, abs(x), abs(y))
        return x == y

    return cmp(da, db)
