"""Shared fixtures: small engineered cases and solved instances."""

import numpy as np
import pytest

from opfsense import case_text
from opfsense.netmodel import parse_case
from opfsense.opf import SolverOptions, solve_opf
from opfsense.qcqp import assemble_qcqp, quad_eval

# Two generators, one load; meshed so losses and reactive support matter.
CASE3 = """
function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	345	1	1.1	0.9;
	2	2	0	0	0	0	1	1.0	0	345	1	1.1	0.9;
	3	1	120	40	0	0	1	1.0	0	345	1	1.1	0.9;
];
mpc.gen = [
	1	80	10	150	-150	1.0	100	1	200	0;
	2	60	10	120	-120	1.0	100	1	150	0;
];
mpc.branch = [
	1	2	0.02	0.08	0.04	250	0	0	0	0	1	-360	360;
	1	3	0.03	0.10	0.03	250	0	0	0	0	1	-360	360;
	2	3	0.025	0.09	0.035	150	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	14	0;
	2	0	0	2	10	0;
];
"""

# Minimal two-bus system: slack generator feeding a single load.
CASE2 = """
function mpc = case2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1.0	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	50	0	100	-100	1.0	100	1	150	0;
];
mpc.branch = [
	1	2	0.01	0.06	0.02	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	20	0;
];
"""

# Lossless variant of the two-bus system (r = 0 on the only line): the
# slack generator must track load changes one for one.
CASE2_LOSSLESS = CASE2.replace("1	2	0.01	0.06", "1	2	0.0	0.06")

# Radial chain 1 -- 2 -- 3 used to construct LICQ-violating instances.
# Bus 1 hosts the slack generator, bus 2 the only load (theta has two
# entries), bus 3 is a leaf with a small expensive generator whose active
# (lower) and reactive (upper) limits bind at the optimum. With the leaf
# injection pinned by its limits, |V3| and the from-end current of line 2-3
# are fixed functions of |V2| alone, so calibrating the bus-3 voltage cap
# (or the flow limit) to the value attained at the capped optimum makes two
# limits co-bind identically in theta: the active gradients become linearly
# dependent while the differentiated KKT system stays consistent.
RADIAL_TPL = """
function mpc = radial
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	230	1	1.1	0.9;
	2	1	{pd2}	{qd2}	0	0	1	1.0	0	230	1	{v2max}	0.9;
	3	1	0	0	0	0	1	1.0	0	230	1	{v3max}	0.9;
];
mpc.gen = [
	1	100	0	300	-300	1.0	100	1	500	0;
	3	0	0	2	-5	1.0	100	1	10	0;
];
mpc.branch = [
	1	2	0.01	0.05	0.02	9000	0	0	0	0	1	-360	360;
	2	3	0.02	0.08	0.02	{rate23}	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	10	0;
	2	0	0	2	50	0;
];
"""


def radial_model(pd2=60.0, qd2=20.0, v2max=1.1, v3max=1.1, rate23=9000.0):
    text = RADIAL_TPL.format(pd2=pd2, qd2=qd2, v2max=v2max, v3max=v3max,
                             rate23=rate23)
    return assemble_qcqp(parse_case(text))


def solve_tight(model, theta=None, tol=1e-10):
    theta = model.theta0 if theta is None else theta
    return solve_opf(model, theta, SolverOptions(tol_kkt=tol, max_iter=300))


def licq_instance(scenario, pd2=60.0, qd2=20.0, v2max=1.05, v3max=1.03):
    """Build one LICQ-violating radial instance and its solved solution.

    scenario: 'vv' co-binds the two voltage caps, 'fv' a flow limit with the
    leaf voltage cap, 'fn' a flow limit with the neighbor voltage cap.
    """
    if scenario == "vv":
        probe = radial_model(pd2=pd2, qd2=qd2, v2max=v2max)
        sol = solve_tight(probe)
        vm3 = float(np.hypot(sol.v[2], sol.v[probe.nb + 2]))
        model = radial_model(pd2=pd2, qd2=qd2, v2max=v2max, v3max=vm3)
    elif scenario == "fv":
        probe = radial_model(pd2=pd2, qd2=qd2, v3max=v3max)
        sol = solve_tight(probe)
        i23 = float(np.sqrt(quad_eval(probe.forms.mi_from, sol.v)[1]))
        model = radial_model(pd2=pd2, qd2=qd2, v3max=v3max,
                             rate23=i23 * 0.9 * 100.0)
    elif scenario == "fn":
        probe = radial_model(pd2=pd2, qd2=qd2, v2max=v2max)
        sol = solve_tight(probe)
        i23 = float(np.sqrt(quad_eval(probe.forms.mi_from, sol.v)[1]))
        model = radial_model(pd2=pd2, qd2=qd2, v2max=v2max,
                             rate23=i23 * 0.9 * 100.0)
    else:
        raise ValueError(scenario)
    return model, solve_tight(model)


@pytest.fixture(scope="session")
def net3():
    return parse_case(CASE3)


@pytest.fixture(scope="session")
def model3(net3):
    return assemble_qcqp(net3)


@pytest.fixture(scope="session")
def sol3(model3):
    sol = solve_tight(model3)
    assert sol.status == "optimal"
    return sol


@pytest.fixture(scope="session")
def net2():
    return parse_case(CASE2)


@pytest.fixture(scope="session")
def model2(net2):
    return assemble_qcqp(net2)


@pytest.fixture(scope="session")
def net_toy():
    return parse_case(case_text("case5toy.m"))


@pytest.fixture(scope="session")
def model_toy(net_toy):
    return assemble_qcqp(net_toy)


@pytest.fixture(scope="session")
def net39():
    return parse_case(case_text("case39ne.m"), strip_gen_bus_loads=True)


@pytest.fixture(scope="session")
def model39(net39):
    return assemble_qcqp(net39)
