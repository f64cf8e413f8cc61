import math
import random
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from opssc.cost import (
    CONVENTIONAL,
    MODEL1,
    PROPOSED,
    DEFAULT_PARAMS,
    CostParamError,
    CostParams,
    c_ops,
    c_ops_adj,
    c_plc_adj,
    learning_sum,
    learning_sum_closed,
    reduction_ratio,
    round_half_up,
    rows_to_csv,
    sweep,
    total_cost,
)


# --- oracle: straight k-loop, no shared helpers ----------------------------

def brute(method, n, N_org=7, N_node=2, a=0.95, plc_p=79.0, plc_a=5.6, ops_p=13.0,
          ops_a=2.4, exec_u=6.7, trig=0.8, dev=32.9):
    total = plc_p + (N_org - 1) * plc_a
    if method == "proposed":
        total += dev
    for k in range(1, n + 1):
        w = a ** (k - 1)
        if method == "conventional":
            total += w * (ops_p + (N_org - 1) * ops_a + N_org * N_node * exec_u)
        else:
            total += w * trig
    return total


def test_component_values():
    assert c_plc_adj(DEFAULT_PARAMS) == pytest.approx(112.6)
    assert c_ops_adj(DEFAULT_PARAMS) == pytest.approx(27.4)
    assert c_ops(DEFAULT_PARAMS, CONVENTIONAL) == pytest.approx(93.8)
    assert c_ops(DEFAULT_PARAMS, PROPOSED) == pytest.approx(0.8)


def test_headline_raw_values_against_oracle():
    conv, prop = total_cost(DEFAULT_PARAMS, CONVENTIONAL), total_cost(DEFAULT_PARAMS, PROPOSED)
    assert conv == pytest.approx(brute("conventional", 4), rel=1e-6)
    assert prop == pytest.approx(brute("proposed", 4), rel=1e-6)
    # frozen from the oracle
    assert conv == pytest.approx(562.2368, abs=1e-3)
    assert prop == pytest.approx(148.4679, abs=1e-3)


def test_headline_rounded():
    row = sweep(DEFAULT_PARAMS, [4])[0]
    assert row.conventional_h == Decimal("9.4")
    assert row.proposed_h == Decimal("2.5")
    assert row.reduction_pct == Decimal("74")
    assert reduction_ratio(DEFAULT_PARAMS) == pytest.approx(0.7359, abs=1e-4)


def test_small_n():
    assert total_cost(DEFAULT_PARAMS.with_(n=0), CONVENTIONAL) == pytest.approx(112.6)
    assert total_cost(DEFAULT_PARAMS.with_(n=0), PROPOSED) == pytest.approx(145.5)
    assert total_cost(DEFAULT_PARAMS.with_(n=1), CONVENTIONAL) == pytest.approx(233.8)
    assert total_cost(DEFAULT_PARAMS.with_(n=1), PROPOSED) == pytest.approx(146.3)


def test_large_n_limit():
    p = DEFAULT_PARAMS.with_(n=1000)
    limit = 112.6 + (27.4 + 93.8) / 0.05
    assert total_cost(p, CONVENTIONAL) == pytest.approx(limit, rel=1e-9)
    assert total_cost(p, CONVENTIONAL) == pytest.approx(brute("conventional", 1000), rel=1e-9)


@pytest.mark.parametrize("a", [0.5, 0.95, 1.0])
@pytest.mark.parametrize("n", [0, 1, 10, 1000])
def test_geometric_sum_forms_agree(a, n):
    assert learning_sum(a, n) == pytest.approx(learning_sum_closed(a, n), rel=1e-9, abs=1e-9)


def test_round_half_up():
    assert round_half_up(0.25) == Decimal("0.3")
    assert round_half_up(0.35) == Decimal("0.4")
    assert round_half_up(2.45) == Decimal("2.5")
    assert round_half_up(73.5, 0) == Decimal("74")


def test_model1_needs_pair_units():
    with pytest.raises(CostParamError):
        c_plc_adj(DEFAULT_PARAMS, MODEL1)
    p = DEFAULT_PARAMS.with_(C_plc_pair_unit=2.0, C_ops_pair_unit=1.0)
    assert c_plc_adj(p, MODEL1) == 21 * 2.0
    assert c_ops_adj(p, MODEL1) == 21 * 1.0


def test_param_validation():
    with pytest.raises(CostParamError):
        CostParams(a=0)
    with pytest.raises(CostParamError):
        CostParams(n=-1)
    with pytest.raises(CostParamError):
        CostParams(C_exec_unit=-1)
    with pytest.raises(CostParamError):
        CostParams.from_mapping({"bogus": 1})
    with pytest.raises(CostParamError):
        CostParams.from_mapping({"n": 1.5})
    assert CostParams.from_mapping(DEFAULT_PARAMS.to_dict()) == DEFAULT_PARAMS


def test_csv_output():
    text = rows_to_csv(sweep(DEFAULT_PARAMS, range(0, 3)))
    lines = text.splitlines()
    assert lines[0] == "n,conventional_mm,proposed_mm,conventional_h,proposed_h,reduction,reduction_pct"
    assert len(lines) == 4
    only = rows_to_csv(sweep(DEFAULT_PARAMS, [4]), [PROPOSED]).splitlines()
    assert only[0] == "n,proposed_mm,proposed_h"


UNITS = ["C_plc_prop_unit", "C_plc_appr_unit", "C_ops_prop_unit", "C_ops_appr_unit",
         "C_exec_unit", "C_trigger_unit", "C_dev_sc"]

params = st.builds(
    CostParams,
    n=st.integers(0, 60),
    N_org=st.integers(1, 20),
    N_node=st.integers(1, 10),
    a=st.floats(0.05, 1.0),
    **{u: st.floats(0, 200) for u in UNITS},
)


@settings(max_examples=1000, deadline=None)
@given(params, st.sampled_from([CONVENTIONAL, PROPOSED]), st.sampled_from(UNITS), st.floats(0.01, 50))
def test_monotone_in_n_and_units(p, method, unit, bump):
    base = total_cost(p, method)
    assert total_cost(p.with_(n=p.n + 1), method) >= base
    assert total_cost(p.with_(**{unit: getattr(p, unit) + bump}), method) >= base
    assert base == pytest.approx(brute(method, p.n, p.N_org, p.N_node, p.a, p.C_plc_prop_unit,
                                       p.C_plc_appr_unit, p.C_ops_prop_unit, p.C_ops_appr_unit,
                                       p.C_exec_unit, p.C_trigger_unit, p.C_dev_sc),
                                 rel=1e-9, abs=1e-9)


def test_random_sweep_monotone():
    rng = random.Random(2024)
    for _ in range(1000):
        p = CostParams(n=rng.randrange(0, 50), N_org=rng.randrange(1, 15), N_node=rng.randrange(1, 6),
                       a=rng.uniform(0.05, 1.0),
                       **{u: rng.uniform(0, 100) for u in UNITS})
        for method in (CONVENTIONAL, PROPOSED):
            c = [total_cost(p.with_(n=k), method) for k in range(p.n, p.n + 3)]
            assert c == sorted(c)
            assert not any(math.isnan(x) for x in c)


def test_scaling_all_units_scales_the_saving():
    scaled = DEFAULT_PARAMS.with_(**{u: getattr(DEFAULT_PARAMS, u) * 10 for u in UNITS})
    saving_h = (total_cost(scaled, CONVENTIONAL) - total_cost(scaled, PROPOSED)) / 60
    assert round_half_up(saving_h, 0) == Decimal("69")
