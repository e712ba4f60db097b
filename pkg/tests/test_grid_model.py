import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from gridsim.errors import CaseError
from gridsim.grid_model import (
    PerturbScope,
    PerturbSpec,
    branch_admittances,
    case_from_dict,
    case_to_dict,
    load_case,
    perturb_case,
    save_case,
)
from gridsim.power_flow import admittance_matrices


def _document(**overrides):
    doc = {
        "base_mva": 100.0,
        "buses": [
            {"index": 1, "kind": "slack", "p_load": 0.0, "q_load": 0.0, "p_gen": 0.0, "v_setpoint": 1.0},
            {"index": 2, "kind": "pq", "p_load": 0.5, "q_load": 0.1, "p_gen": 0.0, "v_setpoint": 1.0},
        ],
        "branches": [{"from": 1, "to": 2, "r": 0.01, "x": 0.1, "b_shunt": 0.0}],
    }
    doc.update(overrides)
    return doc


def test_embedded_cases_load(case3, case14):
    assert (case3.n_bus, case3.n_branch) == (3, 3)
    assert (case14.n_bus, case14.n_branch) == (14, 20)
    assert case14.slack_bus == 1
    assert case14.slack_position == 0


def test_positions_follow_document_order(case14):
    assert case14.position(1) == 0
    assert case14.position(14) == 13
    with pytest.raises(CaseError, match="unknown bus"):
        case14.position(99)


def test_neighbors(case14):
    assert case14.neighbors(1) == [2, 5]


def test_zero_reactance_rejected():
    doc = _document(branches=[{"from": 1, "to": 2, "r": 0.01, "x": 0.0, "b_shunt": 0.0}])
    with pytest.raises(CaseError, match="zero reactance"):
        case_from_dict(doc)


def test_missing_slack_rejected():
    doc = _document()
    doc["buses"][0]["kind"] = "pv"
    with pytest.raises(CaseError, match="missing slack"):
        case_from_dict(doc)


def test_disconnected_graph_rejected():
    doc = _document()
    doc["buses"].append({"index": 3, "kind": "pq", "p_load": 0.1, "q_load": 0.0, "p_gen": 0.0, "v_setpoint": 1.0})
    with pytest.raises(CaseError, match="disconnected"):
        case_from_dict(doc)


def test_schema_violation_names_the_entry():
    doc = _document()
    del doc["branches"][0]["x"]
    with pytest.raises(CaseError, match="branch entry 0 missing x"):
        case_from_dict(doc)


def test_unknown_case_name():
    with pytest.raises(CaseError, match="not found"):
        load_case("case9999")


def test_save_and_reload(tmp_path, case14):
    path = save_case(case14, tmp_path / "copy.json")
    again = load_case(path)
    assert case_to_dict(again) == case_to_dict(case14)
    assert again.fingerprint == case14.fingerprint


def test_branch_admittances(case3):
    g_b = branch_admittances(case3)
    assert_allclose(g_b[:, 0], 0.0)
    assert_allclose(g_b[:, 1], -1.0 / case3.x)
    assert_allclose(np.abs(g_b[:, 1]), [35.59, 32.89, 92.59], atol=0.01)


def test_branch_admittances_of_equal_r_and_x():
    doc = _document(branches=[{"from": 1, "to": 2, "r": 0.1, "x": 0.1, "b_shunt": 0.0}])
    assert_allclose(branch_admittances(case_from_dict(doc, "two-bus")), [[5.0, -5.0]])


def test_zero_delta_returns_same_case(case14):
    assert perturb_case(case14, PerturbSpec(delta=0.0, seed=3)) is case14


def test_perturbation_is_deterministic(case14):
    a = perturb_case(case14, PerturbSpec(delta=0.2, seed=3))
    b = perturb_case(case14, PerturbSpec(delta=0.2, seed=3))
    assert_allclose(a.x, b.x)
    assert a.id == "case14-d0.2-s3"
    assert a.fingerprint == case14.fingerprint


def test_x_only_scope_keeps_resistance(case14):
    star = perturb_case(case14, PerturbSpec(delta=0.3, seed=1, scope=PerturbScope.X_ONLY))
    assert_allclose(star.r, case14.r)
    assert not np.allclose(star.x, case14.x)


def test_delta_out_of_range():
    with pytest.raises(ValueError):
        PerturbSpec(delta=1.5)


@settings(max_examples=30, deadline=None)
@given(delta=st.floats(min_value=0.0, max_value=0.9), seed=st.integers(min_value=0, max_value=2**31))
def test_perturbation_stays_in_envelope(delta, seed):
    case = load_case("case14")
    star = perturb_case(case, PerturbSpec(delta=delta, seed=seed))
    for nominal, perturbed in ((case.x, star.x), (case.r, star.r)):
        assert np.all(np.abs(perturbed - nominal) <= delta * np.abs(nominal) + 1e-12)
    assert np.all(star.x != 0.0)


def test_bus_shunt_reaches_the_admittance_matrix(tmp_path, case14):
    pos = case14.position(9)
    assert case14.bus_shunt[pos] == pytest.approx(0.19)
    assert np.count_nonzero(case14.bus_shunt) == 1
    document = case_to_dict(case14)
    for bus in document["buses"]:
        bus.pop("b_shunt")
    plain = case_from_dict(document)
    diff = admittance_matrices(case14).ybus - admittance_matrices(plain).ybus
    assert diff[pos, pos] == pytest.approx(0.19j)
    assert np.count_nonzero(diff) == 1
    again = load_case(save_case(case14, tmp_path / "case14.json"))
    assert again.bus_shunt[pos] == pytest.approx(0.19)
