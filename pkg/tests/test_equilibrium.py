import numpy as np
import pytest

from helpers import h_spec, random_gains, random_spec
from mixedlq.equilibrium import (
    NO, NOT_REQUESTED, STATE_DEPENDENT, YES, EquilibriumPolicy, assumption_H_check, build_policy,
    classify_existence, stage_checks, stationarity_residual, uniqueness_check,
)
from mixedlq.linalg import min_eig_sym
from mixedlq.model import builtin_example, make_problem, one_step_problem
from mixedlq.recursions import BackwardTables, feedback_backward, mixed_backward, open_loop_backward
from mixedlq.reference import LAST_CASE_GAINS, MIXED_CASES, case_gains
from mixedlq.simulate import NoiseModel, sample_paths


def test_example_open_and_feedback_do_not_exist():
    rep = classify_existence(builtin_example(), scope="all")
    assert rep.open_exists == NO
    assert rep.feedback_exists == NO
    assert rep.mixed_exists_for_given_phi == NOT_REQUESTED
    stages = rep.details["open"].stages
    assert not stages[1].convexity_psd


@pytest.mark.parametrize("case", range(len(MIXED_CASES)))
def test_example_mixed_exists_for_every_listed_gain(case):
    rep = classify_existence(builtin_example(), scope="all", feedback_gain=case_gains(case))
    assert rep.mixed_exists_for_given_phi == YES
    checks = rep.details["mixed"].stages
    assert all(c.convexity_pd and c.stationarity_invertible for c in checks)
    assert rep.details["mixed"].label == "mixed"


def test_example_uniqueness_and_sign_conditions():
    spec = builtin_example()
    u = uniqueness_check(spec)
    assert u["open_unique"] == NO and u["feedback_unique"] == NO
    h = assumption_H_check(spec)
    assert not h["holds"] and not h["R_pd"] and not h["Q_psd"]
    assert h["G_psd"]


def test_one_step_problem_unique_both_ways():
    u = uniqueness_check(one_step_problem())
    assert u["open_unique"] == YES and u["feedback_unique"] == YES
    assert u["open_convexity_min_eig"] == [2.0] and u["feedback_convexity_min_eig"] == [2.0]


def test_sign_conditions_trivial_spec():
    spec = make_problem(2, 2, 1, 3, R=np.eye(2))
    assert assumption_H_check(spec)["holds"]


@pytest.mark.parametrize("seed", range(20))
def test_sign_conditions_imply_unique_feedback(seed):
    rng = np.random.default_rng(seed)
    spec = h_spec(rng)
    assert assumption_H_check(spec)["holds"]
    fb = feedback_backward(spec)
    assert all(min_eig_sym(fb.convexity[k]) > 0 for k in range(spec.N))
    assert uniqueness_check(spec)["feedback_unique"] == YES


def test_build_policy_last_case_gains():
    tab = mixed_backward(builtin_example(), case_gains(9))
    pol = build_policy(tab)
    assert pol.kind == "mixed"
    assert np.max(np.abs(pol.gain[:, 0, :] - np.array(LAST_CASE_GAINS))) <= 1e-3
    assert not np.any(pol.offset)
    assert np.array_equal(pol.feedback_gain, case_gains(9))


def test_build_policy_one_step_feedback():
    pol = build_policy(feedback_backward(one_step_problem()))
    assert pol.gain[0, 0, 0] == -0.5 and pol.offset[0, 0] == 0.0
    assert not np.any(pol.open_loop_gain)


def test_open_policy_has_no_feedback_part():
    pol = build_policy(open_loop_backward(random_spec(np.random.default_rng(1))))
    assert not np.any(pol.feedback_gain)


def test_policy_document_round_trip():
    spec = builtin_example()
    pol = build_policy(mixed_backward(spec, case_gains(3), t=1))
    doc = pol.to_dict()
    assert doc["t"] == 1 and len(doc["K"]) == 3
    again = EquilibriumPolicy.from_dict(doc, spec)
    assert np.array_equal(again.gain, pol.gain) and np.array_equal(again.offset, pol.offset)
    doc["K"][0][0][0] += 1.0
    with pytest.raises(ValueError, match="K"):
        EquilibriumPolicy.from_dict(doc, spec)
    with pytest.raises(ValueError):
        EquilibriumPolicy.from_dict({"t": 0, "Phi": [], "Gamma": [], "c": []}, spec)


def test_residual_zero_when_invertible():
    rng = np.random.default_rng(2)
    spec = random_spec(rng)
    tab = mixed_backward(spec, random_gains(rng, spec))
    pol = build_policy(tab)
    X = rng.standard_normal((50, spec.n))
    for k in tab.stages:
        assert np.abs(stationarity_residual(pol, tab, X, k)).max() <= 1e-9


def test_residual_projects_onto_kernel():
    spec = make_problem(2, 2, 1, 1)
    tab = BackwardTables.empty("open", spec, 0, None)
    tab.stationarity[0] = np.diag([1.0, 0.0])
    tab.state_coupling[0] = np.eye(2)
    tab.offset_term[0] = [0.5, -0.25]
    tab.open_loop_gain[0] = -np.diag([1.0, 0.0])
    tab.offset[0] = [-0.5, 0.0]
    pol = build_policy(tab)
    a, b = np.array([1.5, 2.0]), np.array([0.5, -0.25])
    X = a - b
    r = stationarity_residual(pol, tab, X, 0)
    assert np.allclose(r, [0.0, a[1]])


def test_residual_along_simulated_example_path():
    spec = builtin_example()
    tab = mixed_backward(spec, case_gains(9))
    pol = build_policy(tab)
    paths = sample_paths(spec, pol, 0, np.ones(2), NoiseModel("gaussian", spec.delta), 20, 5)
    for k in range(4):
        assert np.abs(stationarity_residual(pol, tab, paths.states[:, k], k)).max() <= 1e-10


def test_gain_matches_pinv_identity_per_run():
    rng = np.random.default_rng(3)
    spec = builtin_example()
    for _ in range(3):
        tab = mixed_backward(spec, rng.standard_normal((4, 1, 2)))
        for k in range(4):
            O, L = tab.stationarity[k], tab.state_coupling[k]
            assert np.allclose(tab.closed_loop_gain[k], -np.linalg.pinv(O) @ L, atol=1e-10)


def test_time_consistency_along_path():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, N=4)
    gains = random_gains(rng, spec)
    full = build_policy(mixed_backward(spec, gains))
    for k in range(1, spec.N):
        tail = build_policy(mixed_backward(spec, gains[k:], t=k))
        assert np.allclose(tail.gain[k:], full.gain[k:], atol=1e-12)
        assert np.allclose(tail.offset[k:], full.offset[k:], atol=1e-12)


def test_mixed_with_feedback_gains_labelled_feedback_compatible():
    spec = h_spec(np.random.default_rng(5), N=3)
    fb = feedback_backward(spec)
    rep = classify_existence(spec, feedback_gain=fb.feedback_gain)
    assert rep.feedback_exists == YES and rep.feedback_unique == YES and rep.H_holds == YES
    assert rep.mixed_exists_for_given_phi == YES
    assert rep.details["mixed"].label == "feedback-compatible"


def _singular_stationarity_problem():
    # stationarity operator 0 and state coupling 1 at the only stage
    return make_problem(1, 1, 1, 1, B=[[1.0]], F=[[1.0]])


def test_fixed_pair_state_dependent_verdicts():
    spec = _singular_stationarity_problem()
    assert classify_existence(spec, scope="all").open_exists == NO
    at_zero = classify_existence(spec, scope="fixed", t=0, x=[0.0])
    assert at_zero.open_exists == STATE_DEPENDENT
    assert at_zero.details["open"].violating_samples == 0
    assert classify_existence(spec, scope="fixed", t=0, x=[1.0]).open_exists == NO


def test_all_pairs_yes_implies_fixed_pair_yes():
    rng = np.random.default_rng(6)
    spec = h_spec(rng, N=3)
    gains = random_gains(rng, spec)
    everywhere = classify_existence(spec, feedback_gain=gains)
    for t in range(spec.N):
        here = classify_existence(spec, scope="fixed", t=t, x=rng.standard_normal(spec.n), feedback_gain=gains)
        for key, verdict in everywhere.verdicts().items():
            if verdict == YES and key.endswith("exists") or key == "mixed_exists_for_given_phi" and verdict == YES:
                assert here.verdicts()[key] == YES, key


def test_classification_argument_errors():
    spec = builtin_example()
    with pytest.raises(ValueError):
        classify_existence(spec, scope="fixed")
    with pytest.raises(ValueError):
        classify_existence(spec, scope="bogus")
    with pytest.raises(ValueError):
        classify_existence(spec, scope="fixed", x=[1.0, 2.0, 3.0])


def test_report_serializes():
    import json
    rep = classify_existence(builtin_example(), feedback_gain=case_gains(0))
    doc = json.loads(json.dumps(rep.to_dict()))
    assert doc["verdicts"]["open_exists"] == NO
    assert len(doc["details"]["mixed"]["stages"]) == 4


def test_stage_checks_record_asymmetry():
    tab = mixed_backward(builtin_example(), case_gains(0))
    checks = stage_checks(tab)
    assert [c.stage for c in checks] == [0, 1, 2, 3]
    assert all(c.stationarity_asymmetry == 0.0 for c in checks)  # scalar control
    rng = np.random.default_rng(7)
    spec = random_spec(rng, m=2, N=3)
    tab = mixed_backward(spec, random_gains(rng, spec))
    assert max(c.stationarity_asymmetry for c in stage_checks(tab)) > 0
