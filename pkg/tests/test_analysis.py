import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from visavis import analysis, neural
from visavis.analysis import (AdversarialStateRecord, EvalRecord, adversarial_detect,
                              exhaustive_eval, generalization_report, min_probability_action,
                              misalignment, oracle_match, read_records, summarize, value_error,
                              write_records)
from visavis.exceptions import DistributionMismatch
from visavis.game import legal_actions, mover_outcome, parse_state
from visavis.neural import NetConfig
from visavis.oracle import Solver, solver_for
from visavis.search import NetEvaluator, SearchConfig


def rec(e, visits=0, kl=0.0):
    return EvalRecord("k", 0, 0.0, e, kl, visits)


class OracleEvaluator(NetEvaluator):
    """Uniform priors with exact oracle values."""

    def __init__(self, params=None):
        super().__init__(params)
        self.solver = solver_for("ttt3")

    def _run(self, states):
        return [(np.ones(s.spec.n_actions), float(self.solver.solve(s).value)) for s in states]


def test_misalignment_examples():
    assert misalignment([0.5, 0.5], [0.5, 0.5]) == 0
    assert misalignment([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    assert misalignment([0.0, 1.0, 0.0], [0.2, 0.3, 0.5]) == pytest.approx(-math.log(0.3))
    assert misalignment([1.0, 0.0], [0.0, 1.0]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(DistributionMismatch):
        misalignment([1.0], [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=2, max_size=9),
       st.lists(st.floats(0.01, 10.0), min_size=9, max_size=9))
def test_misalignment_non_negative(p, q):
    p = np.array(p)
    if p.sum() <= 0:
        return
    p = p / p.sum()
    q = np.array(q[:len(p)])
    q = q / q.sum()
    assert misalignment(p, q) >= -1e-12
    assert misalignment(p, p) == pytest.approx(0.0, abs=1e-12)


def test_value_error_range():
    assert value_error(1, -1) == 4
    assert value_error(0, 0.5) == 0.25


def test_summarize_examples():
    s = summarize([rec(0.0)] * 5)
    assert s["mean_error"] == 0 and s["histogram"].share_gt_1 == 0 and s["histogram"].share_gt_3 == 0
    s = summarize([rec(4.0), rec(0.0), rec(0.0), rec(0.0)])
    assert s["histogram"].share_gt_3 == 0.25 and s["histogram"].share_gt_1 == 0.25
    assert s["histogram"].edges == (0, 0.25, 0.5, 1.0, 2.0, 3.0, 3.5, 4.0)
    assert sum(s["histogram"].counts) == 4 and s["histogram"].counts[-1] == 1
    with pytest.raises(ValueError):
        summarize([])


def test_generalization_report_examples():
    r = generalization_report([rec(0.3, 2000), rec(0.3, 5000)])
    assert r["bins"]["0"]["mean_error"] is None and r["bins"]["0"]["count"] == 0
    r = generalization_report([rec(0.5, v) for v in (0, 5, 50, 500, 5000)])
    assert all(b["mean_error"] == 0.5 for b in r["bins"].values())
    r = generalization_report([rec(4.0, 0), rec(0.0, 3), rec(0.0, 2000)])
    assert r["generalization_error"] == 4.0
    edges = generalization_report([rec(1, 10), rec(2, 11), rec(3, 1000), rec(4, 1001)])["bins"]
    assert edges["1-10"]["mean_error"] == 1 and edges["11-100"]["mean_error"] == 2
    assert edges["101-1000"]["mean_error"] == 3 and edges[">1000"]["mean_error"] == 4


def test_oracle_vs_oracle_draws():
    rng = np.random.default_rng(0)
    for first in (True, False):
        out = oracle_match(None, "ttt3", 200, first, rng, agent="oracle")
        assert out == {"win": 0, "draw": 200, "loss": 0}


def test_untrained_net_never_beats_oracle():
    params = neural.init(NetConfig.for_game("ttt3"))
    for first in (True, False):
        out = oracle_match(params, "ttt3", 100, first, np.random.default_rng(1))
        assert out["win"] == 0 and sum(out.values()) == 100


def test_search_with_exact_values_never_loses(monkeypatch):
    monkeypatch.setattr(analysis, "NetEvaluator", OracleEvaluator)
    for first in (True, False):
        out = oracle_match(None, "ttt3", 200, first, np.random.default_rng(2))
        assert out["loss"] == 0


def test_min_probability_action():
    rng = np.random.default_rng(0)
    assert min_probability_action(np.array([0.5, 0.1, 0.4]), [0, 1, 2], rng) == 1
    picks = {min_probability_action(np.array([0.0, 0.5, 0.0, 0.5]), [0, 1, 2, 3], rng)
             for _ in range(100)}
    assert picks == {0, 2}
    # illegal actions are never candidates
    assert min_probability_action(np.array([0.0, 0.3, 0.7]), [1, 2], rng) == 1


def test_detect_perfect_values_empty(monkeypatch):
    monkeypatch.setattr(analysis, "NetEvaluator", OracleEvaluator)
    records, stats = adversarial_detect(None, "ttt3", 40, rng=np.random.default_rng(0))
    assert records == [] and stats["endgame_states"] > 0


def test_detect_untrained_dedup_and_endgame():
    params = neural.init(NetConfig.for_game("ttt3", seed=3))
    records, stats = adversarial_detect(params, "ttt3", 64, rng=np.random.default_rng(0),
                                        search_cfg=SearchConfig(n_sims=10))
    keys = [r.state_key for r in records]
    assert len(keys) == len(set(keys))
    solver = Solver("ttt3")
    for r in records:
        s = parse_state(r.state_key)
        assert r.value_error > 1.0
        assert mover_outcome(s) is not None or solver.solve(s).plies_to_end <= 6
        assert r.oracle_value == solver.solve(s).value
    assert stats["states_seen"] >= 64


def test_exhaustive_eval_covers_nonterminal_states():
    params = neural.init(NetConfig.for_game("ttt3"))
    records = exhaustive_eval(params, "ttt3", {".../.../... X": 7}, SearchConfig(n_sims=4))
    assert len(records) == 4520
    assert records[0].visit_count == 7 and all(r.visit_count == 0 for r in records[1:])
    assert all(r.misalignment >= 0 and 0 <= r.value_error <= 4 for r in records)
    assert all(legal_actions(parse_state(r.state_key)) for r in records)


def test_records_roundtrip(tmp_path):
    rs = [EvalRecord("X../.../... O", 0, 0.25, 0.0625, 0.1, 3, 0.2)]
    write_records(tmp_path / "r.jsonl", rs)
    assert read_records(tmp_path / "r.jsonl") == rs
    adv = [AdversarialStateRecord("XX./OO./... X", 3.2, 0.4, 5, 1, -0.8)]
    write_records(tmp_path / "a.jsonl", adv)
    assert read_records(tmp_path / "a.jsonl", AdversarialStateRecord) == adv
