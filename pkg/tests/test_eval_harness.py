import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from robust_act import eval_harness as ev
from robust_act.errors import CheckpointError, ConfigurationError
from robust_act.eval_harness import EvalReport, Scenario, compare, evaluate, histogram
from robust_act.mas_attack import AttackConfig
from robust_act.policy import PolicyNet, save_checkpoint

from oracles import pooled_t_bruteforce


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ck") / "agent.bin"
    save_checkpoint(PolicyNet.initialize(np.random.default_rng(0)), path,
                    seed=0, episodes=0, mode="nominal")
    return str(path)


# --- histogram --------------------------------------------------------------------

def test_histogram_point_mass():
    edges, counts = histogram([0.3] * 7, 0.25, (-3.0, 3.0))
    assert len(edges) == 25 and len(counts) == 24
    assert sorted(counts)[-2:] == [0, 7]
    assert counts[int((0.3 + 3.0) // 0.25)] == 7


def test_histogram_folds_overflow():
    _, counts = histogram([-10.0, 10.0, 3.0, -3.0], 0.25, (-3.0, 3.0))
    assert counts[0] == 2 and counts[-1] == 2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), max_size=200))
def test_histogram_conserves_count(xs):
    assert sum(histogram(xs, 0.25, (-3.0, 3.0))[1]) == len(xs)


def test_histogram_uniform_within_binomial_bound():
    rng = np.random.default_rng(1)
    xs = rng.uniform(-3.0, 3.0, 10_000)
    _, counts = histogram(xs, 0.25, (-3.0, 3.0))
    p = 1 / 24
    sigma = math.sqrt(10_000 * p * (1 - p))
    assert all(abs(c - 10_000 * p) <= 5 * sigma for c in counts)


def test_histogram_validation():
    with pytest.raises(ConfigurationError):
        histogram([1.0], 0.0, (0.0, 1.0))
    with pytest.raises(ConfigurationError):
        histogram([1.0], 0.1, (1.0, 1.0))


# --- reports and statistics --------------------------------------------------------

def test_report_stats_recomputable():
    r = [2.7, 1.2, 0.4, -1.0, 2.9]
    rep = EvalReport.from_rewards(r)
    assert rep.mean == float(np.mean(r)) and rep.std == float(np.std(r))
    assert rep.outcomes == {"landed_and_shutdown": 2, "landed_engine_on": 1, "crashed_or_lost": 2}
    assert rep.percentile_10 == float(np.percentile(r, 10))
    assert rep.row("x: ") == "x: 1.24 ± 1.46 (n=5)"


def test_outcome_band_edges():
    assert ev.outcome_tallies([2.5, 1.0, 0.999]) == {
        "landed_and_shutdown": 1, "landed_engine_on": 1, "crashed_or_lost": 1}


def test_report_json_roundtrip(tmp_path):
    rep = EvalReport.from_rewards([0.1, 0.2, 2.6], ["crashed", "crashed", "landed_rest"],
                                  {"seed": 1})
    rep.write(tmp_path / "r.json")
    back = EvalReport.read(tmp_path / "r.json")
    assert back == rep


def test_compare_self_is_not_significant():
    rep = EvalReport.from_rewards([0.5, 1.0, 1.5, 2.0])
    c = compare(rep, rep)
    assert c["mean_difference"] == 0.0 and not c["significant"]


def test_compare_disjoint_supports():
    a = EvalReport.from_rewards(np.linspace(2.0, 3.0, 50))
    b = EvalReport.from_rewards(np.linspace(0.0, 1.0, 50))
    c = compare(a, b)
    assert c["significant"] and c["mannwhitney_pvalue"] < 1e-10
    assert c["mannwhitney_pvalue_greater"] < 1e-10 and c["t_statistic"] > 0


def test_t_statistic_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a = rng.normal(1.0, 0.5, 30).tolist()
        b = rng.normal(0.8, 1.0, 45).tolist()
        c = compare(EvalReport.from_rewards(a), EvalReport.from_rewards(b))
        assert c["t_statistic"] == pytest.approx(pooled_t_bruteforce(a, b), rel=1e-12)
        assert c["t_dof"] == 73
        assert c["t_pvalue"] == pytest.approx(stats.ttest_ind(a, b).pvalue, rel=1e-9)


# --- evaluation runs -----------------------------------------------------------------

def test_evaluate_is_deterministic(checkpoint, tmp_path):
    sc = Scenario(checkpoint, AttackConfig(), episodes=3, seed=5, step_limit=150)
    r1, r2 = evaluate(sc), evaluate(sc)
    r1.write(tmp_path / "a.json")
    r2.write(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert r1.n == 3 and r1.scenario["attack"]["norm"] == "L1"


def test_episodes_do_not_depend_on_order(checkpoint):
    full = evaluate(Scenario(checkpoint, episodes=4, seed=8, step_limit=120))
    net = PolicyNet.initialize(np.random.default_rng(0))
    from robust_act.lander_env import LanderConfig, LanderEnv
    env = LanderEnv(LanderConfig(step_limit=120))
    raw, _ = ev.run_episode(net, env, ev.episode_streams(8, 3))
    assert full.rewards[3] == raw / 100.0


def test_greedy_mode_ignores_policy_stream(checkpoint):
    a = evaluate(Scenario(checkpoint, episodes=2, seed=1, stochastic=False, step_limit=100))
    b = evaluate(Scenario(checkpoint, episodes=2, seed=1, stochastic=False, step_limit=100))
    assert a.rewards == b.rewards


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        evaluate(Scenario(str(tmp_path / "nope.bin"), episodes=1))
    with pytest.raises(ConfigurationError):
        Scenario("x", episodes=0)


def test_csv_writers(tmp_path):
    rep = EvalReport.from_rewards([0.0, 0.1, 2.9])
    ev.write_histogram_csv(rep, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_lo", "bin_hi", "count"] and len(rows) == 25
    assert sum(int(r[2]) for r in rows[1:]) == 3
    ev.write_matrix_csv([("nominal", "nominal", "L1", rep)], tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["agent", "environment", "norm", "mean", "std", "n"]
    assert float(rows[1][3]) == rep.mean and rows[1][5] == "3"
