"""Evaluation of trained agents with and without the action-space attack.

A :class:`Scenario` pairs a checkpoint with an optional attack; evaluating it
yields an :class:`EvalReport` of per-episode normalized rewards, summary
statistics, a fixed-width histogram and outcome tallies. Every episode draws
from its own random streams derived from ``(seed, episode index)``, so a
report does not depend on execution order.
"""

from __future__ import annotations

import builtins
import csv
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .adv_training import normalize_reward
from .errors import ConfigurationError
from .lander_env import LanderConfig, LanderEnv
from .mas_attack import AttackConfig, pgd_attack
from .policy import load_checkpoint

HIST_BIN_WIDTH = 0.25
HIST_RANGE = (-3.0, 3.0)
LANDED_SHUTDOWN = 2.5
LANDED_ENGINE_ON = 1.0
_EVAL_STREAMS = ("env", "policy", "attack")


@dataclass
class Scenario:
    agent_checkpoint: str
    attack: AttackConfig = None
    episodes: int = 50
    seed: int = 0
    stochastic: bool = True
    step_limit: int = 1000
    env: LanderConfig = field(default_factory=LanderConfig)

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")

    def to_dict(self):
        return {
            "agent_checkpoint": os.fspath(self.agent_checkpoint),
            "attack": None if self.attack is None else self.attack.to_dict(),
            "episodes": self.episodes,
            "seed": self.seed,
            "stochastic": self.stochastic,
            "step_limit": self.step_limit,
            "env": self.env.to_dict(),
        }


@dataclass
class EvalReport:
    rewards: list
    mean: float
    std: float
    hist_edges: list
    hist_counts: list
    outcomes: dict
    percentile_10: float
    terminations: list = field(default_factory=list)
    scenario: dict = field(default_factory=dict)

    @classmethod
    def from_rewards(cls, rewards, terminations=(), scenario=None):
        r = np.asarray(rewards, dtype=np.float64)
        edges, counts = histogram(r, HIST_BIN_WIDTH, HIST_RANGE)
        return cls(
            rewards=r.tolist(),
            mean=float(r.mean()),
            std=float(r.std()),
            hist_edges=edges,
            hist_counts=counts,
            outcomes=outcome_tallies(r),
            percentile_10=float(np.percentile(r, 10)),
            terminations=list(terminations),
            scenario=dict(scenario or {}),
        )

    @property
    def n(self):
        return len(self.rewards)

    def to_dict(self):
        return {
            "rewards": self.rewards, "mean": self.mean, "std": self.std, "n": self.n,
            "hist_edges": self.hist_edges, "hist_counts": self.hist_counts,
            "outcomes": self.outcomes, "percentile_10": self.percentile_10,
            "terminations": self.terminations, "scenario": self.scenario,
        }

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "n"}
        return cls(**d)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def row(self, label=""):
        return f"{label}{self.mean:.2f} ± {self.std:.2f} (n={self.n})"


def outcome_tallies(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    return {
        "landed_and_shutdown": int(np.sum(r >= LANDED_SHUTDOWN)),
        "landed_engine_on": int(np.sum((r >= LANDED_ENGINE_ON) & (r < LANDED_SHUTDOWN))),
        "crashed_or_lost": int(np.sum(r < LANDED_ENGINE_ON)),
    }


def histogram(rewards, bin_width, range):
    """Fixed-width bins over ``range``; out-of-range samples land in the end bins."""
    lo, hi = range
    if not bin_width > 0 or not lo < hi:
        raise ConfigurationError("histogram needs bin_width > 0 and lo < hi")
    nbins = int(math.ceil((hi - lo) / bin_width - 1e-9))
    edges = [lo + i * bin_width for i in builtins.range(nbins + 1)]
    counts = [0] * nbins
    for x in np.asarray(rewards, dtype=np.float64).ravel():
        i = int(math.floor((x - lo) / bin_width))
        counts[min(max(i, 0), nbins - 1)] += 1
    return edges, counts


def episode_streams(seed, episode):
    return {
        name: np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(episode), i])))
        for i, name in enumerate(_EVAL_STREAMS)
    }


def run_episode(net, env, streams, attack=None, stochastic=True, writer=None):
    """One episode; returns (raw return, termination)."""
    obs = env.reset(streams["env"]).as_array()
    total = 0.0
    t = 0
    while True:
        dist, _ = net.forward(obs)
        a = dist.sample(streams["policy"]) if stochastic else dist.mean.copy()
        if attack is not None:
            a, _ = pgd_attack(dist, a, attack, streams["attack"], trace=False)
        res = env.step(a)
        total += res.reward
        if writer is not None:
            writer.write(t, res.next_state, a, res.reward, res.done)
        t += 1
        obs = res.observation
        if res.done:
            return total, res.termination.value


def evaluate(scenario, net=None, trajectory_writer=None):
    """Run a scenario and return its :class:`EvalReport`.

    ``net`` short-circuits loading ``scenario.agent_checkpoint``.
    """
    if net is None:
        net, _ = load_checkpoint(scenario.agent_checkpoint)
    env = LanderEnv(replace(scenario.env, step_limit=scenario.step_limit))
    rewards, terms = [], []
    for ep in range(scenario.episodes):
        raw, term = run_episode(net, env, episode_streams(scenario.seed, ep), scenario.attack,
                                scenario.stochastic, trajectory_writer)
        rewards.append(normalize_reward(raw))
        terms.append(term)
    return EvalReport.from_rewards(rewards, terms, scenario.to_dict())


def pooled_t(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    diff = a.mean() - b.mean()
    dof = na + nb - 2
    if dof <= 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff), dof
    sp2 = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / dof
    se = math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    if se == 0.0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff), dof
    return float(diff / se), dof


def compare(report_a, report_b, alpha=0.05):
    """Two-sample comparison of per-episode rewards (a minus b)."""
    a = np.asarray(report_a.rewards, dtype=np.float64)
    b = np.asarray(report_b.rewards, dtype=np.float64)
    t, dof = pooled_t(a, b)
    t_p = float(2.0 * stats.t.sf(abs(t), dof)) if dof > 0 else 1.0
    if np.array_equal(np.sort(a), np.sort(b)):
        u, mw_p, mw_p_greater = float(a.size * b.size / 2.0), 1.0, 0.5
    else:
        res = stats.mannwhitneyu(a, b, alternative="two-sided")
        u, mw_p = float(res.statistic), float(res.pvalue)
        mw_p_greater = float(stats.mannwhitneyu(a, b, alternative="greater").pvalue)
    return {
        "mean_difference": float(a.mean() - b.mean()),
        "t_statistic": t,
        "t_dof": dof,
        "t_pvalue": t_p,
        "mannwhitney_u": u,
        "mannwhitney_pvalue": mw_p,
        "mannwhitney_pvalue_greater": mw_p_greater,
        "significant": bool(mw_p < alpha),
        "alpha": alpha,
    }


def write_histogram_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.hist_edges[:-1], report.hist_edges[1:], report.hist_counts):
            w.writerow([repr(lo), repr(hi), c])


MATRIX_HEADER = ["agent", "environment", "norm", "mean", "std", "n"]


def write_matrix_csv(rows, path):
    """``rows``: iterable of (agent, environment, norm, report)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATRIX_HEADER)
        for agent, environment, norm, rep in rows:
            w.writerow([agent, environment, norm, repr(rep.mean), repr(rep.std), rep.n])
