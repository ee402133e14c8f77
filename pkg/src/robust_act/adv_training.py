"""Training runs: nominal PPO, or PPO with every action attacked before execution.

Per step the policy gives a distribution, a nominal action is sampled, the
MAS attack (when configured) perturbs it inside the budget ball and the
environment is stepped with the perturbed action. The transition records
both actions, and ``PPOConfig.likelihood_action`` picks the one the update
scores (the nominal one by default). A PPO update fires whenever the rollout
buffer reaches the horizon.

Randomness comes from one master seed split into independent named
streams, so switching the attack on or off leaves the environment and
policy-sampling draws untouched.

Run directory layout::

    config.json          resolved configuration snapshot
    episodes.jsonl       one line per episode
    updates.jsonl        one line per PPO update
    attacks.jsonl        per-step attack trace (only with trace_attacks)
    checkpoints/ep{N}.bin + ep{N}.json
    final.bin + final.json
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AggregationError, ConfigurationError, NonFiniteError, RobustActError
from .lander_env import LanderConfig, LanderEnv
from .mas_attack import AttackConfig, pgd_attack
from .policy import Architecture, PolicyNet, save_checkpoint
from .ppo import PPOConfig, PPOTrainer, RolloutBuffer, Transition

log = logging.getLogger(__name__)

REWARD_NORMALIZER = 100.0
STREAMS = ("init", "env", "policy", "attack", "shuffle")


def make_streams(seed):
    """Independent generators keyed by purpose, all derived from ``seed``."""
    return {
        name: np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), i])))
        for i, name in enumerate(STREAMS)
    }


def normalize_reward(raw):
    return raw / REWARD_NORMALIZER


@dataclass
class TrainingRunConfig:
    episodes: int = 3000
    step_limit: int = 1000
    attack: AttackConfig = None
    ppo: PPOConfig = field(default_factory=PPOConfig)
    env: LanderConfig = field(default_factory=LanderConfig)
    arch: Architecture = field(default_factory=Architecture)
    seed: int = 0
    out_dir: str = None
    checkpoint_every: int = 500
    trace_attacks: bool = False
    mode: str = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1")
        if self.step_limit < 1:
            raise ConfigurationError("step_limit must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be >= 1")
        derived = "nominal" if self.attack is None else f"adv-{self.attack.norm.value.lower()}"
        if self.mode is None:
            self.mode = derived
        elif self.mode in ("adv-l1", "adv-l2") and self.attack is None:
            self.attack = AttackConfig(norm=self.mode[-2:].upper())
        elif self.mode != derived:
            raise ConfigurationError(f"mode {self.mode!r} does not match attack {derived!r}")

    def to_dict(self):
        return {
            "episodes": self.episodes,
            "step_limit": self.step_limit,
            "attack": None if self.attack is None else self.attack.to_dict(),
            "ppo": self.ppo.to_dict(),
            "env": self.env.to_dict(),
            "arch": self.arch.to_dict(),
            "seed": self.seed,
            "out_dir": self.out_dir,
            "checkpoint_every": self.checkpoint_every,
            "trace_attacks": self.trace_attacks,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        attack = d.pop("attack", None)
        return cls(
            attack=None if attack is None else AttackConfig.from_dict(attack),
            ppo=PPOConfig(**d.pop("ppo", {})),
            env=LanderConfig(**d.pop("env", {})),
            arch=Architecture.from_dict(d.pop("arch")) if "arch" in d else Architecture(),
            **d,
        )


@dataclass
class TrainingRunRecord:
    rewards_raw: list = field(default_factory=list)
    rewards_normalized: list = field(default_factory=list)
    updates: list = field(default_factory=list)
    wall_clock: float = 0.0
    final_checkpoint: str = None
    mode: str = "nominal"
    steps: int = 0
    attack_calls: int = 0

    def __len__(self):
        return len(self.rewards_raw)


class TrainingAborted(RobustActError):
    """Training stopped early; ``record`` holds what completed."""

    def __init__(self, message, record, checkpoint=None):
        super().__init__(message)
        self.record = record
        self.checkpoint = checkpoint


def dumps(obj):
    """Canonical single-line JSON (stable key order, repr floats)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _clean(x):
    return None if x is None or not math.isfinite(x) else x


def run_training(cfg, progress=None):
    """Execute one training run; returns a :class:`TrainingRunRecord`.

    Writes the run directory when ``cfg.out_dir`` is set. ``progress`` is an
    optional callback ``progress(episode_index, record)``.
    """
    t0 = time.perf_counter()
    out = cfg.out_dir
    files = {}
    if out is not None:
        os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
        with open(os.path.join(out, "config.json"), "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        files["episodes"] = open(os.path.join(out, "episodes.jsonl"), "w")
        files["updates"] = open(os.path.join(out, "updates.jsonl"), "w")
        if cfg.trace_attacks and cfg.attack is not None:
            files["attacks"] = open(os.path.join(out, "attacks.jsonl"), "w")

    streams = make_streams(cfg.seed)
    env = LanderEnv(replace(cfg.env, step_limit=cfg.step_limit))
    net = PolicyNet.initialize(streams["init"], cfg.arch)
    trainer = PPOTrainer(net, cfg.ppo)
    buffer = RolloutBuffer()
    record = TrainingRunRecord(mode=cfg.mode)
    attack = cfg.attack
    want_trace = "attacks" in files
    pending = []  # episode returns since the last update
    last_good = None

    def checkpoint(name):
        if out is None:
            return None
        path = os.path.join(out, name)
        save_checkpoint(net, path, seed=cfg.seed, episodes=len(record), mode=cfg.mode)
        return path

    try:
        for ep in range(cfg.episodes):
            obs = env.reset(streams["env"]).as_array()
            ep_return = 0.0
            steps = 0
            while True:
                dist, value = net.forward(obs)
                a_nominal = dist.sample(streams["policy"])
                if attack is not None:
                    a_exec, trace = pgd_attack(dist, a_nominal, attack, streams["attack"],
                                               trace=want_trace)
                    record.attack_calls += 1
                    if want_trace:
                        files["attacks"].write(dumps({
                            "episode": ep, "t": steps,
                            "a_nominal": a_nominal.tolist(), "a_adv": a_exec.tolist(),
                            "delta": trace.final_delta.tolist(), "iters": trace.iters,
                            "converged": trace.converged,
                            "density_start": trace.densities[0],
                            "density_end": trace.densities[-1],
                        }) + "\n")
                else:
                    a_exec = a_nominal
                res = env.step(a_exec)
                logp_exec = dist.log_density(a_exec)
                buffer.add(Transition(
                    state=obs, action_executed=a_exec, log_prob=logp_exec, reward=res.reward,
                    value=value, done=res.done, action_nominal=a_nominal,
                    log_prob_nominal=logp_exec if a_exec is a_nominal else dist.log_density(a_nominal),
                ))
                ep_return += res.reward
                steps += 1
                record.steps += 1
                obs = res.observation
                if len(buffer) >= cfg.ppo.horizon:
                    bootstrap = 0.0 if res.done else net.forward(obs)[1]
                    buffer.finalize(bootstrap, cfg.ppo.gamma, cfg.ppo.gae_lambda,
                                    cfg.ppo.reward_scale)
                    stats = trainer.update(buffer, streams["shuffle"])
                    buffer.clear()
                    mean_raw = float(np.mean(pending)) if pending else None
                    entry = {
                        "update_idx": len(record.updates),
                        "episodes_done": len(record) + (1 if res.done else 0),
                        "mean_episode_reward_raw": _clean(mean_raw),
                        "mean_episode_reward_normalized":
                            None if mean_raw is None else _clean(normalize_reward(mean_raw)),
                        **{k: _clean(v) for k, v in stats.items()},
                    }
                    pending = []
                    record.updates.append(entry)
                    if "updates" in files:
                        files["updates"].write(dumps(entry) + "\n")
                if res.done:
                    break

            record.rewards_raw.append(ep_return)
            record.rewards_normalized.append(normalize_reward(ep_return))
            pending.append(ep_return)
            if "episodes" in files:
                files["episodes"].write(dumps({
                    "episode": ep,
                    "reward_raw": ep_return,
                    "reward_normalized": normalize_reward(ep_return),
                    "steps": steps,
                    "termination": res.termination.value,
                }) + "\n")
            if (ep + 1) % cfg.checkpoint_every == 0:
                last_good = checkpoint(os.path.join("checkpoints", f"ep{ep + 1}.bin"))
            if progress is not None:
                progress(ep, record)
        record.final_checkpoint = checkpoint("final.bin")
    except NonFiniteError as exc:
        # ppo_update restored the pre-update parameters
        last_good = checkpoint(os.path.join("checkpoints", "last_good.bin")) or last_good
        record.wall_clock = time.perf_counter() - t0
        raise TrainingAborted(f"non-finite loss: {exc}", record, last_good) from exc
    except OSError as exc:
        record.wall_clock = time.perf_counter() - t0
        raise TrainingAborted(f"I/O failure: {exc}", record, last_good) from exc
    finally:
        for fh in files.values():
            fh.close()
    record.wall_clock = time.perf_counter() - t0
    return record


def moving_average(series, window):
    """Trailing mean; the first ``window - 1`` entries average the available prefix."""
    if window < 1:
        raise ConfigurationError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        out[i] = x[max(0, i - window + 1):i + 1].mean()
    return out.tolist()


def multi_seed_aggregate(records, window):
    """Elementwise mean across seeds followed by a trailing moving average.

    ``records`` holds :class:`TrainingRunRecord` objects or plain reward lists
    (normalized rewards are used for records).
    """
    series = [r.rewards_normalized if isinstance(r, TrainingRunRecord) else list(r)
              for r in records]
    if not series:
        raise AggregationError("no records to aggregate")
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise AggregationError(f"records differ in episode count: {sorted(lengths)}")
    mean = np.mean(np.asarray(series, dtype=np.float64), axis=0)
    return moving_average(mean, window)


def load_run_record(run_dir):
    """Rebuild a :class:`TrainingRunRecord` from a run directory's JSONL files."""
    record = TrainingRunRecord()
    with open(os.path.join(run_dir, "episodes.jsonl")) as fh:
        for line in fh:
            e = json.loads(line)
            record.rewards_raw.append(e["reward_raw"])
            record.rewards_normalized.append(e["reward_normalized"])
            record.steps += e["steps"]
    upath = os.path.join(run_dir, "updates.jsonl")
    if os.path.exists(upath):
        with open(upath) as fh:
            record.updates = [json.loads(line) for line in fh]
    cpath = os.path.join(run_dir, "config.json")
    if os.path.exists(cpath):
        with open(cpath) as fh:
            record.mode = json.load(fh).get("mode", "nominal")
    final = os.path.join(run_dir, "final.bin")
    record.final_checkpoint = final if os.path.exists(final) else None
    return record
