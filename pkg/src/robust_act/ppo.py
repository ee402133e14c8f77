"""Clipped-surrogate PPO over a shared actor-critic.

The joint loss per minibatch is::

    -min(r * A, clip(r, 1 - eps, 1 + eps) * A) + c_v * (G - V)^2 - c_e * H

with ``r = exp(logp_new - logp_old)``, averaged over the minibatch. The loss
graph lives on a :class:`~robust_act.diff_core.Tape` built once per
minibatch size and re-evaluated for every step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import diff_core as dc
from . import policy as pol
from .errors import ConfigurationError, NonFiniteError, StateError

log = logging.getLogger(__name__)

LOG_RATIO_CAP = 20.0


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    horizon: int = 2048
    epochs: int = 10
    minibatch_size: int = 64
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # raw rewards are multiplied by this before returns/advantages are computed
    reward_scale: float = 0.01
    kl_alarm: float = 0.2
    # which action enters the likelihood ratio under attack: "executed" or "nominal"
    likelihood_action: str = "nominal"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("gae_lambda must lie in [0, 1]")
        if self.horizon < 1 or self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigurationError("horizon, epochs and minibatch_size must be >= 1")
        if self.likelihood_action not in ("executed", "nominal"):
            raise ConfigurationError("likelihood_action must be 'executed' or 'nominal'")

    def to_dict(self):
        return asdict(self)


@dataclass
class Transition:
    state: np.ndarray
    action_executed: np.ndarray
    log_prob: float
    reward: float
    value: float
    done: bool
    action_nominal: np.ndarray = None
    log_prob_nominal: float = None


def compute_returns(rewards, dones, gamma, bootstrap_value=0.0):
    """Discounted returns, restarting at episode boundaries.

    The tail is bootstrapped with ``bootstrap_value`` unless the last
    transition ends an episode.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    if len(rewards) != len(dones):
        raise ConfigurationError("rewards and dones differ in length")
    out = [0.0] * len(rewards)
    running = float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def compute_gae(rewards, values, dones, gamma, lam, bootstrap_value=0.0):
    """Generalized advantage estimates; ``values[t]`` is V(s_t)."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = float(bootstrap_value)
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv


class RolloutBuffer:
    def __init__(self):
        self.transitions = []
        self.returns = None
        self.advantages = None

    def __len__(self):
        return len(self.transitions)

    def add(self, transition):
        self.transitions.append(transition)
        self.returns = self.advantages = None

    def clear(self):
        self.transitions = []
        self.returns = self.advantages = None

    @property
    def finalized(self):
        return self.advantages is not None

    def finalize(self, bootstrap_value, gamma, lam, reward_scale=1.0):
        tr = self.transitions
        rewards = [t.reward * reward_scale for t in tr]
        dones = [t.done for t in tr]
        values = [t.value for t in tr]
        self.returns = np.array(compute_returns(rewards, dones, gamma, bootstrap_value))
        adv = compute_gae(rewards, values, dones, gamma, lam, bootstrap_value)
        std = adv.std()
        self.advantages = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)
        return self

    def arrays(self, likelihood_action="executed"):
        tr = self.transitions
        if likelihood_action == "nominal":
            actions = np.array([t.action_nominal if t.action_nominal is not None
                                else t.action_executed for t in tr])
            logp = np.array([t.log_prob_nominal if t.log_prob_nominal is not None
                             else t.log_prob for t in tr])
        else:
            actions = np.array([t.action_executed for t in tr])
            logp = np.array([t.log_prob for t in tr])
        return np.array([t.state for t in tr]), actions, logp


class PPOLoss:
    """Tape-recorded PPO loss for one minibatch size."""

    def __init__(self, arch, batch_size, cfg):
        self.arch = arch
        self.batch_size = batch_size
        self.clip_eps = cfg.clip_eps
        tape = dc.Tape()
        states = tape.input("states", (batch_size, arch.state_dim))
        actions = tape.input("actions", (batch_size, arch.action_dim))
        old_logp = tape.input("old_logp", (batch_size,))
        adv = tape.input("advantages", (batch_size,))
        returns = tape.input("returns", (batch_size,))
        _, mean, log_std, value = pol.build_forward(tape, arch, states)
        logp = pol.build_log_density(mean, log_std, actions)
        # attacked actions sit deep in the tails, where a shrinking sigma can overflow exp
        ratio = dc.exp(dc.clip(logp - old_logp, -LOG_RATIO_CAP, LOG_RATIO_CAP))
        surr = dc.minimum(ratio * adv, dc.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
        actor = -dc.mean(surr)
        critic = dc.mean(dc.square(returns - value))
        ent = pol.build_entropy(log_std)
        loss = actor + cfg.value_coef * critic - cfg.entropy_coef * ent
        self.tape = tape
        self._loss = tape.output(loss)
        self._nodes = {"actor": actor, "critic": critic, "entropy": ent,
                       "ratio": ratio, "logp": logp}
        self._n_data = 5

    def evaluate(self, net, states, actions, old_logp, adv, returns):
        """Forward + backward. Returns (loss, flat gradient, diagnostics)."""
        inputs = [states, actions, old_logp, adv, returns] + pol.param_inputs(net)
        (loss,) = self.tape.forward(inputs)
        grads = self.tape.backward(self._loss)[self._n_data:]
        ratio = self.tape.value(self._nodes["ratio"])
        diag = {
            "actor_loss": self.tape.value(self._nodes["actor"]),
            "critic_loss": self.tape.value(self._nodes["critic"]),
            "entropy": self.tape.value(self._nodes["entropy"]),
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > self.clip_eps)),
            "approx_kl": float(np.mean((ratio - 1.0) - np.log(ratio))),
        }
        return loss, pol.flatten_grads(grads), diag

    def loss_value(self, net, states, actions, old_logp, adv, returns):
        inputs = [states, actions, old_logp, adv, returns] + pol.param_inputs(net)
        return self.tape.forward(inputs)[0]


class PPOTrainer:
    """Owns the Adam state and the per-size loss tapes for one network."""

    def __init__(self, net, cfg=None):
        self.net = net
        self.cfg = cfg or PPOConfig()
        self.adam = dc.AdamState.zeros(
            len(net.params), lr=self.cfg.learning_rate, beta1=self.cfg.adam_beta1,
            beta2=self.cfg.adam_beta2, eps=self.cfg.adam_eps,
        )
        self._losses = {}

    def loss_for(self, batch_size):
        loss = self._losses.get(batch_size)
        if loss is None:
            loss = PPOLoss(self.net.arch, batch_size, self.cfg)
            self._losses[batch_size] = loss
        return loss

    def update(self, buffer, rng):
        return ppo_update(self.net, buffer, self.cfg, rng, trainer=self)


def ppo_update(net, buffer, cfg, rng, trainer=None):
    """Run ``cfg.epochs`` passes of shuffled minibatch Adam steps.

    Returns mean diagnostics over all minibatches. On a non-finite loss or
    gradient the parameters and optimizer state are restored to their values
    at entry and :class:`NonFiniteError` is raised.
    """
    if not buffer.finalized:
        raise StateError("buffer must be finalized before ppo_update")
    trainer = trainer or PPOTrainer(net, cfg)
    states, actions, old_logp = buffer.arrays(cfg.likelihood_action)
    adv, returns = buffer.advantages, buffer.returns
    n = len(buffer)
    saved_params = net.params.values.copy()
    saved_adam = (trainer.adam.m.copy(), trainer.adam.v.copy(), trainer.adam.step)

    totals = {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0,
              "clip_frac": 0.0, "approx_kl": 0.0}
    count = 0
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start:start + cfg.minibatch_size]
                loss_fn = trainer.loss_for(len(idx))
                loss, grad, diag = loss_fn.evaluate(
                    net, states[idx], actions[idx], old_logp[idx], adv[idx], returns[idx]
                )
                if not math.isfinite(loss):
                    raise NonFiniteError("non-finite PPO loss")
                gnorm = float(np.sqrt(grad @ grad))
                if cfg.max_grad_norm and gnorm > cfg.max_grad_norm:
                    grad = grad * (cfg.max_grad_norm / gnorm)
                dc.adam_step(net.params, grad, trainer.adam)
                for k in totals:
                    totals[k] += diag[k]
                count += 1
    except NonFiniteError:
        net.params.values[:] = saved_params
        trainer.adam.m, trainer.adam.v, trainer.adam.step = saved_adam
        raise
    stats = {k: v / count for k, v in totals.items()}
    if stats["approx_kl"] > cfg.kl_alarm:
        log.warning("approximate KL %.3f exceeds alarm threshold %.3f",
                    stats["approx_kl"], cfg.kl_alarm)
    return stats
