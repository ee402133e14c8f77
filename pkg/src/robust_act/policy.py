"""Shared-trunk Gaussian actor-critic.

The trunk is a stack of tanh dense layers; an actor head produces
tanh-squashed action means and a critic head a scalar value. The action
standard deviation is state independent: ``exp(log_std)`` with ``log_std``
a free parameter clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``.

Two evaluation paths exist. :meth:`PolicyNet.forward` is a plain numpy pass
used during rollouts; :func:`build_forward` records the same computation on a
:class:`~robust_act.diff_core.Tape` so losses can be differentiated. Tests
keep the two in agreement.
"""

from __future__ import annotations

import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import diff_core as dc
from .errors import CheckpointError, InputError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GaussianActionDist:
    """Diagonal Gaussian over actions."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def sample(self, rng):
        z = rng.standard_normal(self.mean.shape)
        return self.mean + self.std * z

    def log_density(self, a):
        z = (np.asarray(a, dtype=np.float64) - self.mean) / self.std
        return float(-0.5 * np.sum(z * z) - np.sum(np.log(self.std)) - 0.5 * self.dim * LOG_2PI)

    def density(self, a):
        return math.exp(self.log_density(a))

    def entropy(self):
        return float(np.sum(0.5 + 0.5 * LOG_2PI + np.log(self.std)))


def log_density(dist, a):
    return dist.log_density(a)


def entropy(dist):
    return dist.entropy()


def sample(dist, rng):
    return dist.sample(rng)


@dataclass(frozen=True)
class Architecture:
    state_dim: int = 8
    hidden: tuple = (64, 64)
    action_dim: int = 2

    def to_dict(self):
        return {"state_dim": self.state_dim, "hidden": list(self.hidden),
                "action_dim": self.action_dim}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["state_dim"]), tuple(int(h) for h in d["hidden"]), int(d["action_dim"]))

    def segment_shapes(self):
        shapes = OrderedDict()
        fan_in = self.state_dim
        for i, width in enumerate(self.hidden):
            shapes[f"trunk.w{i}"] = (fan_in, width)
            shapes[f"trunk.b{i}"] = (width,)
            fan_in = width
        shapes["actor_head.w"] = (fan_in, self.action_dim)
        shapes["actor_head.b"] = (self.action_dim,)
        shapes["critic_head.w"] = (fan_in, 1)
        shapes["critic_head.b"] = (1,)
        shapes["log_std"] = (self.action_dim,)
        return shapes


def _orthogonal(rng, shape, gain):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class PolicyNet:
    """Network parameters plus the numpy forward pass."""

    def __init__(self, params, arch=None):
        self.arch = arch or Architecture()
        self.params = params
        self.shapes = self.arch.segment_shapes()
        expected = sum(int(np.prod(s)) for s in self.shapes.values())
        if len(params) != expected or list(params.segments) != list(self.shapes):
            raise CheckpointError("parameter layout does not match the architecture")
        self._views = OrderedDict(
            (name, params.segment(name).reshape(shape)) for name, shape in self.shapes.items()
        )

    @classmethod
    def initialize(cls, rng, arch=None, initial_log_std=0.0):
        arch = arch or Architecture()
        arrays = OrderedDict()
        for name, shape in arch.segment_shapes().items():
            if name == "log_std":
                arrays[name] = np.full(shape, float(initial_log_std))
            elif ".w" in name:
                if name.startswith("trunk"):
                    gain = math.sqrt(2.0)
                elif name.startswith("actor"):
                    gain = 0.01
                else:
                    gain = 1.0
                arrays[name] = _orthogonal(rng, shape, gain)
            else:
                arrays[name] = np.zeros(shape)
        return cls(dc.ParameterVector.from_arrays(arrays), arch)

    def weights(self):
        """Segment arrays reshaped to their layer shapes (views into ``params``)."""
        return self._views

    def log_std(self):
        return np.clip(self.params.segment("log_std"), LOG_STD_MIN, LOG_STD_MAX)

    def forward_batch(self, states):
        """Means (N, A), std (A,), values (N,) for a batch of states."""
        w = self._views
        h = np.asarray(states, dtype=np.float64)
        for i in range(len(self.arch.hidden)):
            h = np.tanh(h @ w[f"trunk.w{i}"] + w[f"trunk.b{i}"])
        mean = np.tanh(h @ w["actor_head.w"] + w["actor_head.b"])
        value = (h @ w["critic_head.w"] + w["critic_head.b"])[..., 0]
        return mean, np.exp(self.log_std()), value

    def forward(self, state):
        state = np.asarray(state, dtype=np.float64)
        if state.shape != (self.arch.state_dim,):
            raise InputError(f"expected state of shape ({self.arch.state_dim},), got {state.shape}")
        if not np.all(np.isfinite(state)):
            raise InputError("non-finite state")
        mean, std, value = self.forward_batch(state[None, :])
        return GaussianActionDist(mean[0], std.copy()), float(value[0])

    def copy(self):
        return PolicyNet(self.params.copy(), self.arch)


def forward(net, state):
    return net.forward(state)


def build_forward(tape, arch, states):
    """Record the network on ``tape`` for a batch of state nodes.

    Declares one tape input per parameter segment (in segment order) and
    returns ``(param_vars, mean, log_std, value)`` where ``mean`` is (N, A),
    ``log_std`` is the clamped (A,) vector and ``value`` is (N,).
    """
    shapes = arch.segment_shapes()
    pv = OrderedDict((name, tape.input(name, shape)) for name, shape in shapes.items())
    h = states
    for i in range(len(arch.hidden)):
        h = dc.tanh(h @ pv[f"trunk.w{i}"] + pv[f"trunk.b{i}"])
    mean = dc.tanh(h @ pv["actor_head.w"] + pv["actor_head.b"])
    value = dc.reduce_sum(h @ pv["critic_head.w"] + pv["critic_head.b"], axis=1)
    log_std = dc.clip(pv["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return pv, mean, log_std, value


def build_log_density(mean, log_std, actions):
    """Per-row diagonal Gaussian log density, (N,), on the tape."""
    z = (actions - mean) * dc.exp(-log_std)
    return (
        dc.reduce_sum(dc.square(z), axis=1) * -0.5
        - dc.reduce_sum(log_std)
        - 0.5 * actions.tape.shape_hint(mean)[-1] * LOG_2PI
    )


def build_entropy(log_std):
    return dc.reduce_sum(log_std + (0.5 + 0.5 * LOG_2PI))


def param_inputs(net):
    """Segment arrays in the order :func:`build_forward` declares them."""
    return list(net.weights().values())


def flatten_grads(grads):
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])


# --- checkpoints -------------------------------------------------------------

def manifest_path(bin_path):
    root, _ = os.path.splitext(os.fspath(bin_path))
    return root + ".json"


def save_checkpoint(net, path, *, seed, episodes, mode):
    dc.save_parameters(net.params, path)
    manifest = {
        "architecture": net.arch.to_dict(),
        "seed": int(seed),
        "episodes": int(episodes),
        "mode": mode,
        "parameters": os.path.basename(os.fspath(path)),
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, arch=None):
    """Load a checkpoint and its manifest; returns ``(net, manifest)``."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    mpath = manifest_path(path)
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read manifest {mpath}: {exc}") from exc
    stored = Architecture.from_dict(manifest["architecture"])
    if arch is not None and stored != arch:
        raise CheckpointError(f"manifest architecture {stored} does not match {arch}")
    params = dc.load_parameters(path)
    return PolicyNet(params, stored), manifest
