"""Myopic action-space (MAS) attack.

Starting from a fresh draw of the policy's action distribution, the attack
runs gradient descent on the Gaussian density until successive iterates
stop moving, then projects the total displacement from the nominal action
onto an l1 or l2 ball of radius ``budget``::

    a_{k+1} = a_k - step_size * grad_a p(a_k)
    delta   = P_B(a_final - a_nominal)
    a_adv   = a_nominal + delta

Descending the density (rather than the log-density) makes the gradient
vanish in the tails, which is what lets the loop saturate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


class Norm(str, enum.Enum):
    L1 = "L1"
    L2 = "L2"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigurationError(f"unknown norm {value!r}; expected L1 or L2") from None


@dataclass(frozen=True)
class AttackConfig:
    norm: Norm = Norm.L1
    budget: float = 1.0
    step_size: float = 3.0
    tolerance: float = 1e-3
    max_iters: int = 100
    target: str = "density"  # or "log_density" (ablation)

    def __post_init__(self):
        object.__setattr__(self, "norm", Norm.parse(self.norm))
        # budget == 0 is allowed so a zero-budget attack can be compared against nominal runs
        if not self.budget >= 0.0:
            raise ConfigurationError("attack budget must be >= 0")
        if not self.step_size >= 0.0:
            raise ConfigurationError("attack step size must be >= 0")
        if not self.tolerance > 0.0:
            raise ConfigurationError("attack tolerance must be > 0")
        if self.max_iters < 1:
            raise ConfigurationError("attack max_iters must be >= 1")
        if self.target not in ("density", "log_density"):
            raise ConfigurationError(f"unknown attack target {self.target!r}")

    def to_dict(self):
        return {"norm": self.norm.value, "budget": self.budget, "step_size": self.step_size,
                "tolerance": self.tolerance, "max_iters": self.max_iters, "target": self.target}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttackTrace:
    iterates: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    converged: bool = False
    final_delta: np.ndarray = None

    @property
    def iters(self):
        return max(len(self.iterates) - 1, 0)


def density(dist, a):
    z = (a - dist.mean) / dist.std
    return math.exp(-0.5 * float(z @ z)) / float(np.prod(dist.std) * (2.0 * math.pi) ** (dist.dim / 2))


def density_gradient(dist, a):
    """Closed-form gradient of the joint Gaussian density w.r.t. the action."""
    a = np.asarray(a, dtype=np.float64)
    return -density(dist, a) * (a - dist.mean) / (dist.std * dist.std)


def log_density_gradient(dist, a):
    a = np.asarray(a, dtype=np.float64)
    return -(a - dist.mean) / (dist.std * dist.std)


# projected points can overshoot the radius by an ulp or two; treating them as
# inside keeps projection exactly idempotent
_RADIUS_SLACK = 1.0 + 8.0 * np.finfo(np.float64).eps


def project_l2(v, budget):
    n = math.sqrt(float(v @ v))
    if n <= budget * _RADIUS_SLACK:
        return v.copy()
    return v * (budget / n)


def project_l1(v, budget):
    """Euclidean projection onto the l1 ball via sort-based simplex projection."""
    u = np.abs(v)
    if u.sum() <= budget * _RADIUS_SLACK:
        return v.copy()
    if budget == 0.0:
        return np.zeros_like(v)
    s = np.sort(u)[::-1]
    css = np.cumsum(s)
    k = np.arange(1, s.size + 1)
    active = np.nonzero(s * k > css - budget)[0]
    # the largest magnitude is always active; rounding can hide it for tiny budgets
    rho = active[-1] if active.size else 0
    theta = (css[rho] - budget) / (rho + 1.0)
    return np.sign(v) * np.maximum(u - theta, 0.0)


def project(v, norm, budget):
    v = np.asarray(v, dtype=np.float64)
    if budget < 0:
        raise ConfigurationError("projection radius must be >= 0")
    if Norm.parse(norm) is Norm.L2:
        return project_l2(v, budget)
    return project_l1(v, budget)


def pgd_attack(dist, a_nominal, cfg, rng, trace=True):
    """Perturb ``a_nominal`` within the budget ball.

    Returns ``(a_adv, trace)``; ``trace`` is ``None`` when ``trace=False``
    (the returned action is identical either way).
    """
    a_nominal = np.asarray(a_nominal, dtype=np.float64)
    start = dist.sample(rng)
    # scalar loop: the action space is tiny and this runs at every env step
    mu = [float(m) for m in dist.mean]
    sd = [float(s) for s in dist.std]
    inv_var = [1.0 / (s * s) for s in sd]
    norm_const = 1.0 / (math.prod(sd) * (2.0 * math.pi) ** (len(sd) / 2))
    use_density = cfg.target == "density"
    alpha, tol = cfg.step_size, cfg.tolerance

    a = [float(v) for v in start]
    rec = AttackTrace() if trace else None
    if rec is not None:
        rec.iterates.append(start.copy())
        rec.densities.append(density(dist, start))
    converged = False
    for _ in range(cfg.max_iters):
        diff = [ai - mi for ai, mi in zip(a, mu)]
        q = sum(d * d * iv for d, iv in zip(diff, inv_var))
        scale = alpha * (norm_const * math.exp(-0.5 * q) if use_density else 1.0)
        # a - alpha * grad, with grad = -p * diff / var
        a_next = [ai + scale * d * iv for ai, d, iv in zip(a, diff, inv_var)]
        moved = max(abs(n - o) for n, o in zip(a_next, a))
        a = a_next
        if rec is not None:
            arr = np.array(a)
            rec.iterates.append(arr)
            rec.densities.append(density(dist, arr))
        if moved < tol:
            converged = True
            break
    delta = project(np.array(a) - a_nominal, cfg.norm, cfg.budget)
    if rec is not None:
        rec.converged = converged
        rec.final_delta = delta
    return a_nominal + delta, rec
