"""Deterministic 2-D lander: point mass with orientation, two legs, flat ground.

Observation (8 floats, in order): x, y, vx, vy, angle, angular velocity,
left-leg contact, right-leg contact. The pad sits at the origin; ``y`` is
the height of the leg tips when the body is upright, so a lander standing
level on the pad has ``x = y = 0``. Velocities are per second.

Action (2 floats, clamped to [-1, 1]):

* ``main``: off on [-1, 0], otherwise 50%..100% of full main-engine thrust.
* ``lateral``: left engine on [-1, -0.5], right engine on [0.5, 1], off in
  between; throttle 50%..100% over the active half-intervals.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigurationError, StateError

STATE_DIM = 8
ACTION_DIM = 2
TRAJECTORY_HEADER = ["t", "x", "y", "vx", "vy", "angle", "angvel", "lc", "rc",
                     "a_main", "a_lat", "reward", "done"]


REST_MODES = ("disturbing", "all", "main", "none")


class Termination(str, enum.Enum):
    NONE = "none"
    LANDED_REST = "landed_rest"
    CRASHED = "crashed"
    OUT_OF_BOUNDS = "out_of_bounds"
    STEP_LIMIT = "step_limit"


@dataclass
class LanderConfig:
    gravity: float = 1.6
    dt: float = 0.02
    step_limit: int = 1000
    main_accel: float = 3.0          # at 100% throttle
    side_accel: float = 0.6          # lateral push at 100% throttle
    side_torque: float = 2.0         # rad/s^2 at 100% throttle
    leg_spread: float = 0.1          # half distance between leg tips
    leg_height: float = 0.1          # tip depth below the body reference point
    start_height: float = 1.4
    start_x_range: float = 0.3
    start_impulse: float = 0.5       # initial velocity drawn from U(-v, v)
    crash_speed: float = 1.0         # vertical touchdown speed that breaks the legs
    crash_angle: float = 0.6         # tilt at which the hull hits the ground
    ground_friction: float = 0.1     # fraction of vx lost per grounded step
    ground_restoring: float = 20.0   # levelling torque per radian while grounded
    ground_damping: float = 0.8      # angular velocity kept per grounded step
    x_limit: float = 1.0
    y_limit: float = 2.0
    rest_speed: float = 0.01
    rest_steps: int = 10
    # which engine activity keeps the lander from settling: "disturbing" (lateral
    # firing or main thrust above weight), "all" engines, "main" only, or "none"
    rest_requires_idle: str = "disturbing"
    contact_tol: float = 1e-3
    # reward shaping
    distance_weight: float = 100.0
    speed_weight: float = 100.0
    tilt_weight: float = 100.0
    contact_reward: float = 10.0
    main_engine_cost: float = 0.3
    side_engine_cost: float = 0.03
    landing_bonus: float = 100.0
    crash_penalty: float = 100.0

    def __post_init__(self):
        if self.dt <= 0 or self.step_limit < 1 or self.rest_steps < 1:
            raise ConfigurationError("dt, step_limit and rest_steps must be positive")
        if self.rest_requires_idle not in REST_MODES:
            raise ConfigurationError(f"rest_requires_idle must be one of {REST_MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class LanderState:
    x: float
    y: float
    vx: float
    vy: float
    angle: float
    angular_velocity: float
    left_contact: float = 0.0
    right_contact: float = 0.0

    def as_array(self):
        return np.array([self.x, self.y, self.vx, self.vy, self.angle,
                         self.angular_velocity, self.left_contact, self.right_contact])


@dataclass
class StepResult:
    next_state: LanderState
    reward: float
    done: bool
    termination: Termination
    components: dict = field(default_factory=dict)

    @property
    def observation(self):
        return self.next_state.as_array()


def clamp_action(action):
    main = min(1.0, max(-1.0, float(action[0])))
    lateral = min(1.0, max(-1.0, float(action[1])))
    return main, lateral


def engine_throttles(main, lateral):
    """Map clamped action components to (main, side) throttles in [0, 1].

    ``side`` is signed: negative fires the left engine, positive the right.
    """
    main_throttle = 0.0 if main <= 0.0 else 0.5 + 0.5 * main
    if lateral <= -0.5:
        side = -(0.5 + (-lateral - 0.5))
    elif lateral >= 0.5:
        side = 0.5 + (lateral - 0.5)
    else:
        side = 0.0
    return main_throttle, side


def leg_tip_heights(y, angle, cfg):
    """Heights of the (left, right) leg tips above the ground."""
    lift = cfg.leg_height * (1.0 - math.cos(angle))
    s = cfg.leg_spread * math.sin(angle)
    return y + lift - s, y + lift + s


def potential(state, cfg):
    """Shaping potential; the contact part is reported as its own component."""
    return (
        -cfg.distance_weight * math.hypot(state.x, state.y)
        - cfg.speed_weight * math.hypot(state.vx, state.vy)
        - cfg.tilt_weight * abs(state.angle)
    )


def reward_components(prev, action, nxt, termination, cfg):
    """Per-step reward split into named parts (summed in this order)."""
    main, lateral = clamp_action(action)
    main_throttle, side = engine_throttles(main, lateral)
    if termination is Termination.LANDED_REST:
        terminal = cfg.landing_bonus
    elif termination in (Termination.CRASHED, Termination.OUT_OF_BOUNDS):
        terminal = -cfg.crash_penalty
    else:
        terminal = 0.0
    return {
        "shaping": potential(nxt, cfg) - potential(prev, cfg),
        "contact": cfg.contact_reward * (
            (nxt.left_contact - prev.left_contact) + (nxt.right_contact - prev.right_contact)
        ),
        "engine": (-cfg.main_engine_cost if main_throttle > 0.0 else 0.0)
        + (-cfg.side_engine_cost if side != 0.0 else 0.0),
        "terminal": terminal,
    }


def reward_of(prev, action, nxt, termination, cfg=None):
    cfg = cfg or LanderConfig()
    c = reward_components(prev, action, nxt, Termination(termination), cfg)
    return c["shaping"] + c["contact"] + c["engine"] + c["terminal"]


class LanderEnv:
    """Single-owner environment instance.

    ``reset`` takes a numpy ``Generator``; all randomness of an episode comes
    from that draw, the dynamics themselves are deterministic.
    """

    def __init__(self, cfg=None):
        self.cfg = cfg or LanderConfig()
        self.state = None
        self.t = 0
        self._rest_count = 0
        self._done = True

    def reset(self, rng):
        cfg = self.cfg
        x0, vx0, vy0 = rng.uniform(-1.0, 1.0, size=3)
        self.state = LanderState(
            x=float(x0) * cfg.start_x_range,
            y=cfg.start_height,
            vx=float(vx0) * cfg.start_impulse,
            vy=float(vy0) * cfg.start_impulse,
            angle=0.0,
            angular_velocity=0.0,
        )
        self.t = 0
        self._rest_count = 0
        self._done = False
        return self.state

    def _idle(self, main_throttle, side):
        # a firing engine keeps the lander from settling
        mode = self.cfg.rest_requires_idle
        if mode == "disturbing":
            # low main throttle only presses a grounded lander onto its legs
            return side == 0.0 and self.cfg.main_accel * main_throttle < self.cfg.gravity
        if mode == "all":
            return main_throttle == 0.0 and side == 0.0
        if mode == "main":
            return main_throttle == 0.0
        return True

    def step(self, action):
        if self._done:
            raise StateError("step() on a terminated episode; call reset()")
        cfg = self.cfg
        prev = self.state
        main, lateral = clamp_action(action)
        main_throttle, side = engine_throttles(main, lateral)

        ang = prev.angle
        sin_a, cos_a = math.sin(ang), math.cos(ang)
        thrust = cfg.main_accel * main_throttle
        ax = -sin_a * thrust + cos_a * cfg.side_accel * side
        ay = cos_a * thrust + sin_a * cfg.side_accel * side - cfg.gravity
        alpha = -cfg.side_torque * side

        # semi-implicit Euler
        vx = prev.vx + ax * cfg.dt
        vy = prev.vy + ay * cfg.dt
        omega = prev.angular_velocity + alpha * cfg.dt
        x = prev.x + vx * cfg.dt
        y = prev.y + vy * cfg.dt
        ang = ang + omega * cfg.dt

        termination = Termination.NONE
        tip_l, tip_r = leg_tip_heights(y, ang, cfg)
        lowest = min(tip_l, tip_r)
        if lowest <= 0.0:
            y -= lowest
            if vy < -cfg.crash_speed or abs(ang) > cfg.crash_angle:
                # impact velocity is kept so the shaping term sees the crash speed
                termination = Termination.CRASHED
            else:
                vy = max(vy, 0.0)
                vx *= 1.0 - cfg.ground_friction
                omega = cfg.ground_damping * omega - cfg.ground_restoring * ang * cfg.dt
            tip_l, tip_r = leg_tip_heights(y, ang, cfg)
        lc = 1.0 if tip_l <= cfg.contact_tol else 0.0
        rc = 1.0 if tip_r <= cfg.contact_tol else 0.0
        nxt = LanderState(x, y, vx, vy, ang, omega, lc, rc)

        self.t += 1
        if termination is Termination.NONE:
            if abs(x) > cfg.x_limit or y > cfg.y_limit:
                termination = Termination.OUT_OF_BOUNDS
            else:
                if lc and rc and self._idle(main_throttle, side) \
                        and math.hypot(vx, vy) < cfg.rest_speed:
                    self._rest_count += 1
                else:
                    self._rest_count = 0
                if self._rest_count >= cfg.rest_steps:
                    termination = Termination.LANDED_REST
                elif self.t >= cfg.step_limit:
                    termination = Termination.STEP_LIMIT

        comps = reward_components(prev, (main, lateral), nxt, termination, cfg)
        reward = comps["shaping"] + comps["contact"] + comps["engine"] + comps["terminal"]
        done = termination is not Termination.NONE
        self._done = done
        self.state = nxt
        return StepResult(nxt, reward, done, termination, comps)


class TrajectoryWriter:
    """CSV dump of one or more episodes (header ``TRAJECTORY_HEADER``)."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRAJECTORY_HEADER)

    def write(self, t, state, action, reward, done):
        s = state.as_array() if isinstance(state, LanderState) else state
        self._writer.writerow(
            [t, *(repr(float(v)) for v in s), repr(float(action[0])),
             repr(float(action[1])), repr(float(reward)), int(bool(done))]
        )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
