"""In-repo continuous-control tasks with a uniform reset/step interface.

Two desk-scale environments:

* ``MountainCar1D`` -- the classic continuous mountain car with its
  (position, velocity) state compressed to a single scalar observation that
  encodes position and direction of movement. Reaching the goal pays +100;
  every step pays a fuel penalty of -0.1 * a^2.
* ``PendulumSwingUp`` -- a torque-limited swing-up task with observation
  (cos theta, sin theta, theta_dot) and a shifted/scaled reward so the best
  achievable episode return is ~1000, matching the five-bin tiering range.

Scripted controllers of graded quality live here too; they are the data
sources for offline dataset collection.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    max_episode_steps: int
    return_range: tuple
    # action bounds are [-1, 1] for every environment in this package

    def __post_init__(self):
        assert self.max_episode_steps > 0
        assert self.return_range[0] < self.return_range[1]


class MountainCar1D:
    """Continuous mountain car with a compressed scalar observation.

    Physics constants follow the classic continuous variant; the observable
    state is sign(velocity) * normalized position in [-1, 1], which hides the
    speed magnitude but keeps position and direction of movement.
    """

    P_MIN = -1.2
    P_MAX = 0.6
    GOAL = 0.45
    V_MAX = 0.07
    FORCE = 0.0015
    GRAVITY = 0.0025
    FUEL_COEF = 0.1
    GOAL_REWARD = 100.0
    VALLEY_BOTTOM = -math.pi / 6.0  # zero-slope point of the sin(3p) track

    def __init__(self, max_episode_steps=300):
        self.spec = EnvSpec(
            env_id="mountain-car-1d",
            state_dim=1,
            action_dim=1,
            max_episode_steps=max_episode_steps,
            return_range=(-self.FUEL_COEF * max_episode_steps, self.GOAL_REWARD),
        )
        self.position = 0.0
        self.velocity = 0.0
        self._steps = 0
        self.terminated = False
        self.clamp_warnings = 0

    def observe(self):
        frac = (self.position - self.P_MIN) / (self.P_MAX - self.P_MIN)
        sign = 1.0 if self.velocity >= 0.0 else -1.0
        return np.array([sign * frac], dtype=np.float64)

    @property
    def full_state(self):
        return (self.position, self.velocity)

    def set_state(self, position, velocity):
        self.position = float(np.clip(position, self.P_MIN, self.P_MAX))
        self.velocity = float(np.clip(velocity, -self.V_MAX, self.V_MAX))

    def reset(self, rng):
        self.position = rng.uniform(-0.6, -0.4)
        self.velocity = 0.0
        self._steps = 0
        self.terminated = False
        return self.observe()

    def step(self, action):
        a = float(np.asarray(action).ravel()[0])
        if abs(a) > 1.0:
            self.clamp_warnings += 1
            a = float(np.clip(a, -1.0, 1.0))
        self.velocity += a * self.FORCE - self.GRAVITY * math.cos(3.0 * self.position)
        self.velocity = float(np.clip(self.velocity, -self.V_MAX, self.V_MAX))
        self.position += self.velocity
        self.position = float(np.clip(self.position, self.P_MIN, self.P_MAX))
        if self.position <= self.P_MIN and self.velocity < 0.0:
            self.velocity = 0.0
        self._steps += 1
        reward = -self.FUEL_COEF * a * a
        self.terminated = self.position >= self.GOAL
        if self.terminated:
            reward += self.GOAL_REWARD
        done = self.terminated or self._steps >= self.spec.max_episode_steps
        return self.observe(), reward, done

    def worst_case_label(self, position, velocity, action):
        """True iff the transition shows the adversarial pattern: the cart is
        climbing a slope but the action decelerates it back downhill.
        """
        a = float(np.asarray(action).ravel()[0])
        uphill = (position > self.VALLEY_BOTTOM and velocity > 0.0) or (
            position < self.VALLEY_BOTTOM and velocity < 0.0
        )
        return bool(uphill and abs(velocity) > 0.003 and a * velocity < 0.0 and abs(a) > 0.1)


class PendulumSwingUp:
    """Torque-limited pendulum swing-up with a non-negative scaled reward.

    theta = 0 is upright. Per-step reward is 5 * (1 - cost / cost_max)^6 with
    the quadratic angle/velocity/torque cost; the sharpening exponent keeps a
    200-step episode near 1000 for a balancing controller while pushing
    random behavior to the bottom of the range.
    """

    DT = 0.05
    G = 10.0
    MASS = 1.0
    LENGTH = 1.0
    MAX_SPEED = 8.0
    MAX_TORQUE = 3.0
    _COST_MAX = math.pi**2 + 0.1 * MAX_SPEED**2 + 0.001 * MAX_TORQUE**2

    def __init__(self, max_episode_steps=200):
        self.spec = EnvSpec(
            env_id="pendulum",
            state_dim=3,
            action_dim=1,
            max_episode_steps=max_episode_steps,
            return_range=(0.0, 5.0 * max_episode_steps),
        )
        self.theta = 0.0
        self.theta_dot = 0.0
        self._steps = 0
        self.terminated = False
        self.clamp_warnings = 0

    def observe(self):
        return np.array([math.cos(self.theta), math.sin(self.theta), self.theta_dot], dtype=np.float64)

    @property
    def full_state(self):
        return (self.theta, self.theta_dot)

    def reset(self, rng):
        self.theta = rng.uniform(-math.pi, math.pi)
        self.theta_dot = rng.uniform(-1.0, 1.0)
        self._steps = 0
        self.terminated = False
        return self.observe()

    def step(self, action):
        a = float(np.asarray(action).ravel()[0])
        if abs(a) > 1.0:
            self.clamp_warnings += 1
            a = float(np.clip(a, -1.0, 1.0))
        torque = a * self.MAX_TORQUE
        th = _angle_normalize(self.theta)
        cost = th * th + 0.1 * self.theta_dot**2 + 0.001 * torque * torque
        accel = (3.0 * self.G / (2.0 * self.LENGTH)) * math.sin(self.theta)
        accel += 3.0 / (self.MASS * self.LENGTH**2) * torque
        self.theta_dot = float(np.clip(self.theta_dot + accel * self.DT, -self.MAX_SPEED, self.MAX_SPEED))
        self.theta = _angle_normalize(self.theta + self.theta_dot * self.DT)
        self._steps += 1
        reward = 5.0 * (1.0 - cost / self._COST_MAX) ** 6
        self.terminated = False  # swing-up never terminates early
        done = self._steps >= self.spec.max_episode_steps
        return self.observe(), reward, done


def _angle_normalize(x):
    return ((x + math.pi) % (2.0 * math.pi)) - math.pi


ENV_IDS = ("mountain-car-1d", "pendulum")


def make_env(env_id, max_episode_steps=None):
    if env_id == "mountain-car-1d":
        return MountainCar1D(**({"max_episode_steps": max_episode_steps} if max_episode_steps else {}))
    if env_id == "pendulum":
        return PendulumSwingUp(**({"max_episode_steps": max_episode_steps} if max_episode_steps else {}))
    raise UsageError(f"unknown env id {env_id!r}; known: {ENV_IDS}")


# --- scripted controllers used for data collection -------------------------


class UniformRandomPolicy:
    def __init__(self, action_dim=1):
        self.action_dim = action_dim

    def act(self, obs, rng):
        return rng.uniform(-1.0, 1.0, size=self.action_dim)


class MountainCarBangBang:
    """Pushes in the direction of travel, pumping energy until the goal.

    Works from the compressed observation alone: its sign is the direction of
    movement.
    """

    def act(self, obs, rng=None):
        direction = 1.0 if obs[0] >= 0.0 else -1.0
        return np.array([direction])


class PendulumController:
    """Energy-pumping swing-up with a PD balance phase near upright.

    ``noise`` in [0, 1] blends the control signal with uniform noise, giving a
    family of graded-quality behaviors for tiered dataset collection.
    """

    def __init__(self, noise=0.0, kp=8.0, kd=2.0, k_energy=1.2):
        self.noise = float(noise)
        self.kp = kp
        self.kd = kd
        self.k_energy = k_energy

    def act(self, obs, rng):
        cos_th, sin_th, theta_dot = obs
        theta = math.atan2(sin_th, cos_th)
        inertia = PendulumSwingUp.MASS * PendulumSwingUp.LENGTH**2 / 3.0
        potential = 0.5 * PendulumSwingUp.MASS * PendulumSwingUp.G * PendulumSwingUp.LENGTH * cos_th
        energy = 0.5 * inertia * theta_dot**2 + potential
        energy_top = 0.5 * PendulumSwingUp.MASS * PendulumSwingUp.G * PendulumSwingUp.LENGTH
        if abs(theta) < 0.6:
            torque = -self.kp * theta - self.kd * theta_dot
        else:
            torque = self.k_energy * theta_dot * (energy_top - energy)
            if torque == 0.0:  # dead start hanging exactly still
                torque = PendulumSwingUp.MAX_TORQUE
        control = float(np.clip(torque / PendulumSwingUp.MAX_TORQUE, -1.0, 1.0))
        if self.noise > 0.0:
            control = (1.0 - self.noise) * control + self.noise * rng.uniform(-1.0, 1.0)
        return np.array([control])


class PendulumSpinner:
    """Deliberately bad behavior: keeps torque aligned with the spin direction
    so the pendulum whirls at high speed and collects near-zero reward.
    """

    def __init__(self, noise=0.0):
        self.noise = float(noise)

    def act(self, obs, rng):
        control = 1.0 if obs[2] >= 0.0 else -1.0
        if self.noise > 0.0:
            control = (1.0 - self.noise) * control + self.noise * rng.uniform(-1.0, 1.0)
        return np.array([control])
