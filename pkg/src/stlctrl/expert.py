"""Scripted waypoint expert that produces demonstrations for imitation.

The expert drives to the coverage circle, brakes and dwells there, then heads
for the goal through a detour point beside the obstacle and stops inside the
goal.  Steering is proportional to the heading error and acceleration is
proportional to the speed error; both are clipped to the control bounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import Bicycle
from .envgen import Environment, SPEC_BUILDERS
from .stl import robustness

__all__ = ["ExpertGains", "Demo", "expert_rollout", "demonstrate", "ExpertFailure",
           "passing_side"]


class ExpertFailure(RuntimeError):
    """No attempt produced a trajectory that satisfies the specification."""


@dataclass(frozen=True)
class ExpertGains:
    v_cruise: float = 2.5
    k_heading: float = 1.5
    k_speed: float = 1.5
    k_approach: float = 0.8
    detour_margin: float = 0.9
    dwell_offset: float = 0.5
    dwell_angle: float | None = None
    dwell_steps: int = 12


@dataclass
class Demo:
    """A demonstrated trajectory: states (T+1, n), controls (T, m), its env."""
    states: np.ndarray
    controls: np.ndarray
    env: Environment
    rho: float = float("nan")
    side: str = ""          # side the obstacle was passed on, see passing_side

    @property
    def T(self) -> int:
        return self.controls.shape[0]


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _waypoints(env: Environment, kind: str, side: str, gains: ExpertGains) -> list:
    goal = np.array(env.only("goal").center)
    obstacles = env.of_kind("obstacle")
    pts = []
    origin = None
    if kind == "phi":
        cov = np.array(env.only("coverage").center)
        if gains.dwell_angle is None:
            # perpendicular to the coverage-to-goal line, on the left
            d = goal - cov
            away = np.array([-d[1], d[0]]) / max(np.linalg.norm(d), 1e-9)
        else:
            away = np.array([math.cos(gains.dwell_angle), math.sin(gains.dwell_angle)])
        pts.append(("dwell", cov + gains.dwell_offset * env.only("coverage").radius * away))
        origin = cov
    if obstacles and side != "none":
        obs = obstacles[0]
        c = np.array(obs.center)
        if origin is None:
            origin = np.array(env.of_kind("start")[0].center) if env.of_kind("start") else c - (goal - c)
        d = goal - origin
        d = d / max(np.linalg.norm(d), 1e-9)
        left = np.array([-d[1], d[0]])
        n = left if side == "left" else -left
        pts.append(("pass", c + (obs.radius + gains.detour_margin) * n))
    pts.append(("stop", goal))
    return pts


def expert_rollout(env: Environment, x0, T: int, kind: str = "phi", side: str = "left",
                   gains: ExpertGains = ExpertGains(), system: Bicycle = Bicycle()):
    """Closed-loop expert trajectory of T steps without disturbance."""
    lo, hi = system.bounds.lower, system.bounds.upper
    pts = _waypoints(env, kind, side, gains)
    k, dwell = 0, 0
    x = np.asarray(x0, dtype=float)
    states, controls = [x], []
    goal_r = env.only("goal").radius
    cov_r = env.only("coverage").radius if kind == "phi" else 0.0
    for _ in range(T):
        role, target = pts[k]
        delta_p = target - x[:2]
        dist = float(np.hypot(*delta_p))
        if role == "dwell" and dist < 0.25 * cov_r:
            role = "hold"
        if role == "hold":
            v_des = 0.0
            dwell += 1
        elif role == "stop":
            v_des = min(gains.v_cruise, gains.k_approach * max(dist - 0.3 * goal_r, 0.0))
        elif role == "dwell":
            v_des = min(gains.v_cruise, 0.3 + gains.k_approach * dist)
        else:
            v_des = gains.v_cruise
        heading = math.atan2(delta_p[1], delta_p[0])
        steer = gains.k_heading * _wrap(heading - x[2]) if dist > 0.2 else 0.0
        accel = gains.k_speed * (v_des - x[3]) / system.dt
        u = np.clip([accel, steer], lo, hi)
        x = system.step(x, u)
        states.append(x)
        controls.append(u)
        if role == "hold" and dwell >= gains.dwell_steps:
            k += 1
        elif role == "pass" and (dist < 1.0 or _passed(x, target, pts[k + 1][1])):
            k += 1
    return np.array(states), np.array(controls)


def _passed(x, point, nxt) -> bool:
    """True once the car is closer to the next waypoint than the detour point is."""
    return np.hypot(*(nxt - x[:2])) < np.hypot(*(nxt - point)) - 0.5


def _inside(states, workspace) -> bool:
    xmin, xmax, ymin, ymax = workspace
    x, y = states[:, 0], states[:, 1]
    return bool(np.all((x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)))


def passing_side(states, env: Environment) -> str:
    """'left' or 'right' of the obstacle, seen along the route to the goal.

    The route runs from the coverage centre (or the start region) to the
    goal; the side is read off the closest approach to the obstacle.
    Returns 'none' if the environment has no obstacle.
    """
    obstacles = env.of_kind("obstacle")
    if not obstacles:
        return "none"
    c = np.array(obstacles[0].center)
    goal = np.array(env.only("goal").center)
    if env.of_kind("coverage"):
        origin = np.array(env.only("coverage").center)
    elif env.of_kind("start"):
        origin = np.array(env.of_kind("start")[0].center)
    else:
        origin = np.asarray(states)[0, :2]
    xy = np.asarray(states)[:, :2]
    w = xy[np.argmin(np.hypot(*(xy - c).T))] - c
    d = goal - origin
    return "left" if d[0] * w[1] - d[1] * w[0] > 0 else "right"


def _sides(side: str) -> tuple:
    if side == "auto":
        return ("left", "right", "none")
    if side not in ("left", "right", "none"):
        raise ValueError(f"side must be 'left', 'right', 'none' or 'auto', not {side!r}")
    return (side,)


def demonstrate(env: Environment, x0, T: int, kind: str = "phi", side: str = "auto",
                system: Bicycle = Bicycle(), attempts: int = 24, max_attempts: int = 96,
                seed=0) -> Demo:
    """A validated demonstration (robustness > 0 without disturbance, inside the workspace).

    With ``side='auto'`` detours on either side and the direct route are all
    tried; an explicit 'left' or 'right' only accepts trajectories that
    actually pass the obstacle on that side.  Every attempt after the first
    perturbs the gains; the most robust satisfying trajectory over all
    attempts wins.  The search runs at least
    ``attempts`` times and continues up to ``max_attempts`` until something
    satisfies.
    """
    spec = SPEC_BUILDERS[kind](env)
    rng = np.random.default_rng(seed)
    best = None
    for attempt in range(max(attempts, max_attempts)):
        if attempt >= attempts and best is not None:
            break
        gains = ExpertGains()
        if attempt:
            gains = replace(gains, v_cruise=rng.uniform(1.5, 3.0),
                            k_heading=rng.uniform(1.0, 2.5),
                            detour_margin=rng.uniform(0.4, 2.0),
                            dwell_offset=rng.uniform(0.0, 0.6),
                            dwell_angle=rng.uniform(0.0, np.pi),
                            k_approach=rng.uniform(0.5, 1.2))
        for s in _sides(side):
            states, controls = expert_rollout(env, x0, T, kind, s, gains, system)
            if not _inside(states, env.workspace):
                continue
            passed = passing_side(states, env)
            if side in ("left", "right") and passed != side:
                continue
            rho = float(robustness(spec, states).value.value)
            if rho > 0 and (best is None or rho > best.rho):
                best = Demo(states, controls, env, rho, passed)
    if best is not None:
        return best
    tried = max(attempts, max_attempts)
    raise ExpertFailure(f"no satisfying demonstration after {tried} attempts "
                        f"(x_cov={env.params.get('x_cov')})")
