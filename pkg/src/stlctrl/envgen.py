"""Environment family: circular regions, channel images and specifications.

The case-study layout puts the coverage circle at ``(x_cov, cov_y)``, the goal
at a fixed point and the obstacle halfway in x between coverage and goal, at a
fixed height that keeps it across the direct coverage-to-goal path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .stl import Formula, parse

__all__ = ["Region", "Environment", "EnvImage", "Layout", "sample_case_study_env",
           "case_study_env", "sample_initial_state", "render", "bind_predicates",
           "build_phi", "build_reach_avoid", "build_psi", "sample_driving_env",
           "MissingRegion", "PHI_TEXT", "REACH_AVOID_TEXT", "PSI_TEXT"]

KINDS = ("start", "coverage", "obstacle", "goal", "road-boundary")
CHANNELS = ("start", "coverage", "obstacle", "goal")
DRIVING_CHANNELS = ("start", "obstacle", "goal", "road-boundary")

PHI_TEXT = ("((ev alw[0,8] (cov < 0 & V < 2.0)) until (ev alw (goal < 0 & V < 0.5)))"
            " & alw !(obs < 0)")
REACH_AVOID_TEXT = "(ev alw (goal < 0 & V < 0.5)) & alw !(obs < 0)"
PSI_TEXT = ("alw (road_lo > 0 & road_hi > 0 & !(obs < 0))"
            " & alw ((obs < 1.2) -> (V < 0.55))"
            " & ev alw[0,2] (goal < 0 & V > 1.0)")


class MissingRegion(ValueError):
    """The environment lacks a region kind the specification refers to."""


@dataclass(frozen=True)
class Region:
    kind: str
    center: tuple
    radius: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown region kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("region radius must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class Environment:
    regions: tuple
    workspace: tuple = (0.0, 14.0, 0.0, 10.0)
    channel_order: tuple = CHANNELS
    road: tuple | None = None
    params: dict = field(default_factory=dict, compare=False)
    out_of_distribution: bool = False

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "workspace", tuple(float(v) for v in self.workspace))

    def of_kind(self, kind: str) -> list:
        return [r for r in self.regions if r.kind == kind]

    def only(self, kind: str) -> Region:
        rs = self.of_kind(kind)
        if len(rs) != 1:
            raise MissingRegion(f"expected exactly one {kind!r} region, found {len(rs)}")
        return rs[0]

    def validate(self):
        self.only("goal")
        return self

    def to_json(self) -> dict:
        d = {"regions": [{"kind": r.kind, "cx": r.center[0], "cy": r.center[1], "r": r.radius}
                         for r in self.regions],
             "workspace": list(self.workspace)}
        if self.road is not None:
            d["road"] = list(self.road)
        if self.channel_order != CHANNELS:
            d["channels"] = list(self.channel_order)
        if self.params:
            d["params"] = dict(self.params)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Environment":
        regions = [Region(r["kind"], (r["cx"], r["cy"]), r["r"]) for r in d["regions"]]
        return cls(regions, tuple(d.get("workspace", (0, 14, 0, 10))),
                   tuple(d.get("channels", CHANNELS)),
                   tuple(d["road"]) if d.get("road") is not None else None,
                   dict(d.get("params", {})))


@dataclass(frozen=True)
class Layout:
    """Geometry of the case-study family; every default is configurable."""
    workspace: tuple = (0.0, 14.0, 0.0, 10.0)
    goal: tuple = (13.0, 5.0)
    goal_r: float = 1.0
    cov_y: float = 8.0
    cov_r: float = 1.0
    obs_r: float = 1.0
    obs_y: float | None = 6.0       # None: midway between coverage and goal
    x_cov_range: tuple = (1.0, 10.0)
    start_box: tuple = (0.0, 1.0, 4.0, 6.0)
    start_r: float = 1.0
    heading_range: tuple = (np.pi / 2 - 0.1, np.pi / 2 + 0.1)
    speed_range: tuple = (0.0, 0.5)


def case_study_env(x_cov: float, layout: Layout = Layout()) -> Environment:
    gx, gy = layout.goal
    lo, hi = layout.x_cov_range
    sx0, sx1, sy0, sy1 = layout.start_box
    regions = [
        Region("start", ((sx0 + sx1) / 2, (sy0 + sy1) / 2), layout.start_r),
        Region("coverage", (x_cov, layout.cov_y), layout.cov_r),
        Region("obstacle", ((x_cov + gx) / 2, (layout.cov_y + gy) / 2
                            if layout.obs_y is None else layout.obs_y), layout.obs_r),
        Region("goal", (gx, gy), layout.goal_r),
    ]
    return Environment(regions, layout.workspace, CHANNELS, None, {"x_cov": float(x_cov)},
                       out_of_distribution=not lo <= x_cov <= hi)


def sample_case_study_env(x_cov: float | None = None, seed=None,
                          layout: Layout = Layout()) -> Environment:
    """An environment of the family; ``x_cov`` uniform on its range if not given."""
    if x_cov is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        x_cov = rng.uniform(*layout.x_cov_range)
    return case_study_env(float(x_cov), layout)


def sample_initial_state(rng: np.random.Generator, layout: Layout = Layout()) -> np.ndarray:
    x0, x1, y0, y1 = layout.start_box
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1),
                     rng.uniform(*layout.heading_range), rng.uniform(*layout.speed_range)])


# --- rendering -------------------------------------------------------------

@dataclass(frozen=True)
class EnvImage:
    """Binary channels (C, H, W); row i covers y ascending from ymin."""
    data: np.ndarray
    channels: tuple
    workspace: tuple

    @property
    def shape(self):
        return self.data.shape

    def pixel_centers(self):
        _, h, w = self.data.shape
        xmin, xmax, ymin, ymax = self.workspace
        xs = xmin + (np.arange(w) + 0.5) * (xmax - xmin) / w
        ys = ymin + (np.arange(h) + 0.5) * (ymax - ymin) / h
        return xs, ys

    def write_pgm(self, directory) -> list:
        """One plain PGM per channel; returns the written paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, ch in zip(self.channels, self.data):
            p = directory / f"{name}.pgm"
            h, w = ch.shape
            rows = "\n".join(" ".join(str(int(v)) for v in row) for row in ch[::-1])
            p.write_text(f"P2\n{w} {h}\n1\n{rows}\n")
            paths.append(p)
        return paths


def render(env: Environment, resolution=(32, 32)) -> EnvImage:
    h, w = (resolution, resolution) if np.isscalar(resolution) else resolution
    if h < 16 or w < 16:
        raise ValueError("resolution must be at least 16x16")
    xmin, xmax, ymin, ymax = env.workspace
    xs = xmin + (np.arange(w) + 0.5) * (xmax - xmin) / w
    ys = ymin + (np.arange(h) + 0.5) * (ymax - ymin) / h
    X, Y = np.meshgrid(xs, ys)
    data = np.zeros((len(env.channel_order), h, w))
    for r in env.regions:
        cx, cy = r.center
        if not (xmin <= cx <= xmax and ymin <= cy <= ymax):
            raise ValueError(f"{r.kind} region centred outside the workspace")
    for k, kind in enumerate(env.channel_order):
        if kind == "road-boundary":
            if env.road is not None:
                lo, hi = env.road
                data[k] = (Y <= lo) | (Y >= hi)
            continue
        for r in env.of_kind(kind):
            cx, cy = r.center
            data[k] = np.maximum(data[k], (X - cx) ** 2 + (Y - cy) ** 2 < r.radius ** 2)
    return EnvImage(data, tuple(env.channel_order), env.workspace)


# --- predicates ------------------------------------------------------------

def _dist_minus_radius(cx, cy, radius):
    def mu(x):
        dx = x[..., 0] - cx
        dy = x[..., 1] - cy
        if isinstance(x, Var):
            return ad.hypot(dx, dy) - radius
        return np.sqrt(dx * dx + dy * dy) - radius
    return mu


def _nearest(mus):
    if len(mus) == 1:
        return mus[0]

    def mu(x):
        out = mus[0](x)
        for m in mus[1:]:
            out = ad.min2(out, m(x)) if isinstance(x, Var) else np.minimum(out, m(x))
        return out
    return mu


def _region_params(envs, kind):
    """Per-slot centre/radius; arrays of shape (B, 1) for a batch of envs."""
    per_env = [e.of_kind(kind) for e in envs]
    counts = {len(rs) for rs in per_env}
    if len(counts) != 1:
        raise ValueError(f"environments in a batch differ in their number of {kind!r} regions")
    out = []
    for slot in range(counts.pop()):
        rs = [rs[slot] for rs in per_env]
        if len(envs) == 1 and not isinstance(envs, list):
            r = rs[0]
            out.append((r.center[0], r.center[1], r.radius))
        else:
            out.append(tuple(np.array(v, dtype=float)[:, None] for v in
                             zip(*[(r.center[0], r.center[1], r.radius) for r in rs])))
    return out


def bind_predicates(env) -> dict:
    """Name -> mu map: signed distance outside each region kind, plus speed/pose.

    Region names: ``cov``, ``goal``, ``obs`` (nearest obstacle), ``start``.
    Each is distance to the centre minus the radius, so negative inside.
    ``env`` may be a list of environments with the same region counts; the
    predicates then expect states of shape (B, T+1, n), one row per env.
    """
    envs = env if isinstance(env, list) else (env,)
    preds = {"x": lambda s: s[..., 0], "y": lambda s: s[..., 1],
             "psi": lambda s: s[..., 2], "V": lambda s: s[..., 3]}
    for kind, name in (("coverage", "cov"), ("goal", "goal"), ("start", "start"),
                       ("obstacle", "obs")):
        slots = _region_params(envs, kind)
        if slots:
            preds[name] = _nearest([_dist_minus_radius(*s) for s in slots])
    roads = [e.road for e in envs]
    if all(r is not None for r in roads):
        if isinstance(env, list):
            lo = np.array([r[0] for r in roads])[:, None]
            hi = np.array([r[1] for r in roads])[:, None]
        else:
            lo, hi = env.road
        preds["road_lo"] = lambda s: s[..., 1] - lo
        preds["road_hi"] = lambda s: hi - s[..., 1]
    return preds


def _require(env, kinds):
    for e in (env if isinstance(env, list) else [env]):
        for k in kinds:
            if not e.of_kind(k):
                raise MissingRegion(f"environment has no {k!r} region")


def build_phi(env) -> Formula:
    """Coverage-dwell, then reach-and-stop in goal, always avoiding the obstacle."""
    _require(env, ("coverage", "goal", "obstacle"))
    return parse(PHI_TEXT, bind_predicates(env))


def build_reach_avoid(env) -> Formula:
    _require(env, ("goal", "obstacle"))
    return parse(REACH_AVOID_TEXT, bind_predicates(env))


def build_psi(env) -> Formula:
    """Road-construction driving specification."""
    _require(env, ("goal", "obstacle"))
    if any(e.road is None for e in (env if isinstance(env, list) else [env])):
        raise MissingRegion("environment has no road boundary")
    return parse(PSI_TEXT, bind_predicates(env))


SPEC_BUILDERS = {"phi": build_phi, "reach-avoid": build_reach_avoid, "psi": build_psi}


def sample_driving_env(seed=None, n_obstacles: int = 2) -> Environment:
    """Straight road y in [3, 7] with circular obstacles and a goal at the far end."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    regions = [Region("start", (0.5, 5.0), 1.0), Region("goal", (12.5, 5.0), 1.5)]
    xs = np.sort(rng.uniform(4.0, 9.5, size=n_obstacles))
    for x in xs:
        regions.append(Region("obstacle", (float(x), float(rng.uniform(3.5, 6.5))), 0.5))
    return Environment(regions, (0.0, 14.0, 0.0, 10.0), DRIVING_CHANNELS, (3.0, 7.0),
                       {"obstacle_x": [float(x) for x in xs]})


def with_regions(env: Environment, regions) -> Environment:
    return replace(env, regions=tuple(regions))


def save_env(env: Environment, path):
    Path(path).write_text(json.dumps(env.to_json(), indent=2))


def load_env(path) -> Environment:
    return Environment.from_json(json.loads(Path(path).read_text()))
