"""Run configuration: one JSON file covering system, layout, policy, training
and deployment settings.  Unknown keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .deploy import DeployConfig
from .dynamics import Bicycle, ControlBounds, DisturbanceModel
from .envgen import Layout
from .policy import PolicyConfig
from .train import TrainConfig

__all__ = ["RunConfig", "SystemConfig", "DemoConfig", "load_config", "default_config_path",
           "CONFIG_VERSION"]

CONFIG_VERSION = 1


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ValueError(f"unknown keys in [{where}]: {sorted(extra)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _inf(v):
    return math.inf if v is None else float(v)


@dataclass(frozen=True)
class SystemConfig:
    dt: float = 0.5
    lf: float = 0.5
    lr: float = 0.7
    v_max: float = 5.0
    u_lower: tuple = (-3.0, -0.344)
    u_upper: tuple = (3.0, 0.344)
    disturbance_mean: tuple = (0.0, 0.0)
    disturbance_var: tuple = (0.02, 0.05)   # (d_a, d_delta)

    def bicycle(self) -> Bicycle:
        return Bicycle(self.dt, self.lf, self.lr, self.v_max,
                       ControlBounds(self.u_lower, self.u_upper))

    def disturbance(self) -> DisturbanceModel:
        return DisturbanceModel(self.disturbance_mean, self.disturbance_var)


@dataclass(frozen=True)
class DemoConfig:
    count: int = 32
    side: str = "auto"


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    layout: Layout = field(default_factory=Layout)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    deploy: DeployConfig = field(default_factory=DeployConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        allowed = {f.name for f in fields(cls)}
        extra = set(d) - allowed
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        system = _strict(SystemConfig, d.get("system", {}), "system")
        layout = _strict(Layout, d.get("layout", {}), "layout")
        pol = dict(d.get("policy", {}))
        pol.setdefault("u_lower", system.u_lower)
        pol.setdefault("u_upper", system.u_upper)
        policy = _strict(PolicyConfig, pol, "policy")
        tr = dict(d.get("train", {}))
        if "temperature" in tr:
            tr["temperature"] = _inf(tr["temperature"])
        train = _strict(TrainConfig, tr, "train")
        dep = dict(d.get("deploy", {}))
        if "temperature" in dep:
            dep["temperature"] = _inf(dep["temperature"])
        dep.setdefault("spec", train.spec)
        dep.setdefault("T", train.T)
        deploy = _strict(DeployConfig, dep, "deploy")
        demos = _strict(DemoConfig, d.get("demos", {}), "demos")
        return cls(system, layout, policy, train, deploy, demos)

    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            for k, v in sec.items():
                if isinstance(v, float) and math.isinf(v):
                    sec[k] = None
                elif isinstance(v, tuple):
                    sec[k] = list(v)
            out[f.name] = sec
        return out

    def replace_section(self, name: str, **changes) -> "RunConfig":
        d = self.to_dict()
        d[name].update(changes)
        return RunConfig.from_dict(d)


def default_config_path(name: str = "case_study"):
    """Path of a shipped configuration (``case_study``, ``desk_phi``, ``desk_reach_avoid``)."""
    return resources.files("stlctrl") / "configs" / f"{name}.json"


def load_config(path=None) -> RunConfig:
    """Load a run configuration from a file or a shipped name.

    ``None`` loads the case study.
    """
    if path is None:
        text = default_config_path().read_text()
    elif not Path(path).exists() and default_config_path(str(path)).is_file():
        text = default_config_path(str(path)).read_text()
    else:
        text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(d)
