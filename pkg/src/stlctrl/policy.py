"""Trajectory-feedback controller: CNN environment encoder, LSTM, bounded head.

The CNN turns the channel image into the LSTM's initial (h, c); the LSTM
consumes the past trajectory one state at a time; the head MLP maps the LSTM
output to controls squashed into the control bounds with tanh.  Future states
come from unrolling the LSTM through the system dynamics.

All functions accept parameters bound either as tape Vars or as plain numpy
arrays, so the same code gives differentiable rollouts and fast simulation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

__all__ = ["PolicyConfig", "PolicyParams", "init_params", "encode_env", "lstm_consume",
           "control_head", "rollout", "consume_prefix", "Rollout", "normalize_states",
           "CHECKPOINT_VERSION"]

CHECKPOINT_VERSION = 1
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class PolicyConfig:
    state_dim: int = 4
    control_dim: int = 2
    n_h: int = 32
    n_c: int = 16
    head_hidden: int = 32
    channels: int = 4
    resolution: int = 32
    conv_filters: tuple = (8, 16)
    # state normalisation: (x - offset) / scale
    state_offset: tuple = (7.0, 5.0, 0.0, 0.0)
    state_scale: tuple = (7.0, 5.0, np.pi, 5.0)
    u_lower: tuple = (-3.0, -0.344)
    u_upper: tuple = (3.0, 0.344)

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        for name in ("state_offset", "state_scale", "u_lower", "u_upper"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def conv_sizes(self) -> list:
        sizes, s = [], self.resolution
        for _ in self.conv_filters:
            s = (s - 3) // 2 + 1
            sizes.append(s)
        return sizes


def _conv_index(size: int):
    out = (size - 3) // 2 + 1
    i, j = np.meshgrid(np.arange(out), np.arange(out), indexing="ij")
    ki, kj = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    rows = 2 * i.reshape(-1, 1) + ki.reshape(1, -1)
    cols = 2 * j.reshape(-1, 1) + kj.reshape(1, -1)
    return rows, cols


def _shapes(cfg: PolicyConfig) -> dict:
    f1, f2 = cfg.conv_filters
    s2 = cfg.conv_sizes[-1]
    nh = cfg.n_h
    return {
        "cnn.conv1.w": (cfg.channels * 9, f1), "cnn.conv1.b": (f1,),
        "cnn.conv2.w": (f1 * 9, f2), "cnn.conv2.b": (f2,),
        "cnn.fc.w": (f2 * s2 * s2, cfg.n_c), "cnn.fc.b": (cfg.n_c,),
        "init.h.w": (cfg.n_c, nh), "init.h.b": (nh,),
        "init.c.w": (cfg.n_c, nh), "init.c.b": (nh,),
        "lstm.w": (cfg.state_dim + nh, 4 * nh), "lstm.b": (4 * nh,),
        "head.l1.w": (nh, cfg.head_hidden), "head.l1.b": (cfg.head_hidden,),
        "head.l2.w": (cfg.head_hidden, cfg.control_dim), "head.l2.b": (cfg.control_dim,),
    }


@dataclass
class PolicyParams:
    config: PolicyConfig
    weights: dict = field(default_factory=dict)

    @property
    def head_names(self) -> list:
        return [k for k in self.weights if k.startswith(HEAD_PREFIX)]

    @property
    def body_names(self) -> list:
        return [k for k in self.weights if not k.startswith(HEAD_PREFIX)]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.config, {k: v.copy() for k, v in self.weights.items()})

    def bind(self, tape: Tape | None = None, wrt=None) -> dict:
        """Weights as tape leaves (names in ``wrt``; all if None) or plain arrays."""
        if tape is None:
            return dict(self.weights)
        names = set(self.weights) if wrt is None else set(wrt)
        return {k: tape.var(v) if k in names else v for k, v in self.weights.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def to_json(self) -> dict:
        cfg = asdict(self.config)
        return {"format": "stlctrl-policy", "version": CHECKPOINT_VERSION, "config": cfg,
                "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                            for k, v in self.weights.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "PolicyParams":
        if d.get("format") != "stlctrl-policy":
            raise ValueError("not a policy checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        cfg = PolicyConfig(**d["config"])
        weights = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                   for k, v in d["weights"].items()}
        expected = _shapes(cfg)
        if set(weights) != set(expected) or any(weights[k].shape != expected[k] for k in expected):
            raise ValueError("checkpoint weights do not match its configuration")
        return cls(cfg, {k: weights[k] for k in expected})

    def save(self, path, extra: dict | None = None):
        d = self.to_json()
        if extra:
            d["extra"] = extra
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load(cls, path) -> "PolicyParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def init_params(cfg: PolicyConfig = PolicyConfig(), seed=0) -> PolicyParams:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget-gate bias set to +1."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights = {}
    fan_in = None
    for name, shape in _shapes(cfg).items():
        if name.endswith(".w"):
            fan_in = shape[0]
        bound = 1.0 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    nh = cfg.n_h
    weights["lstm.b"][nh:2 * nh] = 1.0
    return PolicyParams(cfg, weights)


# --- network pieces ----------------------------------------------------------

def normalize_states(cfg: PolicyConfig, x):
    return (x - np.asarray(cfg.state_offset)) * (1.0 / np.asarray(cfg.state_scale))


def _dense(x, w, b):
    return ad.matmul(x, w) + b


def encode_env(p: dict, cfg: PolicyConfig, images: np.ndarray):
    """Images (B, C, H, W) -> initial LSTM state (h0, c0), each (B, n_h)."""
    images = np.asarray(images, dtype=float)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.channels, cfg.resolution, cfg.resolution):
        raise ValueError(f"image shape {images.shape[1:]} does not match the policy "
                         f"({cfg.channels}, {cfg.resolution}, {cfg.resolution})")
    B = images.shape[0]
    f1, _ = cfg.conv_filters
    s1 = cfg.conv_sizes[0]
    r1, c1 = _conv_index(cfg.resolution)
    patches = images[:, :, r1, c1].transpose(0, 2, 1, 3).reshape(B, r1.shape[0], -1)
    z1 = ad.leaky_relu(_dense(patches, p["cnn.conv1.w"], p["cnn.conv1.b"]))
    grid = z1.reshape(B, s1, s1, f1)
    r2, c2 = _conv_index(s1)
    p2 = grid[:, r2, c2, :]
    z2 = ad.leaky_relu(_dense(p2.reshape(B, r2.shape[0], -1), p["cnn.conv2.w"], p["cnn.conv2.b"]))
    ce = ad.leaky_relu(_dense(z2.reshape(B, -1), p["cnn.fc.w"], p["cnn.fc.b"]))
    h0 = ad.tanh(_dense(ce, p["init.h.w"], p["init.h.b"]))
    c0 = _dense(ce, p["init.c.w"], p["init.c.b"])
    return h0, c0


def lstm_consume(p: dict, cfg: PolicyConfig, h, c, x):
    """One LSTM cell step on raw state ``x``; returns (o, h_next, c_next)."""
    nh = cfg.n_h
    xn = normalize_states(cfg, x)
    z = _dense(ad.concat([xn, h], axis=-1), p["lstm.w"], p["lstm.b"])
    gates = ad.sigmoid(z[..., :3 * nh])
    cand = ad.tanh(z[..., 3 * nh:])
    i, f, o = gates[..., :nh], gates[..., nh:2 * nh], gates[..., 2 * nh:]
    c_next = f * c + i * cand
    h_next = o * ad.tanh(c_next)
    return h_next, h_next, c_next


def control_head(p: dict, cfg: PolicyConfig, o):
    """u = (u_hi - u_lo)/2 * tanh(MLP(o)) + (u_hi + u_lo)/2."""
    hidden = ad.leaky_relu(_dense(o, p["head.l1.w"], p["head.l1.b"]))
    raw = _dense(hidden, p["head.l2.w"], p["head.l2.b"])
    return squash(cfg, raw)


def squash(cfg: PolicyConfig, raw):
    lo, hi = np.asarray(cfg.u_lower), np.asarray(cfg.u_upper)
    return ad.tanh(raw) * ((hi - lo) / 2.0) + (hi + lo) / 2.0


@dataclass
class Rollout:
    states: object          # Var or array (..., T+1, n)
    controls: object        # Var or array (..., T-p, m)
    disturbances: np.ndarray
    prefix_len: int

    def states_array(self) -> np.ndarray:
        return self.states.value if isinstance(self.states, Var) else np.asarray(self.states)

    def controls_array(self) -> np.ndarray:
        return self.controls.value if isinstance(self.controls, Var) else np.asarray(self.controls)


def consume_prefix(p: dict, cfg: PolicyConfig, prefix, h, c):
    """Feed all but the last prefix state; returns the carry (h, c) for step p."""
    for t in range(prefix.shape[-2] - 1):
        _, h, c = lstm_consume(p, cfg, h, c, prefix[..., t, :])
    return h, c


def rollout(p: dict, cfg: PolicyConfig, system, prefix, T: int, disturbances=None,
            images=None, carry=None) -> Rollout:
    """Unroll the policy from a trajectory prefix to horizon T.

    ``prefix`` is (..., p+1, n).  ``carry`` is the (h, c) pair obtained after
    consuming the first p prefix states; if omitted it is computed from
    ``images`` via :func:`encode_env` and :func:`consume_prefix`.
    ``disturbances`` is (..., T-p, m) (zeros if None).
    """
    prefix = np.asarray(prefix, dtype=float)
    plen = prefix.shape[-2] - 1
    if plen > T:
        raise ValueError(f"prefix of length {plen + 1} exceeds horizon {T}")
    batch = prefix.shape[:-2]
    if disturbances is None:
        disturbances = np.zeros(batch + (T - plen, cfg.control_dim))
    disturbances = np.asarray(disturbances, dtype=float)
    if disturbances.shape[-2] != T - plen:
        raise ValueError(f"need {T - plen} disturbance steps, got {disturbances.shape[-2]}")
    if carry is None:
        h, c = encode_env(p, cfg, images)
        if batch == ():
            h, c = h[0], c[0]
        h, c = consume_prefix(p, cfg, prefix, h, c)
    else:
        h, c = carry
    states = [prefix[..., t, :] for t in range(plen + 1)]
    controls = []
    x = states[-1]
    for t in range(plen, T):
        o, h, c = lstm_consume(p, cfg, h, c, x)
        u = control_head(p, cfg, o)
        x = system.step(x, u, disturbances[..., t - plen, :])
        if not np.all(np.isfinite(ad._val(x))):
            raise ad.EvaluationError(f"non-finite state at step {t + 1}", "rollout")
        states.append(x)
        controls.append(u)
    S = ad.stack(states, axis=-2)
    U = ad.stack(controls, axis=-2) if controls else np.zeros(batch + (0, cfg.control_dim))
    return Rollout(S, U, disturbances, plen)
