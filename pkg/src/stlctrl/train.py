"""Offline synthesis: STL loss, imitation regularisation and adversarial search.

The training objective is ``L_STL + gamma * L_imit``.  ``L_STL`` averages
``LeakyReLU(-rho)`` over closed-loop rollouts with a fresh disturbance draw
per epoch.  ``L_imit`` compares teacher-free, disturbance-free policy rollouts
with expert demonstrations.  After an initial block of epochs, each
adversarial iteration collects violating samples by acceptance-rejection,
draws a fresh dataset, and trains for a shorter block on the union.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import Bicycle, DisturbanceModel, sample_disturbance
from .envgen import (SPEC_BUILDERS, Environment, Layout, case_study_env, render,
                     sample_initial_state)
from .expert import Demo, ExpertFailure, demonstrate
from .policy import PolicyConfig, PolicyParams, init_params, normalize_states, rollout
from .stl import boolean_sat, trace

__all__ = ["TrainConfig", "SampleSet", "DemoSet", "Adam", "Trainer", "TrainingDiverged",
           "loss_stl", "loss_imitation", "train_epochs", "adversarial_search",
           "synthesize", "SynthesisResult", "make_samples", "sample_from_seed",
           "evaluate", "scripted_demos", "HISTORY_FIELDS"]

HISTORY_FIELDS = ("epoch", "L_STL", "L_imit", "violation_rate")
CASE_STUDY_DISTURBANCE = DisturbanceModel([0.0, 0.0], [0.02, 0.05])


class TrainingDiverged(FloatingPointError):
    """Non-finite loss.  ``partial`` holds the last finite synthesis state when known."""
    partial: "SynthesisResult | None" = None


@dataclass(frozen=True)
class TrainConfig:
    spec: str = "phi"
    T: int = 55
    N: int = 256
    N_adv: int = 32
    N_full: int = 200
    N_mini: int = 50
    K: int = 5
    gamma: float = 1.4
    gamma_imit: float = 1.0
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    temperature: float = math.inf
    train_disturbance: bool = True
    adv_budget_factor: int = 50
    n_probes: int = 256

    def __post_init__(self):
        for name in ("T", "N", "N_adv", "N_full", "N_mini", "K", "adv_budget_factor", "n_probes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.gamma < 0 or self.gamma_imit < 0:
            raise ValueError("imitation weights must be non-negative")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.spec not in SPEC_BUILDERS:
            raise ValueError(f"unknown specification {self.spec!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options: {sorted(extra)}")
        return cls(**d)


# --- samples ---------------------------------------------------------------

@dataclass
class SampleSet:
    """Initial states and environments, with their rendered images cached."""
    x0: np.ndarray
    envs: list
    images: np.ndarray
    seeds: np.ndarray | None = None

    def __len__(self):
        return len(self.envs)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(self.x0[idx], [self.envs[i] for i in idx], self.images[idx],
                         None if self.seeds is None else self.seeds[idx])

    @staticmethod
    def concat(a: "SampleSet", b: "SampleSet") -> "SampleSet":
        if len(b) == 0:
            return a
        if len(a) == 0:
            return b
        seeds = None
        if a.seeds is not None and b.seeds is not None:
            seeds = np.concatenate([a.seeds, b.seeds])
        return SampleSet(np.concatenate([a.x0, b.x0]), a.envs + b.envs,
                         np.concatenate([a.images, b.images]), seeds)

    @classmethod
    def from_pairs(cls, x0s, envs, resolution=32, seeds=None) -> "SampleSet":
        images = np.stack([render(e, resolution).data for e in envs]) if envs else \
            np.zeros((0, 4, resolution, resolution))
        return cls(np.asarray(x0s, dtype=float).reshape(-1, 4), list(envs), images,
                   None if seeds is None else np.asarray(seeds, dtype=np.int64))


def sample_from_seed(seed: int, T: int, layout: Layout = Layout(),
                     disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE):
    """(x0, env, disturbance sequence) determined entirely by ``seed``."""
    rng = np.random.default_rng(int(seed))
    env = case_study_env(rng.uniform(*layout.x_cov_range), layout)
    x0 = sample_initial_state(rng, layout)
    d = sample_disturbance(disturbance, T, rng)
    return x0, env, d


def make_samples(n: int, seed, layout: Layout = Layout(), resolution=32) -> SampleSet:
    """n uniform (x0, env) pairs; each pair is reproducible from its own seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 62, size=n)
    pairs = [sample_from_seed(s, 0, layout) for s in seeds]
    return SampleSet.from_pairs([p[0] for p in pairs], [p[1] for p in pairs], resolution, seeds)


# --- demonstrations --------------------------------------------------------

@dataclass
class DemoSet:
    demos: list = field(default_factory=list)
    rejected: int = 0       # expert failures redrawn while generating

    def __len__(self):
        return len(self.demos)

    def __iter__(self):
        return iter(self.demos)

    def validate(self, spec: str = "phi", system: Bicycle = Bicycle()):
        for i, d in enumerate(self.demos):
            if d.states.ndim != 2 or d.states.shape[1] != system.state_dim:
                raise ValueError(f"demo {i}: states must be (T+1, {system.state_dim})")
            if d.controls.shape != (d.states.shape[0] - 1, system.control_dim):
                raise ValueError(f"demo {i}: controls must be ({d.states.shape[0] - 1}, "
                                 f"{system.control_dim})")
            if not (np.all(np.isfinite(d.states)) and np.all(np.isfinite(d.controls))):
                raise ValueError(f"demo {i}: non-finite entries")
            xmin, xmax, ymin, ymax = d.env.workspace
            xy = d.states[:, :2]
            if np.any(xy[:, 0] < xmin) or np.any(xy[:, 0] > xmax) or \
                    np.any(xy[:, 1] < ymin) or np.any(xy[:, 1] > ymax):
                raise ValueError(f"demo {i}: states leave the workspace")
            if not boolean_sat(SPEC_BUILDERS[spec](d.env), d.states):
                raise ValueError(f"demo {i}: does not satisfy the {spec!r} specification")
        return self

    def save(self, path, dt: float = 0.5):
        with open(path, "w") as fh:
            for d in self.demos:
                fh.write(json.dumps({"env": d.env.to_json(), "states": d.states.tolist(),
                                     "controls": d.controls.tolist(), "dt": dt,
                                     "rho": d.rho, "side": d.side}) + "\n")

    @classmethod
    def load(cls, path, spec: str | None = "phi", system: Bicycle = Bicycle()) -> "DemoSet":
        demos = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    env = Environment.from_json(rec["env"])
                    states = np.asarray(rec["states"], dtype=float)
                    controls = np.asarray(rec["controls"], dtype=float)
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed demo ({exc})") from exc
                if "dt" in rec and not math.isclose(rec["dt"], system.dt):
                    raise ValueError(f"{path}:{lineno}: demo dt {rec['dt']} != system dt {system.dt}")
                demos.append(Demo(states, controls, env, float(rec.get("rho", float("nan"))),
                                  rec.get("side", "")))
        out = cls(demos)
        if spec is not None:
            out.validate(spec, system)
        return out


def scripted_demos(n: int = 32, T: int = 55, spec: str = "phi", seed=0,
                   layout: Layout = Layout(), system: Bicycle = Bicycle(),
                   side: str = "auto") -> DemoSet:
    """``n`` validated expert demonstrations from uniformly sampled (x0, env).

    Samples the expert cannot solve are redrawn.
    """
    rng = np.random.default_rng(seed)
    demos = []
    rejected = 0
    while len(demos) < n:
        env = case_study_env(rng.uniform(*layout.x_cov_range), layout)
        x0 = sample_initial_state(rng, layout)
        try:
            demos.append(demonstrate(env, x0, T, spec, side, system,
                                     seed=int(rng.integers(2 ** 31))))
        except ExpertFailure:
            rejected += 1
    return DemoSet(demos, rejected)


# --- losses ----------------------------------------------------------------

def loss_stl(rho):
    """Mean of LeakyReLU(-rho) over samples."""
    if np.size(ad._val(rho)) == 0:
        raise ValueError("loss_stl needs at least one sample")
    return ad.vmean(ad.leaky_relu(-rho, 0.01))


def _imitation_terms(states, controls, demo_states, demo_controls, lengths, cfg: PolicyConfig,
                     gamma_imit: float):
    """Per-demo Delta / T_i given policy rollouts padded to a common horizon."""
    B, H1, _ = demo_states.shape
    H = H1 - 1
    steps = np.arange(1, H + 1)[None, :] <= lengths[:, None]            # (B, H)
    w = steps / lengths[:, None]
    half = (np.asarray(cfg.u_upper) - np.asarray(cfg.u_lower)) / 2.0
    ds = normalize_states(cfg, states[:, 1:H + 1, :]) - normalize_states(cfg, demo_states[:, 1:, :])
    du = (controls[:, :H, :] - demo_controls) * (1.0 / half)
    state_err = ad.vmean(ad.square(ds), axis=-1)                         # (B, H)
    ctrl_err = ad.vmean(ad.square(du), axis=-1)
    per_step = state_err + ctrl_err * gamma_imit
    return ad.vsum(per_step * w, axis=-1)


def _pad_demos(demos: DemoSet):
    lengths = np.array([d.T for d in demos])
    H = int(lengths.max())
    n, m = demos.demos[0].states.shape[1], demos.demos[0].controls.shape[1]
    S = np.zeros((len(demos), H + 1, n))
    U = np.zeros((len(demos), H, m))
    for i, d in enumerate(demos):
        S[i, :d.T + 1] = d.states
        S[i, d.T + 1:] = d.states[-1]
        U[i, :d.T] = d.controls
    return S, U, lengths


def loss_imitation(params: PolicyParams, demos: DemoSet, gamma_imit: float = 1.0,
                   system: Bicycle = Bicycle(), pv: dict | None = None, resolution=32):
    """(1/N_exp) sum_i Delta_i / T_i with disturbance-free, teacher-free rollouts."""
    if len(demos) == 0:
        raise ValueError("loss_imitation needs at least one demonstration")
    cfg = params.config
    S, U, lengths = _pad_demos(demos)
    if S.shape[2] != cfg.state_dim or U.shape[2] != cfg.control_dim:
        raise ValueError("demonstration dimensions do not match the policy")
    images = np.stack([render(d.env, resolution).data for d in demos])
    pv = params.bind() if pv is None else pv
    r = rollout(pv, cfg, system, S[:, :1, :], S.shape[1] - 1, None, images)
    return ad.vmean(_imitation_terms(r.states, r.controls, S, U, lengths, cfg, gamma_imit))


# --- optimiser -------------------------------------------------------------

class Adam:
    """Adam over a dict of named arrays; ``ascend`` flips the step direction."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights: dict, grads: dict, ascend: bool = False):
        b1, b2 = self.betas
        self.t += 1
        sign = 1.0 if ascend else -1.0
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g)) * b1 + (1 - b1) * g
            v = self.v.get(k, np.zeros_like(g)) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            weights[k] = weights[k] + sign * self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "t": self.t,
                "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    @classmethod
    def from_state(cls, d: dict) -> "Adam":
        opt = cls(d["lr"], d["betas"], d["eps"])
        opt.t = d["t"]
        opt.m = {k: np.array(v, dtype=float) for k, v in d["m"].items()}
        opt.v = {k: np.array(v, dtype=float) for k, v in d["v"].items()}
        return opt


# --- training loop ----------------------------------------------------------

class Trainer:
    """Owns the mutable parameters, optimiser state and epoch counter."""

    def __init__(self, params: PolicyParams, cfg: TrainConfig, demos: DemoSet | None = None,
                 system: Bicycle = Bicycle(), disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE,
                 optimizer: Adam | None = None, epoch: int = 0):
        self.params = params.copy()
        self.cfg = cfg
        self.demos = demos if demos is not None else DemoSet()
        self.system = system
        self.disturbance = disturbance if cfg.train_disturbance else disturbance.zero()
        self.opt = optimizer or Adam(cfg.lr)
        self.epoch = epoch
        self.history: list = []
        if cfg.gamma > 0 and len(self.demos):
            self._demo_S, self._demo_U, self._demo_len = _pad_demos(self.demos)
            res = params.config.resolution
            self._demo_img = np.stack([render(d.env, res).data for d in self.demos])
        else:
            self._demo_S = None

    def _batch_loss(self, tape, batch: SampleSet, d: np.ndarray):
        cfg, pcfg = self.cfg, self.params.config
        pv = self.params.bind(tape)
        self._bound = pv
        B = len(batch)
        prefix = batch.x0[:, None, :]
        images = batch.images
        H = cfg.T
        use_imit = self._demo_S is not None
        if use_imit:
            H = max(H, self._demo_S.shape[1] - 1)
            prefix = np.concatenate([prefix, self._demo_S[:, :1, :]])
            images = np.concatenate([images, self._demo_img])
        dist = np.zeros((prefix.shape[0], H, pcfg.control_dim))
        dist[:B, :cfg.T] = d
        r = rollout(pv, pcfg, self.system, prefix, H, dist, images)
        states = r.states
        spec = SPEC_BUILDERS[cfg.spec](list(batch.envs))
        rho = trace(spec, states[:B, :cfg.T + 1, :], cfg.temperature)[..., 0]
        l_stl = loss_stl(rho)
        if use_imit:
            l_imit = ad.vmean(_imitation_terms(states[B:], r.controls[B:], self._demo_S,
                                               self._demo_U, self._demo_len, pcfg, cfg.gamma_imit))
            total = l_stl + l_imit * cfg.gamma
        else:
            l_imit, total = None, l_stl
        return total, l_stl, l_imit, rho

    def run(self, samples: SampleSet, epochs: int) -> list:
        cfg = self.cfg
        rows = []
        for _ in range(epochs):
            rng = np.random.default_rng([cfg.seed, 1, self.epoch])
            order = rng.permutation(len(samples))
            sums = np.zeros(2)
            n_batches, violations = 0, 0
            for start in range(0, len(order), cfg.batch_size):
                batch = samples.subset(order[start:start + cfg.batch_size])
                d = sample_disturbance(self.disturbance, cfg.T, rng, batch=(len(batch),))
                tape = ad.Tape()
                try:
                    total, l_stl, l_imit, rho = self._batch_loss(tape, batch, d)
                except ad.EvaluationError as exc:
                    raise TrainingDiverged(f"epoch {self.epoch}: {exc}") from exc
                if not np.isfinite(total.value):
                    raise TrainingDiverged(f"epoch {self.epoch}: non-finite loss")
                grads = tape.backward(total)
                self.opt.step(self.params.weights,
                              {k: grads.of(v) for k, v in self._bound.items()})
                sums += [float(l_stl.value), 0.0 if l_imit is None else float(l_imit.value)]
                violations += int(np.sum(rho.value < 0))
                n_batches += 1
            row = {"epoch": self.epoch, "L_STL": sums[0] / max(n_batches, 1),
                   "L_imit": sums[1] / max(n_batches, 1),
                   "violation_rate": violations / max(len(samples), 1)}
            rows.append(row)
            self.history.append(row)
            self.epoch += 1
        return rows

    def checkpoint(self, path, extra: dict | None = None):
        """Parameters plus optimiser state and epoch counter, for exact resume."""
        info = {"optimizer": self.opt.state_dict(), "epoch": self.epoch,
                "train_config": _config_json(self.cfg)}
        info.update(extra or {})
        self.params.save(path, extra=info)

    @classmethod
    def resume(cls, path, cfg: TrainConfig, demos: DemoSet | None = None, **kw) -> "Trainer":
        d = json.loads(Path(path).read_text())
        params = PolicyParams.from_json(d)
        extra = d.get("extra", {})
        opt = Adam.from_state(extra["optimizer"]) if "optimizer" in extra else None
        return cls(params, cfg, demos, optimizer=opt, epoch=int(extra.get("epoch", 0)), **kw)


def _config_json(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["temperature"] = None if math.isinf(cfg.temperature) else cfg.temperature
    return d


def train_epochs(params: PolicyParams, samples: SampleSet, demos: DemoSet | None,
                 cfg: TrainConfig, epochs: int, **kw):
    """Run ``epochs`` epochs of Adam on the training loss; returns (params, history)."""
    tr = Trainer(params, cfg, demos, **kw)
    rows = tr.run(samples, epochs)
    return tr.params, rows


def history_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in HISTORY_FIELDS})
    return buf.getvalue()


# --- evaluation and adversarial search ---------------------------------------

def evaluate(params: PolicyParams, samples: SampleSet, spec: str, T: int, seed=0,
             system: Bicycle = Bicycle(), disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE,
             chunk: int = 128, disturbances: np.ndarray | None = None) -> np.ndarray:
    """Exact robustness of closed-loop rollouts, one disturbance draw per sample."""
    if disturbances is None:
        rng = np.random.default_rng(seed)
        disturbances = sample_disturbance(disturbance, T, rng, batch=(len(samples),))
    pv = params.bind()
    out = []
    for s in range(0, len(samples), chunk):
        sub = samples.subset(np.arange(s, min(s + chunk, len(samples))))
        r = rollout(pv, params.config, system, sub.x0[:, None, :], T,
                    disturbances[s:s + len(sub)], sub.images)
        f = SPEC_BUILDERS[spec](list(sub.envs))
        out.append(trace(f, r.states)[..., 0])
    return np.concatenate(out) if out else np.zeros(0)


def adversarial_search(params: PolicyParams, cfg: TrainConfig, seed, layout: Layout = Layout(),
                       system: Bicycle = Bicycle(),
                       disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE,
                       chunk: int = 64) -> SampleSet:
    """Acceptance-rejection: keep uniform samples whose rollout violates the spec.

    Stops after ``N_adv`` hits or ``adv_budget_factor * N_adv`` raw samples.
    Each kept sample stores the seed that regenerates its initial state,
    environment and disturbance sequence (see :func:`sample_from_seed`).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    budget = cfg.adv_budget_factor * cfg.N_adv
    dist = disturbance if cfg.train_disturbance else disturbance.zero()
    found_seeds, drawn = [], 0
    while len(found_seeds) < cfg.N_adv and drawn < budget:
        n = min(chunk, budget - drawn)
        seeds = rng.integers(0, 2 ** 62, size=n)
        drawn += n
        draws = [sample_from_seed(s, cfg.T, layout, dist) for s in seeds]
        cand = SampleSet.from_pairs([d[0] for d in draws], [d[1] for d in draws],
                                    params.config.resolution, seeds)
        rho = evaluate(params, cand, cfg.spec, cfg.T, system=system,
                       disturbances=np.stack([d[2] for d in draws]))
        for i in np.flatnonzero(rho < 0):
            if len(found_seeds) < cfg.N_adv:
                found_seeds.append(seeds[i])
    draws = [sample_from_seed(s, 0, layout) for s in found_seeds]
    return SampleSet.from_pairs([d[0] for d in draws], [d[1] for d in draws],
                                params.config.resolution, found_seeds)


@dataclass
class SynthesisResult:
    params: PolicyParams
    history: list
    report: list
    snapshots: dict


def synthesize(cfg: TrainConfig, demos: DemoSet | None, layout: Layout = Layout(),
               params: PolicyParams | None = None, policy_config: PolicyConfig = PolicyConfig(),
               probes: SampleSet | None = None, system: Bicycle = Bicycle(),
               disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE,
               log=None) -> SynthesisResult:
    """Full offline synthesis: N_full epochs, then K adversarial iterations.

    The report has one row per stage (k = 0 after the initial block) with
    the held-out violation rate and mean robustness on ``probes``.
    Snapshots of the parameters after every stage are kept by k.
    """
    root = np.random.default_rng([cfg.seed, 0])
    if params is None:
        params = init_params(policy_config, np.random.default_rng([cfg.seed, 2]))
    if probes is None:
        probes = make_samples(cfg.n_probes, np.random.default_rng([cfg.seed, 3]), layout,
                              params.config.resolution)
    tr = Trainer(params, cfg, demos, system, disturbance)
    S = make_samples(cfg.N, root, layout, params.config.resolution)
    report, snapshots = [], {}

    def stage(k, n_adv):
        rho = evaluate(tr.params, probes, cfg.spec, cfg.T, seed=[cfg.seed, 4], system=system,
                       disturbance=disturbance)
        row = {"k": k, "epochs": tr.epoch, "n_adv": n_adv,
               "violation_rate": float(np.mean(rho < 0)), "mean_rho": float(np.mean(rho)),
               "median_rho": float(np.median(rho))}
        report.append(row)
        snapshots[k] = tr.params.copy()
        if log:
            log(f"stage k={k}: violation {row['violation_rate']:.3f}, "
                f"mean rho {row['mean_rho']:.3f}")

    try:
        tr.run(S, cfg.N_full)
        stage(0, 0)
        for k in range(1, cfg.K + 1):
            adv = adversarial_search(tr.params, cfg, root, layout, system, disturbance)
            S = SampleSet.concat(make_samples(cfg.N, root, layout, params.config.resolution), adv)
            tr.run(S, cfg.N_mini)
            stage(k, len(adv))
    except TrainingDiverged as exc:
        # parameters are only updated after a finite loss, so they are still usable
        exc.partial = SynthesisResult(tr.params, tr.history, report, snapshots)
        raise
    return SynthesisResult(tr.params, tr.history, report, snapshots)
