"""Online deployment: trajectory feedback, online adaptation and baselines.

Strategies, by tag:

* ``open-loop``: roll the policy out once without disturbance at t=0 and
  execute the resulting control sequence blindly;
* ``tf``: query the policy on the executed trajectory at every step;
* ``tf-star-N``: as ``tf`` but when the Monte-Carlo estimate of the expected
  robustness of the predicted completion is negative, take up to N Adam
  ascent steps on the control-head parameters before acting;
* ``baseline``: receding-horizon shooting; the open-loop control sequence is
  improved by projected L-BFGS whenever its predicted robustness is negative.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import Bicycle, DisturbanceModel, sample_disturbance
from .envgen import SPEC_BUILDERS, Environment, Layout, case_study_env, render, sample_initial_state
from .policy import PolicyParams, control_head, encode_env, lstm_consume, rollout
from .stl import robustness, trace
from .train import CASE_STUDY_DISTURBANCE, Adam

__all__ = ["DeployConfig", "EpisodeRecord", "EpisodeError", "parse_strategy", "expected_robustness",
           "adapt_step", "run_episode", "lbfgs_maximize", "shooting_robustness",
           "benchmark", "BenchmarkResult", "STRATEGIES", "RESULT_FIELDS", "TIMING_FIELDS"]

STRATEGIES = ("open-loop", "tf", "tf-star-1", "tf-star-3", "baseline")
RESULT_FIELDS = ("trial", "strategy", "rho", "satisfied", "steps_triggered", "total_grad_steps")
TIMING_FIELDS = ("trial", "strategy", "mean_step_ms", "p95_step_ms", "triggered_step_ms")

log = logging.getLogger(__name__)


class EpisodeError(RuntimeError):
    """A failure inside an episode, tagged with the timestep it happened at."""

    def __init__(self, t: int, cause: Exception):
        super().__init__(f"step {t}: {type(cause).__name__}: {cause}")
        self.t = t
        self.cause = cause


@dataclass(frozen=True)
class DeployConfig:
    N_gd: int = 3
    eta: float = 1e-3
    M: int = 8
    strategy: str = "tf"
    seed: int = 0
    temperature: float = math.inf
    spec: str = "phi"
    T: int = 55
    baseline_iters: int = 3
    lbfgs_memory: int = 10
    baseline_step: float = 0.05

    def __post_init__(self):
        if self.N_gd < 0:
            raise ValueError("N_gd must be non-negative")
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        parse_strategy(self.strategy)


def parse_strategy(tag: str) -> tuple:
    """'tf-star-3' -> ('tf-star', 3); other tags -> (tag, 0)."""
    m = re.fullmatch(r"tf-star-(\d+)", tag)
    if m:
        return "tf-star", int(m.group(1))
    if tag in ("open-loop", "tf", "baseline"):
        return tag, 0
    raise ValueError(f"unknown strategy {tag!r}")


@dataclass
class EpisodeRecord:
    strategy: str
    states: np.ndarray
    controls: np.ndarray
    step_ms: np.ndarray
    triggered: np.ndarray
    grad_steps: np.ndarray
    rho: float
    satisfied: bool
    env: Environment | None = field(default=None, repr=False)
    error: str | None = None

    @property
    def steps_triggered(self) -> int:
        return int(np.sum(self.triggered))

    @property
    def total_grad_steps(self) -> int:
        return int(np.sum(self.grad_steps))

    def recompute_rho(self, spec: str = "phi") -> float:
        return float(robustness(SPEC_BUILDERS[spec](self.env), self.states).value.value)

    def to_json(self) -> dict:
        """Replayable trace; wall-clock timings are left out so it is deterministic."""
        return {"strategy": self.strategy, "states": self.states.tolist(),
                "controls": self.controls.tolist(), "triggered": self.triggered.tolist(),
                "grad_steps": self.grad_steps.tolist(), "rho": self.rho,
                "satisfied": bool(self.satisfied), "error": self.error,
                "env": self.env.to_json() if self.env is not None else None}


# --- expected robustness and adaptation ------------------------------------

def _weights(params: PolicyParams, head: dict | None):
    w = dict(params.weights)
    if head is not None:
        w.update(head)
    return w


def _rollouts(p, params, system, prefix, T, d, carry):
    M = d.shape[0]
    pre = np.broadcast_to(prefix, (M,) + prefix.shape)
    h, c = carry
    hc = (h if isinstance(h, ad.Var) else np.broadcast_to(h, (M, h.shape[-1])),
          c if isinstance(c, ad.Var) else np.broadcast_to(c, (M, c.shape[-1])))
    return rollout(p, params.config, system, pre, T, d, carry=hc)


def expected_robustness(params: PolicyParams, prefix, env: Environment, carry, d: np.ndarray,
                        T: int, spec: str = "phi", system: Bicycle = Bicycle(),
                        head: dict | None = None) -> tuple:
    """Mean exact robustness over the M disturbance sequences in ``d`` (M, T-p, m).

    ``carry`` is the LSTM state after consuming all but the last prefix state.
    Returns (mean, per-rollout values).
    """
    p = _weights(params, head)
    d = np.asarray(d, dtype=float)
    r = _rollouts(p, params, system, np.asarray(prefix, dtype=float), T, _distinct(d), carry)
    rho = trace(SPEC_BUILDERS[spec](env), r.states)[..., 0]
    rho = np.broadcast_to(rho, d.shape[:1])
    return _mean(rho), rho


def _distinct(d: np.ndarray) -> np.ndarray:
    # identical draws (zero covariance) need only one rollout
    return d[:1] if np.all(d == d[:1]) else d


def _mean(v) -> float:
    # shifted so that M identical values average to exactly that value
    return float(v[0] + np.mean(v - v[0]))


def _rho_and_head_grad(params, head, prefix, env, carry, d, T, spec, system, temperature):
    tape = ad.Tape()
    p = dict(params.weights)
    hv = {k: tape.var(v) for k, v in head.items()}
    p.update(hv)
    r = _rollouts(p, params, system, prefix, T, _distinct(d), carry)
    rho = trace(SPEC_BUILDERS[spec](env), r.states, temperature)[..., 0]
    exact = rho.value if math.isinf(temperature) else \
        trace(SPEC_BUILDERS[spec](env), r.states.value)[..., 0]
    obj = ad.vmean(rho)
    g = tape.backward(obj)
    return _mean(exact), {k: g.of(v) for k, v in hv.items()}


def adapt_step(params: PolicyParams, head: dict, opt: Adam, prefix, env: Environment, carry,
               d: np.ndarray, cfg: DeployConfig, system: Bicycle = Bicycle(),
               initial: float | None = None) -> tuple:
    """Gradient ascent on the head while the estimate stays negative.

    At most ``cfg.N_gd`` Adam steps, all on the same M disturbance draws.
    ``head`` is updated in place.  Returns (steps taken, final estimate or
    None if it was not re-evaluated after the last step).
    """
    prefix = np.asarray(prefix, dtype=float)
    est = initial
    steps = 0
    while steps < cfg.N_gd:
        value, grads = _rho_and_head_grad(params, head, prefix, env, carry, d, cfg.T,
                                          cfg.spec, system, cfg.temperature)
        est = value
        if value >= 0:
            break
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            log.warning("non-finite head gradient; adaptation step skipped")
            break
        opt.step(head, grads, ascend=True)
        steps += 1
        est = None
    return steps, est


# --- shooting baseline --------------------------------------------------------

def shooting_robustness(u, prefix, env, T, spec="phi", system=Bicycle(), temperature=math.inf):
    """Robustness of the prefix continued by the open-loop controls ``u``."""
    prefix = np.asarray(prefix, dtype=float)
    states = [prefix[t] for t in range(prefix.shape[0])]
    x = states[-1]
    for k in range(u.shape[0]):
        x = system.step(x, u[k])
        states.append(x)
    S = ad.stack(states, axis=0)
    return trace(SPEC_BUILDERS[spec](env), S, temperature)[..., 0]


def lbfgs_maximize(fun, x0, lower, upper, iters: int, memory: int = 10, step: float = 0.05,
                   c1: float = 1e-4, max_backtracks: int = 20) -> tuple:
    """Projected L-BFGS ascent with Armijo backtracking.

    ``fun(x)`` returns (value, gradient).  Iterates are clipped to the box.
    The first step moves at most ``step`` in any coordinate.  Returns
    (x, value, iterations run).
    """
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = fun(x)
    f, g = -f, -g
    S, Y = [], []
    it = 0
    for it in range(1, iters + 1):
        q = g.ravel().copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            a = s @ q / (y @ s)
            alphas.append(a)
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
            alpha = 1.0
        else:
            alpha = step / max(np.max(np.abs(q)), 1e-12)
        for (s, y), a in zip(zip(S, Y), reversed(alphas)):
            b = y @ q / (y @ s)
            q += s * (a - b)
        d = -q.reshape(x.shape)
        if not np.any(d):
            break
        for _ in range(max_backtracks):
            x_new = np.clip(x + alpha * d, lower, upper)
            f_new, g_new = fun(x_new)
            f_new, g_new = -f_new, -g_new
            if f_new <= f + c1 * float(np.sum(g * (x_new - x))):
                break
            alpha *= 0.5
        else:
            break
        s = (x_new - x).ravel()
        y = (g_new - g).ravel()
        x, f, g = x_new, f_new, g_new
        if s @ y > 1e-12:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
    return x, -f, it


def _shooting_fun(prefix, env, T, spec, system, temperature):
    def fun(u):
        tape = ad.Tape()
        uv = tape.var(u)
        rho = shooting_robustness(uv, prefix, env, T, spec, system, temperature)
        g = tape.backward(rho)
        return float(rho.value), g.of(uv)
    return fun


# --- episodes --------------------------------------------------------------

def run_episode(params: PolicyParams, x0, env: Environment, strategy: str, cfg: DeployConfig,
                disturbances: np.ndarray, mc_seed=0, system: Bicycle = Bicycle(),
                image: np.ndarray | None = None,
                disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE) -> EpisodeRecord:
    """Execute one episode under ``disturbances`` (T, m) with the given strategy.

    ``disturbance`` is the model the Monte-Carlo estimate samples from; the
    executed disturbance is always the given sequence.
    """
    kind, n_gd = parse_strategy(strategy)
    if kind == "tf-star":
        cfg = DeployConfig(**{**cfg.__dict__, "N_gd": n_gd, "strategy": strategy})
    T = cfg.T
    d = np.asarray(disturbances, dtype=float)
    if d.shape != (T, system.control_dim):
        raise ValueError(f"disturbances must have shape ({T}, {system.control_dim})")
    mc = np.random.default_rng(mc_seed)
    pcfg = params.config
    if image is None:
        image = render(env, pcfg.resolution).data
    base = params.bind()
    h, c = encode_env(base, pcfg, image[None])
    h, c = h[0], c[0]
    head = {k: params.weights[k].copy() for k in params.head_names}
    opt = Adam(cfg.eta)
    x = np.asarray(x0, dtype=float)
    states, controls = [x], []
    step_ms = np.zeros(T)
    triggered = np.zeros(T, dtype=bool)
    grad_steps = np.zeros(T, dtype=int)
    plan = None
    if kind in ("open-loop", "baseline"):
        t0 = time.perf_counter()
        plan = rollout(base, pcfg, system, x[None], T, None, image).controls_array()
        step_ms[0] += (time.perf_counter() - t0) * 1e3
    for t in range(T):
        try:
            t0 = time.perf_counter()
            prefix = np.stack(states)
            if kind in ("tf", "tf-star"):
                if kind == "tf-star" and cfg.N_gd > 0:
                    dm = sample_disturbance(disturbance, T - t, mc, batch=(cfg.M,))
                    est, _ = expected_robustness(params, prefix, env, (h, c), dm, T, cfg.spec,
                                                 system, head)
                    if est < 0:
                        triggered[t] = True
                        grad_steps[t], _ = adapt_step(params, head, opt, prefix, env, (h, c), dm,
                                                      cfg, system, est)
                p = _weights(params, head)
                o, h_next, c_next = lstm_consume(p, pcfg, h, c, x)
                u = control_head(p, pcfg, o)
                h, c = h_next, c_next
            elif kind == "open-loop":
                u = plan[t]
            else:
                rho_plan = float(shooting_robustness(plan[t:], prefix, env, T, cfg.spec, system))
                if rho_plan < 0:
                    triggered[t] = True
                    fun = _shooting_fun(prefix, env, T, cfg.spec, system, cfg.temperature)
                    new, _, its = lbfgs_maximize(fun, plan[t:], system.bounds.lower,
                                                 system.bounds.upper, cfg.baseline_iters,
                                                 cfg.lbfgs_memory, cfg.baseline_step)
                    plan[t:] = new
                    grad_steps[t] = its
                u = plan[t]
            step_ms[t] += (time.perf_counter() - t0) * 1e3
            x = system.step(x, u, d[t])
            states.append(x)
            controls.append(np.asarray(u, dtype=float))
        except Exception as exc:
            raise EpisodeError(t, exc) from exc
    S = np.stack(states)
    rho = float(robustness(SPEC_BUILDERS[cfg.spec](env), S).value.value)
    return EpisodeRecord(strategy, S, np.stack(controls), step_ms, triggered, grad_steps,
                         rho, rho >= 0, env)


# --- benchmark -------------------------------------------------------------

@dataclass
class BenchmarkResult:
    records: list
    trials: list

    def rows(self) -> list:
        out = []
        for trial, rec in self.trials_records():
            out.append({"trial": trial, "strategy": rec.strategy, "rho": rec.rho,
                        "satisfied": int(rec.satisfied), "steps_triggered": rec.steps_triggered,
                        "total_grad_steps": rec.total_grad_steps})
        return out

    def trials_records(self):
        return zip(self.trials, self.records)

    def timing_rows(self) -> list:
        out = []
        for trial, rec in self.trials_records():
            trig = rec.step_ms[rec.triggered]
            out.append({"trial": trial, "strategy": rec.strategy,
                        "mean_step_ms": float(np.mean(rec.step_ms)),
                        "p95_step_ms": float(np.percentile(rec.step_ms, 95)),
                        "triggered_step_ms": float(np.mean(trig)) if trig.size else float("nan")})
        return out

    def summary(self) -> dict:
        out = {}
        for s in dict.fromkeys(r.strategy for r in self.records):
            recs = [r for r in self.records if r.strategy == s]
            steps = np.concatenate([r.step_ms for r in recs])
            trig = np.concatenate([r.step_ms[r.triggered] for r in recs])
            rho = np.array([r.rho for r in recs])
            out[s] = {"episodes": len(recs), "satisfaction_rate": float(np.mean(rho >= 0)),
                      "median_rho": float(np.median(rho)), "mean_rho": float(np.mean(rho)),
                      "mean_step_ms": float(np.mean(steps)),
                      "p95_step_ms": float(np.percentile(steps, 95)),
                      "mean_triggered_step_ms": float(np.mean(trig)) if trig.size else None,
                      "steps_triggered": int(sum(r.steps_triggered for r in recs))}
        return out

    def results_csv(self) -> str:
        return _csv(self.rows(), RESULT_FIELDS)

    def timing_csv(self) -> str:
        return _csv(self.timing_rows(), TIMING_FIELDS)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"results": out / "results.csv", "timing": out / "timing.csv",
                 "summary": out / "summary.json", "episodes": out / "episodes.jsonl"}
        paths["results"].write_text(self.results_csv())
        paths["episodes"].write_text("".join(
            json.dumps({"trial": t, **r.to_json()}) + "\n" for t, r in self.trials_records()))
        paths["timing"].write_text(self.timing_csv())
        paths["summary"].write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return paths


def _csv(rows, names) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _failed_record(strategy, T, system, env, error) -> EpisodeRecord:
    nan = np.full((T + 1, system.state_dim), np.nan)
    return EpisodeRecord(strategy, nan, np.full((T, system.control_dim), np.nan), np.zeros(T),
                         np.zeros(T, dtype=bool), np.zeros(T, dtype=int), math.nan, False, env,
                         error)


def trial_setup(seed: int, trial: int, T: int, layout: Layout = Layout(),
                disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE):
    """(x0, env, episode disturbance, Monte-Carlo seed) for one benchmark trial."""
    rng = np.random.default_rng([seed, trial])
    env = case_study_env(rng.uniform(*layout.x_cov_range), layout)
    x0 = sample_initial_state(rng, layout)
    d = sample_disturbance(disturbance, T, rng)
    return x0, env, d, [seed, trial, 1]


def benchmark(params: PolicyParams, strategies=STRATEGIES, n_trials: int = 100,
              cfg: DeployConfig = DeployConfig(), layout: Layout = Layout(),
              system: Bicycle = Bicycle(), disturbance: DisturbanceModel = CASE_STUDY_DISTURBANCE,
              progress=None) -> BenchmarkResult:
    """Every strategy on the same seeded trials (common random numbers)."""
    for s in strategies:
        parse_strategy(s)
    records, trials = [], []
    for trial in range(n_trials):
        x0, env, d, mc_seed = trial_setup(cfg.seed, trial, cfg.T, layout, disturbance)
        image = render(env, params.config.resolution).data
        for s in strategies:
            try:
                rec = run_episode(params, x0, env, s, cfg, d, mc_seed, system, image,
                                  disturbance)
            except EpisodeError as exc:
                log.error("trial %d %s failed: %s", trial, s, exc)
                rec = _failed_record(s, cfg.T, system, env, str(exc))
            records.append(rec)
            trials.append(trial)
        if progress:
            progress(trial)
    return BenchmarkResult(records, trials)
