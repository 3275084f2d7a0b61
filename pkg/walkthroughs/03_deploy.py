"""Deploying a trained policy with each strategy on the same trials.

Loads a checkpoint (for instance the one written by 02_train_reach_avoid.py)
and runs open-loop, trajectory feedback, online adaptation and the shooting
baseline on a few seeded trials with identical disturbances.

    python3 walkthroughs/03_deploy.py reach_avoid_policy.json [reach-avoid|phi] [T]
"""
import sys

import numpy as np

from stlctrl.deploy import STRATEGIES, DeployConfig, benchmark
from stlctrl.policy import PolicyParams

path = sys.argv[1] if len(sys.argv) > 1 else "reach_avoid_policy.json"
spec = sys.argv[2] if len(sys.argv) > 2 else "reach-avoid"
T = int(sys.argv[3]) if len(sys.argv) > 3 else (30 if spec == "reach-avoid" else 55)

params = PolicyParams.load(path)
cfg = DeployConfig(spec=spec, T=T, seed=1)
res = benchmark(params, STRATEGIES, 10, cfg)

print(f"{'strategy':10s} {'sat':>5s} {'median rho':>11s} {'ms/step':>8s} {'triggered':>9s}")
for name, s in res.summary().items():
    print(f"{name:10s} {s['satisfaction_rate']:5.0%} {s['median_rho']:11.3f} "
          f"{s['mean_step_ms']:8.2f} {s['steps_triggered']:9d}")

# one trial in detail: where did online adaptation kick in?
rec = next((r for r in res.records if r.strategy == "tf-star-3" and r.steps_triggered), None)
if rec is not None:
    steps = np.flatnonzero(rec.triggered)
    print(f"\ntf-star-3 adapted at steps {steps.tolist()} "
          f"({rec.total_grad_steps} gradient steps), final rho {rec.rho:.3f}")
