"""A short offline synthesis run on the reach-avoid task.

Generates scripted demonstrations, trains the trajectory-feedback policy with
imitation plus robustness loss and one round of adversarial sampling, then
reports held-out satisfaction.  This is the shipped ``desk_reach_avoid``
config with one adversarial round instead of two, and takes two or three
minutes on one core.

    python3 walkthroughs/02_train_reach_avoid.py [out.json]
"""
import sys
import time
from dataclasses import replace

import numpy as np

from stlctrl.config import load_config
from stlctrl.train import evaluate, make_samples, scripted_demos, synthesize

cfg = load_config("desk_reach_avoid")
tcfg = replace(cfg.train, K=1, n_probes=64)
out = sys.argv[1] if len(sys.argv) > 1 else "reach_avoid_policy.json"

t0 = time.time()
demos = scripted_demos(cfg.demos.count, tcfg.T, tcfg.spec, seed=0)
print(f"{len(demos)} demos ({demos.rejected} expert draws rejected), "
      f"robustness {np.round([d.rho for d in demos], 2)}")

res = synthesize(tcfg, demos, cfg.layout, log=print)
for row in res.history[::40]:
    print(f"epoch {row['epoch']:3d}  L_STL {row['L_STL']:+.3f}  L_imit {row['L_imit']:.3f}  "
          f"violations {row['violation_rate']:.2f}")

probes = make_samples(256, 99)
rho = evaluate(res.params, probes, tcfg.spec, tcfg.T, seed=100)
print(f"\nheld-out satisfaction {np.mean(rho >= 0):.1%}, median rho {np.median(rho):.3f}, "
      f"{time.time() - t0:.0f} s")
res.params.save(out)
print("saved", out)
