"""Monitoring a hand-made trajectory against the case-study specification.

Builds one environment, writes the specification as text, scores a path that
dwells in the coverage circle before parking in the goal, and asks which
states the verdict is most sensitive to.

    python3 walkthroughs/01_monitor.py
"""
import numpy as np

from stlctrl.autodiff import Tape
from stlctrl.envgen import PHI_TEXT, bind_predicates, build_phi, case_study_env
from stlctrl.stl import parse, robustness, robustness_trace, to_text


def path(waypoints):
    rows = []
    for a, b, n, v in waypoints:
        for s in np.linspace(0, 1, n, endpoint=False):
            p = (1 - s) * np.asarray(a) + s * np.asarray(b)
            rows.append([p[0], p[1], 0.0, v])
    return np.array(rows)


env = case_study_env(5.0)
for r in env.regions:
    print(f"{r.kind:9s} centre ({r.center[0]:.1f}, {r.center[1]:.1f})  radius {r.radius}")

phi = parse(PHI_TEXT, bind_predicates(env))
assert phi == build_phi(env)
print("\nspec:", to_text(phi))

# start -> coverage, dwell slowly, swing above the obstacle, park in the goal
states = path([((0.5, 5.0), (5.0, 8.0), 10, 3.0), ((5.0, 8.0), (5.0, 8.0), 12, 1.0),
               ((5.0, 8.0), (13.0, 8.5), 12, 3.0), ((13.0, 8.5), (13.0, 5.0), 8, 2.0),
               ((13.0, 5.0), (13.0, 5.0), 14, 0.0)])
res = robustness(phi, states)
print(f"\nrho = {float(res):.3f}  satisfied = {res.satisfied}")

# cutting straight through the obstacle is a violation
cut = states.copy()
cut[22:34, :2] = np.linspace((5.0, 8.0), (9.0, 6.0), 12)
print(f"through the obstacle: rho = {float(robustness(phi, cut)):.3f}")

# robustness over time, and the smooth version used for training
print("\nrho(t) for the first 10 steps:", np.round(robustness_trace(phi, states)[:10], 3))
for temp in (1.0, 10.0, 100.0):
    print(f"smooth rho at temperature {temp:>5g}: {float(robustness(phi, states, 0, temp)):.3f}")

tape = Tape()
x = tape.var(states)
g = tape.backward(robustness(phi, x).value).of(x)
t, ch = np.unravel_index(np.argmax(np.abs(g)), g.shape)
print(f"\nthe exact verdict hinges on step {t}, channel {'x y psi V'.split()[ch]} "
      f"(d rho / d state = {g[t, ch]:+.2f})")
