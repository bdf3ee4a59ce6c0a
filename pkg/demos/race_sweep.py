"""How fast does a man-on-the-side attacker have to be?

Sweeps the attacker's mean reaction time against a web server that takes
about half a second to answer, and compares Monte-Carlo win rates with the
closed-form probability.  Run with ``python demos/race_sweep.py``.
"""
import numpy as np

from motsim.mots import Dist, RacePaths, analytic_win_probability, race_outcome
from motsim.simnet import ms

paths = RacePaths()
server = Dist.normal(ms(500), ms(30))   # jittery server
print("path offset (us):", paths.offset)

means = np.linspace(400, 600, 11)
mc = np.array([race_outcome(Dist.normal(ms(m), ms(40)), server, 20_000, seed=1, paths=paths)
               for m in means])
exact = np.array([analytic_win_probability(Dist.normal(ms(m), ms(40)), server, paths)
                  for m in means])

print(f"{'attacker ms':>11}  {'MC':>6}  {'exact':>6}  {'diff':>7}")
for m, a, b in zip(means, mc, exact):
    print(f"{m:11.0f}  {a:6.3f}  {b:6.3f}  {a - b:+7.4f}")
print("max |MC - exact| =", np.abs(mc - exact).max())

# where does the attacker drop to a coin flip?
half = np.interp(0.5, exact[::-1], means[::-1])
print(f"50% win rate at an attacker mean of ~{half:.1f} ms")

# a constant-delay attacker either always wins or always loses
for d in (0.1, 500.0, 500.2):
    print(f"constant {d} ms ->", race_outcome(Dist.constant(ms(d)), ms(500), 1000, 0))
