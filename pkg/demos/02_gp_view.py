"""The Gaussian-process view: imitation error is bounded below by posterior variance.

Run: python demos/02_gp_view.py
"""

import numpy as np

from pec_cil import gp

k = gp.RBFKernel(lengthscale=1.0, amplitude=1.0)

# Posterior variance depends on the inputs only: small near data, prior far away.
X = np.array([-2.0, -1.5, 0.0, 0.4, 2.5])
xs = np.linspace(-4, 4, 9)
var = gp.posterior_variance(gp.GPModel(k, X), xs)
for x, v in zip(xs, var):
    print(f"x* = {x:+.1f}   variance {v:.4f}")

# A classifier built on that: the class whose inputs explain x* best wins.
left, right = gp.GPModel(k, [-3.2, -3.0, -2.8]), gp.GPModel(k, [2.8, 3.0, 3.2])
print("classes at -2, 0, 2.9:", gp.gp_classify([left, right], [-2.0, 0.0, 2.9]))

# Teachers drawn from the prior, small networks fitted to them on X: the mean
# squared error at x* stays above the posterior variance.
cfg = gp.ImitatorConfig(width=64, max_steps=3000)
report = gp.check_proposition1(k, X, xs, B=64, cfg=cfg)
for x, s, v in zip(xs, report.s_B, report.posterior_var):
    print(f"x* = {x:+.1f}   s_B {s:.4f} >= {v:.4f}")
print(f"bound holds (3 SE margin) at {100 * report.pass_fraction:.0f}% of points")
