"""Density weights vs density-ratio weights for two shifted Gaussians.

Ratio weights explode in the tail of the source distribution, which shows up
as a large maximum weight, a small effective sample size and a loose
Bernstein deviation bound.

    python demos/weighting_tradeoff.py
"""
import numpy as np

from wri_lab import analysis as A
from wri_lab.models import GaussianDensity

n, delta = 1000, 0.05
x = np.random.default_rng(0).standard_normal(n)
src = GaussianDensity([0.0], [[1.0]])
rows = []
for shift in (0.5, 1.0, 2.0, 3.0):
    tgt = GaussianDensity([shift], [[1.0]])
    for name, w in (("density", tgt.pdf(x)), ("ratio", tgt.pdf(x) / src.pdf(x))):
        M, var, ess = A.weight_stats(w)
        rows.append([shift, name, f"{M:.2f}", f"{ess:.1f}", f"{A.bernstein_bound(M, var, n, delta):.4f}"])
print(A.format_table(["shift", "weights", "M", "ESS", "bound"], rows))
