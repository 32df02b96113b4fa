"""Train ERM, IRM, VREx and WRI on the 2-D toy data and compare spurious reliance.

    python demos/toy_comparison.py [seed]
"""
import sys

from wri_lab import experiments as E

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
res = E.run("fig1", {"seed": seed, "n": 4000, "n_steps": 300})
print(res.text)
best = min(res.tables["weights"], key=lambda r: r["ratio"])
print(f"\nsmallest |w_spu / w_inv|: {best['method']} ({best['ratio']:.3f})")
