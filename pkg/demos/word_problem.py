"""Track a product of transpositions of five items with the hand-built four-layer network.

Run: python demos/word_problem.py
"""
import numpy as np

from tape import nc1
from tape.numcore import Rng

net = nc1.build_construction()

# swap and undo, then a swap that is undone only after another undo pair
pairs = [(1, 2), (1, 2), (1, 3), (1, 2), (1, 2), (1, 3)]
ids = [nc1.SWAPS.pairs.index(p) + 1 for p in pairs]
u = np.array([nc1.BOS] + ids)
run = nc1.run_construction(net, u)
truth = nc1.oracle_labels(nc1.WordProblemInstance(u))

print(f"{'pos':>3}  {'token':>8}  {'score':>9}  decision  oracle")
for i, tok in enumerate(u):
    name = "BOS" if tok == nc1.BOS else str(nc1.SWAPS.pair(int(tok)))
    print(f"{i + 1:>3}  {name:>8}  {run.scores[i]:9.5f}  {str(run.decisions[i]):>8}  {truth[i]}")

print("\nIdentity scores shrink with position like the closed-form margin:")
for n in (2, 8, 32, 128):
    print(f"  position {n:>3}: {nc1.identity_margin(np.array([n]))[0]:.3e}")

print("\nAgreement with the brute-force oracle on random instances:")
rows, first_fail = nc1.precision_sweep(net, [8, 32, 128], 300, Rng(0))
for r in rows:
    print(f"  N={r['N']:>3}: {r['agree']}/{r['instances']}, smallest identity score {r['min_identity_score']:.2e}")
print(f"  first length with a float64 misclassification: {first_fail}")

print("\nThe same network with a shifted layer-2 threshold:")
_, broken = nc1.precision_sweep(nc1.build_construction(nc1.THRESHOLD + 1.0), [8, 32], 300, Rng(0))
print(f"  first failing length: {broken}")

print("\nThe cumulative product of swap reflections has a closed form via one triangular solve:")
xi = nc1.SWAPS.xi()[np.array(ids) - 1]
print(f"  residual {nc1.wy_check(xi):.1e}; last product restricted to 5x5:")
print(nc1.householder_product(xi)[-1][:5, :5].round(3))
