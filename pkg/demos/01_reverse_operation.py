"""
The reverse operation
=====================

A complementary-label distribution q says how likely each class is to be
*wrong*. Flipping it with Norm(1 - q) gives the pseudo-label distribution
it implies. This script looks at what the flip does to rank order and to
entropy.
"""

import numpy as np

from rdalab.probvec import entropy, reverse, reverse_closed_form

rng = np.random.default_rng(0)

# a confident prediction over five classes
p = np.array([0.70, 0.15, 0.08, 0.05, 0.02])
r = reverse(p)
print("p          ", p)
print("reverse(p) ", np.round(r, 4))
print("closed form", np.round(reverse_closed_form(p), 4))

# the order is flipped: the most likely class becomes the least likely
print("argsort p          ", np.argsort(p))
print("argsort reverse(p) ", np.argsort(r)[::-1])

# and the result is flatter, so entropy goes up
print(f"H(p) = {entropy(p):.4f}, H(reverse(p)) = {entropy(r):.4f}")

# over many random points the entropy never drops once n >= 5
for n in (5, 10, 26):
    q = rng.dirichlet(np.full(n, 0.05), 20_000)
    gap = entropy(reverse(q)) - entropy(q)
    print(f"n={n:>2}: smallest entropy gain over 20k near-vertex draws {gap.min():.4f}")

# with two classes the flip is just a swap
print("n=2:", reverse(np.array([0.9, 0.1])))
