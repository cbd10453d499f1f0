"""
Aligning pseudo-labels reciprocally
===================================

Two heads watch the same unlabeled batch. The default head's predictions
are rescaled towards the reversed marginal of the auxiliary head, and the
other way round. Here the default head is biased towards class 0 while the
auxiliary head (which predicts which class a sample is *not*) has a fair
view of the data.
"""

import numpy as np

from rdalab.alignment import AlignmentState, prior_align, reciprocal_align_p
from rdalab.probvec import reverse, total_variation

rng = np.random.default_rng(1)
n = 5
true = np.full(n, 1 / n)

state = AlignmentState.empty(n)
for _ in range(50):
    p = rng.dirichlet([6.0, 1, 1, 1, 1], 64)  # skewed default head
    q = reverse(rng.dirichlet(np.ones(n) * 2, 64))  # auxiliary head, fair
    state.update(p, q)

p = rng.dirichlet([6.0, 1, 1, 1, 1], 2000)
aligned = reciprocal_align_p(p, state)

raw_marg = np.bincount(p.argmax(1), minlength=n) / len(p)
rda_marg = np.bincount(aligned.argmax(1), minlength=n) / len(p)
print("pseudo-label marginal, raw     ", np.round(raw_marg, 3), f"TV {total_variation(raw_marg, true):.3f}")
print("pseudo-label marginal, aligned ", np.round(rda_marg, 3), f"TV {total_variation(rda_marg, true):.3f}")

# Classic alignment uses the labeled-class prior instead. When the labeled
# set is imbalanced the prior itself is wrong and pulls in the wrong direction.
skewed_prior = np.array([0.5, 0.2, 0.15, 0.1, 0.05])
da = prior_align(p, skewed_prior, state.tracker_p)
da_marg = np.bincount(da.argmax(1), minlength=n) / len(p)
print("pseudo-label marginal, prior DA", np.round(da_marg, 3), f"TV {total_variation(da_marg, true):.3f}")
