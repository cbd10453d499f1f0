"""
Class-count protocols
=====================

Per-class counts for every protocol at the default desk-scale settings:
100 labels over 10 classes, 400 unlabeled per class before any imbalance.
"""

from rdalab import datasets as ds
from rdalab.errors import ProtocolError

for protocol in ds.PROTOCOLS:
    counts = ds.split_counts(ds.DatasetSpec(protocol=protocol))
    print(f"{protocol}")
    print(f"  labeled   {counts.labeled_per_class}  (sum {sum(counts.labeled_per_class)})")
    print(f"  unlabeled {counts.unlabeled_per_class}")

# The imbalanced labeled set comes from a search over integer imbalance
# ratios: the smallest ratio whose floored profile falls short of the label
# budget, followed by a one-label top-up of the classes after the head.
g, raw = ds.gamma_search(100, 30, 10)
print(f"\ngamma_x = {g}, floored counts {raw}, after top-up {ds.top_up(raw, 100)}")

# A larger head leaves the tail without labels: N0 = 40 needs gamma_x = 72
# and the last two classes get nothing. That is why the default is N0 = 30.
g, raw = ds.gamma_search(100, 40, 10)
print(f"N0=40: gamma_x = {g}, counts {ds.top_up(raw, 100)}")

# A protocol can also be infeasible. With N0 = 12 the jump from gamma_x = 1
# (sum 120) to gamma_x = 2 (sum 83) leaves 17 labels missing, more than one
# top-up round over 10 classes can add.
g, raw = ds.gamma_search(100, 12, 10)
try:
    ds.top_up(raw, 100)
except ProtocolError as exc:
    print(f"N0=12: gamma_x = {g}, counts {raw}:", exc)
