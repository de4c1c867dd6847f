"""
Label and quantity skew
=======================

Shows how the Dirichlet concentration controls the class mix and the shard
sizes of five clients.
"""

import numpy as np

from feddiffuse.data import PartitionSpec, make_partition, synthetic_fashion

ds = synthetic_fashion(10_000, seed=0)

#%%
# Per-client class counts under label skew.  Small beta leaves each client a
# few dominant classes.

for beta in (0.1, 0.5, 100.0):
    part = make_partition(ds, PartitionSpec("label_skew", 5, beta, seed=1))
    print(f"beta = {beta}")
    for k, shard in enumerate(part.shards):
        counts = np.bincount(ds.labels[shard], minlength=10)
        print(f"  client {k}: " + " ".join(f"{c:4d}" for c in counts))

#%%
# Quantity skew keeps the label mix but not the shard sizes.

for beta in (0.1, 0.5, 100.0):
    part = make_partition(ds, PartitionSpec("quantity_skew", 5, beta, seed=1))
    print(f"beta = {beta}: sizes {part.sizes}")
