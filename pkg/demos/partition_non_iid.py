"""How the Dirichlet concentration shapes each user's class mix.

    python demos/partition_non_iid.py
"""
import numpy as np

from ufedgan import data

labels = np.random.default_rng(0).integers(0, 10, size=6000)
for beta in (100.0, 0.5, 0.05):
    plan = data.dirichlet_partition(labels, num_users=10, beta=beta, seed=0)
    share = plan.counts / plan.counts.sum(axis=0, keepdims=True).clip(min=1)
    top = share.max(axis=0)
    print(f"beta={beta:<6} users' largest class share: min {top.min():.2f} median {np.median(top):.2f} "
          f"max {top.max():.2f}; samples per user {plan.counts.sum(axis=0).tolist()}")
