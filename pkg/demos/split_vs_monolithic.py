"""Train one user's GAN through the split protocol and with a plain
single-process trainer fed the same random streams, then compare weights.

    python demos/split_vs_monolithic.py [steps]
"""
import sys

import numpy as np

from ufedgan import data, protocol
from ufedgan.protocol import ProtocolConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
cfg = ProtocolConfig(profile="mixture2d", steps_per_round=steps, batch_size=64, lr=1e-3, max_rounds=1,
                     stop_on_plateau=False)
ds = data.toy_dataset(data.mixture2d(), 4000, seed=0)

server = protocol.server_init(1, cfg, seed=0)
client = protocol.ClientState(0, ds.unlabeled(), cfg, seed=0)
protocol.run_until_converged(server, {0: client}, protocol.Network([0]))
mono = protocol.MonolithicTrainer(ds.samples, cfg, seed=0).run(steps)

split = server.users[0].gan
for name in ("discriminator", "generator"):
    a, b = getattr(split, name).get_flat(), getattr(mono.gan, name).get_flat()
    print(f"{name:13s} {a.size:6d} weights, max |split - monolithic| = {np.abs(a - b).max():.2e}")
print(f"client work: {client.counters['forward']} forward, {client.counters['backward']} backward, "
      f"{client.counters['optimizer_steps']} optimizer steps, "
      f"{client.counters['generator_allocations']} generator allocations")
