"""An eavesdropper records the uplink of a gaussian1d run and trains its own
GAN on the intercepted discriminator gradients. Compare what each side learned.

    python demos/eavesdrop_attack.py [seed]
"""
import sys

from ufedgan import attacker, data, metrics, protocol, transport
from ufedgan.experiment import resolve_protocol

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = resolve_protocol("gaussian1d", {"max_rounds": 200})
ds = data.toy_dataset(data.gaussian1d(2.0, 0.5), 4000, seed=seed)
probe = metrics.BinProbe.fit(ds.samples)

tap = transport.EavesdropTap("uplink")
server = protocol.server_init(1, cfg, seed=seed, probe=probe)
clients = {0: protocol.ClientState(0, ds.unlabeled(), cfg, seed=seed)}
final = protocol.run_until_converged(server, clients, protocol.Network([0], {0: [tap]}))
print(f"server stopped after {final.rounds} rounds ({final.stop_reasons[0]}), "
      f"{len(tap.frames)} uplink frames captured")

result = attacker.run_attack(tap, cfg, seed=seed, user=0, reference=ds.samples, probe=probe, num_samples=4000)
x_server = protocol.generate_synthetic_dataset(server, 0, 4000)
x_attack = result.samples
print(f"data      mean {ds.samples.mean():6.3f}  std {ds.samples.std():.3f}")
print(f"server G  mean {x_server.mean():6.3f}  std {x_server.std():.3f}  "
      f"IS {metrics.inception_score(x_server, probe):.3f}")
print(f"attacker  mean {x_attack.mean():6.3f}  std {x_attack.std():.3f}  IS {result.report.inception_score:.3f}")
