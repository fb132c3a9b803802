"""Reconstruction attack from an eavesdropped uplink transcript.

The eavesdropper sees the client's discriminator gradients and losses, knows
the published architecture and the server's hyperparameters, but not the
server's weights. It trains its own pair (G_A, D_A) exactly like the server
does, substituting its own fake-data term:

    D_A <- D_A - step(grad_u + grad_fake(D_A, G_A(z)))
    G_A <- G_A - step(grad_G(G_A, D_A))

All attacker randomness comes from ``attacker-*`` streams, disjoint from
every server and client stream.
"""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import optim
from .errors import ReplayError
from .losses import discriminator_loss_fake, generator_loss
from .metrics import MetricReport, evaluate_samples
from .protocol import ProtocolConfig, init_gan
from .rng import make_stream
from .transport import ClientUpdateUp, DiscriminatorDown


@dataclass
class InterceptedUpdate:
    round: int
    step: int
    gradient: np.ndarray
    loss: float
    user: int = 0

    @classmethod
    def from_message(cls, msg):
        return cls(msg.round, msg.step, np.asarray(msg.gradient), float(msg.loss), msg.user)


@dataclass
class AttackerState:
    config: ProtocolConfig
    seed: int
    gan: object
    opt_g: optim.OptimizerState
    opt_d: optim.OptimizerState
    latent: np.random.Generator
    cursor: int = 0
    last: Optional[tuple] = None  # (round, step) of the last consumed update
    losses: List[float] = field(default_factory=list)


def attacker_init(config=None, seed=0):
    """Fresh shadow GAN of the server's architecture, seeded from attacker streams."""
    config = config or ProtocolConfig()
    gan = init_gan(config.profile, seed, "attacker-init", np.dtype(config.dtype), config.out_channels)
    return AttackerState(
        config=config, seed=int(seed), gan=gan,
        opt_g=optim.make_optimizer(gan.generator, config.optimizer, config.lr, config.betas),
        opt_d=optim.make_optimizer(gan.discriminator, config.optimizer, config.lr, config.betas),
        latent=make_stream(seed, "attacker-latent"),
    )


def intercepted_updates(messages, user=None):
    """The uplink updates in ``messages``, optionally for a single user."""
    return [InterceptedUpdate.from_message(m) for m in messages
            if isinstance(m, ClientUpdateUp) and (user is None or m.user == user)]


def attack_step(attacker, update, weights=None):
    """Mirror one server step with an intercepted real-data gradient.

    ``weights`` (downlink ablation) overwrites D_A with the intercepted
    server discriminator before the update is applied.
    """
    key = (update.round, update.step)
    if attacker.last is not None and key <= attacker.last:
        raise ReplayError(f"update {key} after {attacker.last}: transcript out of order", cursor=attacker.cursor)
    D, G = attacker.gan.discriminator, attacker.gan.generator
    grad_u = np.asarray(update.gradient)
    if grad_u.shape != (D.num_parameters,):
        raise ReplayError(f"intercepted gradient has {grad_u.size} entries, shadow discriminator has "
                          f"{D.num_parameters} parameters; architecture mismatch", cursor=attacker.cursor)
    if weights is not None:
        D.set_flat(weights)
    batch = attacker.config.batch_size
    z = attacker.latent.standard_normal((batch, attacker.gan.latent_dim)).astype(D.dtype)
    _, grad_fake = discriminator_loss_fake(D, G.forward(z))
    optim.apply_gradient(D, attacker.opt_d, grad_u.astype(D.dtype) + grad_fake)
    z = attacker.latent.standard_normal((batch, attacker.gan.latent_dim)).astype(G.dtype)
    _, grad_g = generator_loss(G, D, z)
    optim.apply_gradient(G, attacker.opt_g, grad_g)
    attacker.last = key
    attacker.cursor += 1
    attacker.losses.append(update.loss)
    return attacker


def reconstruct(attacker, n, stream="attacker-samples"):
    """``n`` samples from G_A (batchnorm in eval mode)."""
    G = attacker.gan.generator
    z = make_stream(attacker.seed, stream).standard_normal((n, attacker.gan.latent_dim)).astype(G.dtype)
    return G.forward(z, training=False).data.copy()


@dataclass
class AttackResult:
    state: AttackerState
    samples: np.ndarray
    report: MetricReport


def run_attack(transcript, config=None, seed=0, user=None, reference=None, probe=None,
               num_samples=1024, use_downlink=False, splits=10):
    """Replay every intercepted update of ``transcript`` and score G_A.

    ``transcript`` is a :class:`~ufedgan.transport.Transcript`, a tap, or a
    list of messages. Only the uplink is used unless ``use_downlink`` is set,
    in which case each update is preceded by loading the matching
    intercepted discriminator weights.
    """
    messages = transcript.messages() if hasattr(transcript, "messages") else list(transcript)
    attacker = attacker_init(config, seed)
    weights = {}
    if use_downlink:
        weights = {(m.user, m.round, m.step): m.weights for m in messages
                   if isinstance(m, DiscriminatorDown) and (user is None or m.user == user)}
    for upd in intercepted_updates(messages, user):
        attack_step(attacker, upd, weights.get((upd.user, upd.round, upd.step)))
    samples = reconstruct(attacker, num_samples)
    fields = {"inception_score": 1.0}
    if reference is not None:
        fields = evaluate_samples(samples, reference, probe, splits)
    last_round = attacker.last[0] if attacker.last else 0
    report = MetricReport(last_round, -1 if user is None else user, "attacker", **fields)
    return AttackResult(attacker, samples, report)
