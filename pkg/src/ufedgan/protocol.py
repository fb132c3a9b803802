"""Split GAN training between a server and label-free clients.

For every user the server owns a generator G_u and discriminator D_u. One
protocol step for user u:

1. the server sends D_u's weights down the link;
2. the client runs D_u forward and backward on one batch of its own data
   (target "real") and sends back only the gradient and the loss;
3. the server computes the fake-data gradient of D_u on a batch G_u(z),
   adds the two gradients and takes one optimizer step on D_u;
4. the server takes one generator step against the updated D_u.

Clients never hold a generator and never run an optimizer. A round is
``steps_per_round`` such steps, after which the server scores G_u with the
inception score and checks for a plateau.
"""
import hashlib
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import nn, optim
from . import tensor as T
from .errors import ConfigError, DataError, LinkError, ProtocolError
from .losses import discriminator_loss_fake, discriminator_loss_real, generator_loss, gradient_of
from .metrics import MetricReport, inception_score
from .rng import make_stream
from .transport import ClientUpdateUp, DiscriminatorDown, RoundComplete, in_process_link


@dataclass
class ProtocolConfig:
    profile: str = "gaussian1d"
    steps_per_round: int = 5
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    max_rounds: int = 300
    plateau_window: int = 10
    plateau_eps: float = 0.05
    stop_on_plateau: bool = True  # False runs exactly max_rounds rounds
    is_samples: int = 1024
    is_splits: int = 10
    dtype: str = "float32"
    out_channels: int = 1

    def __post_init__(self):
        if self.steps_per_round < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_round and batch_size must be >= 1")
        if self.max_rounds < 0 or self.plateau_window < 1:
            raise ConfigError("max_rounds must be >= 0 and plateau_window >= 1")
        self.betas = tuple(self.betas)


def sample_batch_indices(rng, n, batch_size):
    """Indices of one client batch, drawn with replacement."""
    return rng.integers(0, n, size=batch_size)


def init_gan(profile, seed, prefix, dtype=np.float32, out_channels=1):
    """GanPair whose G and D come from the streams ``<prefix>:generator`` / ``:discriminator``."""
    return nn.build_gan(profile, make_stream(seed, f"{prefix}:generator"),
                        make_stream(seed, f"{prefix}:discriminator"), dtype, out_channels)


# convergence -----------------------------------------------------------------

def plateaued(history, window, eps):
    """True when the best score of the last ``window`` rounds improves on the
    best of the ``window`` rounds before it by less than ``eps``."""
    if len(history) < 2 * window:
        return False
    recent = list(history)[-2 * window:]
    return max(recent[window:]) - max(recent[:window]) < eps


@dataclass
class ConvergenceMonitor:
    window: int = 10
    eps: float = 0.05
    max_rounds: int = 300
    stop_on_plateau: bool = True
    history: deque = field(default_factory=deque)
    rounds: int = 0
    stop_reason: Optional[str] = None

    def __post_init__(self):
        self.history = deque(self.history, maxlen=2 * self.window)

    def update(self, score):
        self.history.append(float(score))
        self.rounds += 1

    def should_stop(self):
        if self.rounds >= self.max_rounds:
            self.stop_reason = self.stop_reason or "max-rounds"
            return True
        if self.stop_on_plateau and plateaued(self.history, self.window, self.eps):
            self.stop_reason = self.stop_reason or "plateau"
            return True
        return False


# server ----------------------------------------------------------------------

@dataclass
class UserSlot:
    gan: nn.GanPair
    opt_g: optim.OptimizerState
    opt_d: optim.OptimizerState
    latent: np.random.Generator
    monitor: ConvergenceMonitor
    outstanding: Optional[tuple] = None  # (round, step) awaiting a client reply
    d_steps: int = 0
    g_steps: int = 0
    done: bool = False


@dataclass
class ServerState:
    config: ProtocolConfig
    seed: int
    users: Dict[int, UserSlot]
    round: int = 0
    step: int = 0
    probe: object = None

    def digest(self):
        h = hashlib.sha256()
        h.update(np.int64(self.round).tobytes() + np.int64(self.step).tobytes())
        for u in sorted(self.users):
            slot = self.users[u]
            h.update(slot.gan.generator.state_bytes())
            h.update(slot.gan.discriminator.state_bytes())
            h.update(slot.opt_g.state_bytes() + slot.opt_d.state_bytes())
        return h.hexdigest()


def server_init(num_users, config=None, seed=0, probe=None):
    """One freshly initialized GAN (plus optimizers) per user; no training."""
    config = config or ProtocolConfig()
    if num_users < 1:
        raise ConfigError("num_users must be >= 1")
    users = {}
    for u in range(num_users):
        gan = init_gan(config.profile, seed, f"server-init:{u}", np.dtype(config.dtype), config.out_channels)
        users[u] = UserSlot(
            gan=gan,
            opt_g=optim.make_optimizer(gan.generator, config.optimizer, config.lr, config.betas),
            opt_d=optim.make_optimizer(gan.discriminator, config.optimizer, config.lr, config.betas),
            latent=make_stream(seed, f"latent:{u}"),
            monitor=ConvergenceMonitor(config.plateau_window, config.plateau_eps, config.max_rounds,
                                       config.stop_on_plateau),
        )
    return ServerState(config, int(seed), users, probe=probe)


def discriminator_down(server, user, round_, step):
    """Build the downlink message and remember which reply is expected."""
    slot = server.users[user]
    slot.outstanding = (round_, step)
    return DiscriminatorDown(user, round_, step, slot.gan.discriminator.get_flat().copy())


def _latent_batch(slot, batch_size, dtype):
    return slot.latent.standard_normal((batch_size, slot.gan.latent_dim)).astype(dtype)


def server_discriminator_step(server, user, reply, fake_gradient=None):
    """Combine the client's real-data gradient with a fresh fake-data gradient
    and apply one optimizer step to D_u.

    ``fake_gradient`` replaces the server-side term (test harness hook).
    """
    slot = server.users.get(user)
    if slot is None:
        raise ProtocolError(f"unknown user {user}")
    key = (reply.round, reply.step)
    if reply.user != user or slot.outstanding is None or key != slot.outstanding:
        raise ProtocolError(f"user {user}: unexpected reply for round/step {key}, awaiting {slot.outstanding}")
    D, G = slot.gan.discriminator, slot.gan.generator
    if reply.gradient.shape != (D.num_parameters,):
        raise ProtocolError(f"user {user}: gradient of length {reply.gradient.size}, expected {D.num_parameters}")
    z = _latent_batch(slot, server.config.batch_size, D.dtype)
    if fake_gradient is None:
        fake = G.forward(z)
        _, fake_gradient = discriminator_loss_fake(D, fake)
    optim.apply_gradient(D, slot.opt_d, reply.gradient.astype(D.dtype) + fake_gradient)
    slot.outstanding = None
    slot.d_steps += 1
    return server


def server_generator_step(server, user):
    """One non-saturating generator step for G_u against the current D_u."""
    slot = server.users[user]
    G, D = slot.gan.generator, slot.gan.discriminator
    z = _latent_batch(slot, server.config.batch_size, G.dtype)
    _, grad = generator_loss(G, D, z)
    optim.apply_gradient(G, slot.opt_g, grad)
    slot.g_steps += 1
    return server


def generate_synthetic_dataset(server, user, n, seed=None, stream=None):
    """``n`` samples from G_u with batchnorm in eval mode, from a seeded latent stream."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    slot = server.users[user]
    rng = make_stream(server.seed if seed is None else seed, stream or f"synthetic:{user}")
    G = slot.gan.generator
    z = rng.standard_normal((n, slot.gan.latent_dim)).astype(G.dtype)
    return G.forward(z, training=False).data.copy()


def server_inception_score(server, user, round_):
    cfg = server.config
    samples = generate_synthetic_dataset(server, user, cfg.is_samples, stream=f"eval:{user}:{round_}")
    return inception_score(samples, server.probe, cfg.is_splits)


# client ----------------------------------------------------------------------

class ClientState:
    """A user device: local unlabeled data and a discriminator scratch copy.

    ``counters`` records the work done here: forward and backward passes,
    generator allocations and optimizer steps (the last two must stay 0).
    """

    def __init__(self, user, data, config=None, seed=0):
        config = config or ProtocolConfig()
        self.user = user
        self.data = data  # UnlabeledView
        self.batch_size = config.batch_size
        self.sampler = make_stream(seed, f"client-batch:{user}")
        _, d_spec, _ = _specs(config)
        self.discriminator_spec = d_spec
        self.dtype = np.dtype(config.dtype)
        self.discriminator = None
        self.counters = Counter(forward=0, backward=0, generator_allocations=0, optimizer_steps=0, steps=0)

    def _scratch(self):
        if self.discriminator is None:
            self.discriminator = nn.Model(self.discriminator_spec, np.random.default_rng(0), self.dtype)
        return self.discriminator

    def step(self, msg):
        """Answer one DiscriminatorDown with the real-data gradient and loss."""
        if not isinstance(msg, DiscriminatorDown):
            raise ProtocolError(f"client {self.user}: unexpected {type(msg).__name__}")
        if msg.user != self.user:
            raise ProtocolError(f"client {self.user}: message addressed to user {msg.user}")
        if msg.weights.shape != (self.discriminator_spec.parameter_count,):
            raise ProtocolError(f"client {self.user}: received {msg.weights.size} weights, "
                                f"model has {self.discriminator_spec.parameter_count}")
        if len(self.data) == 0:
            raise DataError(f"client {self.user}: local dataset is empty")
        before = _work_counters()
        D = self._scratch()
        D.set_flat(msg.weights)
        batch = self.data.batch(sample_batch_indices(self.sampler, len(self.data), self.batch_size))
        f0 = D.forward_count
        loss, grad = discriminator_loss_real(D, batch)
        after = _work_counters()
        self.counters["forward"] += D.forward_count - f0
        self.counters["backward"] += after["backward"] - before["backward"]
        self.counters["generator_allocations"] += after["generator_allocations"] - before["generator_allocations"]
        self.counters["optimizer_steps"] += after["optimizer_steps"] - before["optimizer_steps"]
        self.counters["steps"] += 1
        return ClientUpdateUp(self.user, msg.round, msg.step, grad, loss)

    def serve(self, endpoint):
        """Process every pending downlink message on ``endpoint``."""
        while endpoint.pending():
            msg = endpoint.receive()
            if isinstance(msg, RoundComplete):
                self.last_round_score = msg.inception_score
                continue
            endpoint.send(self.step(msg))


def _specs(config):
    if config.profile == "dcgan-64":
        return (nn.dcgan_generator_spec(config.out_channels),
                nn.dcgan_discriminator_spec(config.out_channels), nn.DCGAN_LATENT_DIM)
    return nn.toy_specs(config.profile)


def _work_counters():
    return {
        "backward": T.backward_count(),
        "generator_allocations": sum(v for k, v in nn.ALLOCATIONS.items() if "generator" in k),
        "optimizer_steps": optim.step_count(),
    }


# network and rounds ----------------------------------------------------------

class Network:
    """In-process links between the server and each client, with optional taps."""

    def __init__(self, users, taps=None):
        self.links = {}
        taps = taps or {}
        for u in users:
            self.links[u] = in_process_link(taps.get(u, ()), name=f"user{u}")

    def server_end(self, user):
        return self.links[user][0]

    def client_end(self, user):
        return self.links[user][1]


@dataclass
class RoundReport:
    round: int
    reports: List[MetricReport]
    active_users: List[int]


@dataclass
class FinalReport:
    rounds: int
    stop_reasons: Dict[int, str]
    history: List[RoundReport]

    @property
    def metric_reports(self):
        return [r for rr in self.history for r in rr.reports]


def _snapshot(slot):
    return (slot.gan.generator.copy(), slot.gan.discriminator.copy(), slot.opt_g.copy(), slot.opt_d.copy(),
            slot.latent.bit_generator.state, slot.d_steps, slot.g_steps)


def _restore(slot, snap):
    g, d, og, od, latent_state, ds, gs = snap
    slot.gan = nn.GanPair(g, d, slot.gan.latent_dim, slot.gan.profile)
    slot.opt_g, slot.opt_d = og, od
    slot.latent.bit_generator.state = latent_state
    slot.d_steps, slot.g_steps = ds, gs
    slot.outstanding = None


def run_user_round(server, user, client, network, round_):
    """T protocol steps for one user over its link; then the round's IS."""
    slot = server.users[user]
    s_end, c_end = network.server_end(user), network.client_end(user)
    snap = _snapshot(slot)
    try:
        for t in range(1, server.config.steps_per_round + 1):
            s_end.send(discriminator_down(server, user, round_, t))
            client.serve(c_end)
            reply = s_end.receive()
            server_discriminator_step(server, user, reply)
            server_generator_step(server, user)
            server.step += 1
    except LinkError as exc:
        _restore(slot, snap)
        raise ProtocolError(f"round {round_} for user {user} aborted: {exc}") from exc
    score = server_inception_score(server, user, round_) if server.probe is not None else 1.0
    s_end.send(RoundComplete(user, round_, score))
    client.serve(c_end)
    slot.monitor.update(score)
    return score


def run_round(server, clients, network, evaluator=None):
    """One communication round for every user that has not converged yet."""
    round_ = server.round + 1
    reports, active = [], []
    for u in sorted(server.users):
        slot = server.users[u]
        if slot.done:
            continue
        active.append(u)
        score = run_user_round(server, u, clients[u], network, round_)
        extra = evaluator(server, u, round_) if evaluator is not None else {}
        reports.append(MetricReport(round_, u, "server", score, **extra))
        if slot.monitor.should_stop():
            slot.done = True
    server.round = round_
    return RoundReport(round_, reports, active)


def run_until_converged(server, clients, network, evaluator=None, max_rounds=None,
                        on_round: Optional[Callable] = None):
    """Repeat rounds until every user's monitor stops (plateau or round cap)."""
    cap = server.config.max_rounds if max_rounds is None else max_rounds
    for slot in server.users.values():
        slot.monitor.max_rounds = cap
        if cap <= 0:
            slot.done = True
            slot.monitor.stop_reason = "max-rounds"
    history = []
    while not all(slot.done for slot in server.users.values()):
        rr = run_round(server, clients, network, evaluator)
        history.append(rr)
        if on_round is not None:
            on_round(rr)
    reasons = {u: s.monitor.stop_reason for u, s in server.users.items()}
    return FinalReport(server.round, reasons, history)


# single-process reference trainer ----------------------------------------------

class MonolithicTrainer:
    """Ordinary one-machine GAN training for one user's data.

    Consumes exactly the random streams the split protocol uses for user
    ``user`` (initial weights, client batches, latent batches) but computes
    the discriminator update from one loss over the concatenated real and
    fake batch. Used as the reference for split/monolithic equivalence, and
    as a "train the whole GAN locally" baseline.
    """

    def __init__(self, data, config=None, seed=0, user=0):
        self.config = config or ProtocolConfig()
        self.data = np.asarray(data)
        cfg = self.config
        self.gan = init_gan(cfg.profile, seed, f"server-init:{user}", np.dtype(cfg.dtype), cfg.out_channels)
        self.opt_g = optim.make_optimizer(self.gan.generator, cfg.optimizer, cfg.lr, cfg.betas)
        self.opt_d = optim.make_optimizer(self.gan.discriminator, cfg.optimizer, cfg.lr, cfg.betas)
        self.sampler = make_stream(seed, f"client-batch:{user}")
        self.latent = make_stream(seed, f"latent:{user}")

    def step(self):
        cfg = self.config
        G, D = self.gan.generator, self.gan.discriminator
        real = self.data[sample_batch_indices(self.sampler, len(self.data), cfg.batch_size)].astype(D.dtype)
        z = self.latent.standard_normal((cfg.batch_size, self.gan.latent_dim)).astype(D.dtype)
        fake = G.forward(z).data
        both = T.Tensor(np.concatenate([real, fake]))
        targets = np.concatenate([np.ones(len(real)), np.zeros(len(fake))]).astype(D.dtype)

        def objective():
            logits = T.reshape(D.forward(both, logits=True), (-1,))
            # mean over 2B samples times 2 == mean real term + mean fake term (equal batch sizes)
            return T.mul(T.bce_with_logits(logits, targets), 2.0)

        _, grad_d = gradient_of(D, objective)
        optim.apply_gradient(D, self.opt_d, grad_d)
        z2 = self.latent.standard_normal((cfg.batch_size, self.gan.latent_dim)).astype(G.dtype)
        _, grad_g = generator_loss(G, D, z2)
        optim.apply_gradient(G, self.opt_g, grad_g)

    def run(self, steps):
        for _ in range(steps):
            self.step()
        return self
