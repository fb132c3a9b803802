"""GAN objectives returning (loss, flat parameter gradient).

None of these functions change model weights. Discriminator probabilities
are handled through logits so a saturated sigmoid never reaches the log.
"""
import contextlib

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tape, Tensor


@contextlib.contextmanager
def frozen(model):
    """Stop gradient tracking on ``model``'s parameters for the block."""
    flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad = f


def _as_batch(batch, model):
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if data.ndim == 0 or data.shape[0] == 0:
        raise ContractError("batch must be non-empty")
    return Tensor(data.astype(model.dtype, copy=False))


def gradient_of(model, objective):
    """Evaluate ``objective()`` on a fresh tape; return (loss, flat gradient of model)."""
    params = model.parameters()
    with Tape() as tape:
        tape.watch(params)
        loss = objective()
    grads = tape.backward(loss)
    return float(loss.item()), T.flatten_params([grads[p] for p in params]).astype(model.dtype)


def discriminator_loss_real(D, batch):
    """Mean BCE of D on real samples against target 1, and its gradient."""
    x = _as_batch(batch, D)

    def objective():
        logits = D.forward(x, logits=True)
        return T.bce_with_logits(logits, np.ones(logits.shape, dtype=D.dtype))

    return gradient_of(D, objective)


def discriminator_loss_fake(D, fake_batch):
    """Mean BCE of D on generated samples against target 0, and its gradient."""
    x = _as_batch(fake_batch, D)

    def objective():
        logits = D.forward(x, logits=True)
        return T.bce_with_logits(logits, np.zeros(logits.shape, dtype=D.dtype))

    return gradient_of(D, objective)


def generator_loss(G, D, latent_batch):
    """Non-saturating generator loss -mean log D(G(z)); gradient w.r.t. G only."""
    z = _as_batch(latent_batch, G)
    with frozen(D):
        def objective():
            logits = D.forward(G.forward(z), logits=True)
            return T.bce_with_logits(logits, np.ones(logits.shape, dtype=D.dtype))

        return gradient_of(G, objective)
