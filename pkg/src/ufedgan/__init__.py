"""Split federated GAN training on unlabeled data, with an eavesdropping
reconstruction attacker and privacy/utility metrics."""

__version__ = "0.1.0"
