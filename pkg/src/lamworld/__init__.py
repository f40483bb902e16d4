"""Latent-action pretraining, a rectified-flow world model, and a two-stage
policy, trained and measured end to end on a sprite world whose ground-truth
actions make every claim checkable."""

__version__ = "0.1.0"
