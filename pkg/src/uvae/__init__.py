"""Semi-supervised variational autoencoder trained in both directions
(observation to composition and composition to observation)."""

__version__ = "0.1.0"
