"""Federated training of a conditional-VAE anonymizer for sensor data."""

__version__ = "0.1.0"
