"""Federated CI execution: broker, outbound-only agents, and a CI step adapter."""

__version__ = "0.1.0"
