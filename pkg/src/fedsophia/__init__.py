"""Federated learning workbench: Fed-Sophia, FedAvg and DONE on simulated devices."""

__version__ = "0.1.0"
