"""Decentralized Mirror-Prox for saddle problems over gossip networks."""

__version__ = "0.1.0"
