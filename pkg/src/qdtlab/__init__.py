"""Offline RL laboratory for quantum-inspired Decision Transformer variants."""

__version__ = "0.1.0"
