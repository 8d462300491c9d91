"""Deterministic desk-scale simulator for vehicular semantic communication:
semantic camouflage, robust federated codec training and audit-game trust."""

__version__ = "0.1.0"
