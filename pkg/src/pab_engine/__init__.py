"""Desk-scale video DiT inference engine with per-kind attention-output
broadcasting, baseline caching policies, analytic FLOP and communication
accounting, and a simulated sequence-parallel runtime."""

__version__ = "0.1.0"
