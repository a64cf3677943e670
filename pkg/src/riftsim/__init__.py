"""Closed-loop traffic simulation with group-relative fine-tuning of a trajectory scoring head."""

__version__ = "0.1.0"
