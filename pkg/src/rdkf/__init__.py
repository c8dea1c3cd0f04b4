"""Robust distributed Kalman filtering over sensor networks with event-triggered communication."""

__version__ = "0.1.0"
