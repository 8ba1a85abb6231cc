"""Regime-conditioned ODE discovery with per-patient constant fine-tuning."""

__version__ = "0.1.0"
