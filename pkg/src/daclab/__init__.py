"""Continual learning by consolidating independently trained models with distillation."""

__version__ = "0.1.0"
