"""Temporal action localization with learnable action-sensitivity loss weights."""

__version__ = "0.1.0"
