"""Faithfulness violation test bench for attention-model explanations."""

__version__ = "0.1.0"
