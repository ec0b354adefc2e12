"""Cycle-level simulator of a ternary compute-in-ROM LLM accelerator."""
__version__ = "0.1.0"
