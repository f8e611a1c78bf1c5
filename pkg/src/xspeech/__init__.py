"""Extreme-speech classification pipeline: splits, prompting, LLM inference,
class probabilities, SFT/DPO dataset export, ensembles and F1 reporting."""

__version__ = "0.1.0"
