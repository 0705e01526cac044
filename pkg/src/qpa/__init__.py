"""Quantum parameter adaptation: a simulated parameterized quantum circuit and a
small mapping network that together generate adapter weights for the frozen
lmhead of a character-level language model."""

__version__ = "0.1.0"
