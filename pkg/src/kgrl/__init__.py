"""Knowledge-grounded reinforcement learning laboratory."""

__version__ = "0.1.0"
