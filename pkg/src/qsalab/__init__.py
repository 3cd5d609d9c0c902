"""Q-learning and stochastic approximation laboratory."""

__version__ = "0.1.0"
