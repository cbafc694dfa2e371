"""Device-aware DNN design optimization against a simulated device fleet."""

__version__ = "0.1.0"
