"""Off-policy self-critical sequence training at desk scale."""

__version__ = "0.1.0"
