"""Mean-field controlled SPDE laboratory."""
__version__ = "0.1.0"
